//! Target moment SDEs `dZ = a(Z) dt + s(Z) dW`: the drift `a`, diffusion `s`,
//! and a singularity margin that stands in for the distance to the singular
//! set `S` where the coefficients stop being Lipschitz.
//!
//! The margin is positive away from `S`, tends to zero on approach, and is
//! `+inf` when `S` is empty. For the mean-and-variance driver the margin is
//! the surrogate `h(z) = z_2 - z_1^2` (the variance itself) rather than the
//! Euclidean distance to the parabola `{z_2 = z_1^2}`: it is a monotone
//! indicator of approach to `S` and avoids a cubic solve, and every threshold
//! policy in this crate is stated against this surrogate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("driver evaluated at a singular point (margin {margin}, z={z:?})")]
    AtSingularity { margin: f64, z: Vec<f64> },
}

/// A target SDE; immutable and cheap to clone.
#[derive(Clone, Debug)]
pub enum MomentDriver {
    /// `a = 0`, `s = I_p`; no singular set.
    Brownian { p: usize },
    /// `a(z) = (delta-1)/(2z)`, `s = 1`; singular at `z = 0`.
    Bessel { delta: f64 },
    /// For `z = (mean, second moment)`: `a = (0, 1 + (delta-1)/(2h))` with
    /// `h = z_2 - z_1^2`, `s = [[1,0],[2 z_1,1]]`; singular on `h = 0`.
    /// The variance `h` then follows a squared-Bessel-type SDE of index delta.
    MeanVariance { delta: f64 },
    /// `a' = gamma^2 a`, `s' = gamma s`; margin of the base driver.
    Scaled { base: Box<MomentDriver>, gamma: f64 },
}

impl MomentDriver {
    pub fn brownian(p: usize) -> Self {
        assert!(p >= 1, "driver dimension must be >= 1");
        Self::Brownian { p }
    }

    pub fn bessel(delta: f64) -> Self {
        assert!(delta > 0.0, "bessel index must be positive");
        Self::Bessel { delta }
    }

    pub fn mean_variance(delta: f64) -> Self {
        assert!(delta > 0.0, "driver index must be positive");
        Self::MeanVariance { delta }
    }

    /// Rescale the target to `(gamma^2 a, gamma s)`; the observable moment
    /// then tracks the gamma-scaled SDE exactly.
    pub fn scaled(self, gamma: f64) -> Self {
        Self::Scaled { base: Box::new(self), gamma }
    }

    pub fn dim_p(&self) -> usize {
        match self {
            Self::Brownian { p } => *p,
            Self::Bessel { .. } => 1,
            Self::MeanVariance { .. } => 2,
            Self::Scaled { base, .. } => base.dim_p(),
        }
    }

    /// Margin to the singular set: positive away from it, `+inf` if empty.
    pub fn singularity_margin(&self, z: &[f64]) -> f64 {
        debug_assert_eq!(z.len(), self.dim_p());
        match self {
            Self::Brownian { .. } => f64::INFINITY,
            Self::Bessel { .. } => z[0],
            Self::MeanVariance { .. } => z[1] - z[0] * z[0],
            Self::Scaled { base, .. } => base.singularity_margin(z),
        }
    }

    /// Drift `a(z)` into `out` (length p). Errors on or past the singular set.
    pub fn drift(&self, z: &[f64], out: &mut [f64]) -> Result<(), DriverError> {
        debug_assert_eq!(out.len(), self.dim_p());
        self.guard(z)?;
        match self {
            Self::Brownian { .. } => out.fill(0.0),
            Self::Bessel { delta } => out[0] = (delta - 1.0) / (2.0 * z[0]),
            Self::MeanVariance { delta } => {
                let h = z[1] - z[0] * z[0];
                out[0] = 0.0;
                out[1] = 1.0 + (delta - 1.0) / (2.0 * h);
            }
            Self::Scaled { base, gamma } => {
                base.drift(z, out)?;
                for v in out.iter_mut() {
                    *v *= gamma * gamma;
                }
            }
        }
        Ok(())
    }

    /// Diffusion `s(z)` into `out` (column-major `p x p`).
    pub fn diffusion(&self, z: &[f64], out: &mut [f64]) -> Result<(), DriverError> {
        let p = self.dim_p();
        debug_assert_eq!(out.len(), p * p);
        self.guard(z)?;
        match self {
            Self::Brownian { .. } => {
                out.fill(0.0);
                for j in 0..p {
                    out[j + p * j] = 1.0;
                }
            }
            Self::Bessel { .. } => out[0] = 1.0,
            Self::MeanVariance { .. } => {
                out[0] = 1.0;
                out[1] = 2.0 * z[0];
                out[2] = 0.0;
                out[3] = 1.0;
            }
            Self::Scaled { base, gamma } => {
                base.diffusion(z, out)?;
                for v in out.iter_mut() {
                    *v *= *gamma;
                }
            }
        }
        Ok(())
    }

    fn guard(&self, z: &[f64]) -> Result<(), DriverError> {
        let margin = self.singularity_margin(z);
        if margin <= 0.0 {
            return Err(DriverError::AtSingularity { margin, z: z.to_vec() });
        }
        Ok(())
    }
}
