//! The observable family `f = (f_1, …, f_p): R^d -> R^p`, its Jacobian and
//! per-component Hessians, and the growth classification that fixes the moment
//! order `alpha` used by explosion monitoring.
//!
//! Layouts are column-major: the Jacobian buffer holds `grad f` as a `d x p`
//! matrix whose column `j` is `grad f_j`; a Hessian buffer holds the `d x d`
//! matrix of `f_k`.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::rng::CounterRng;

/// Growth class of the family, deciding `alpha` and the Jacobian growth rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Growth {
    /// `|f| <= C(1+|x|^2)`, globally Lipschitz gradient, bounded Hessians.
    Quadratic,
    /// `f`, its gradient and Hessians all bounded.
    Bounded,
    /// `|f| <= C(1+|x|^a1)`, gradient growth `a2`, Hessian growth `a3`.
    Polynomial { a1: f64, a2: f64, a3: f64 },
}

/// Writes `f(x)` (or a Jacobian) into a caller-provided buffer.
pub type VecFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// Writes the Hessian of component `k` into a caller-provided `d x d` buffer.
pub type HessFn = Arc<dyn Fn(&[f64], usize, &mut [f64]) + Send + Sync>;

#[derive(Debug, Error)]
pub enum ObservableError {
    #[error("unknown builtin observable `{0}`")]
    UnknownBuiltin(String),
    #[error("dimensions must be positive (d={d}, p={p})")]
    BadDims { d: usize, p: usize },
    #[error(
        "declared {what} disagrees with finite differences at x={point:?}, \
         component {component}: analytic {analytic}, numeric {numeric}"
    )]
    DerivativeMismatch { what: &'static str, point: Vec<f64>, component: usize, analytic: f64, numeric: f64 },
}

#[derive(Clone)]
enum Kind {
    /// `f(x) = x`, `p = d`.
    Identity { d: usize },
    /// `f(x) = x^2` in one dimension.
    SecondMoment1d,
    /// `f(x) = (x, x^2)` in one dimension.
    MeanAndSecond1d,
    /// `f(x) = tanh x` in one dimension.
    Tanh1d,
    Custom { d: usize, p: usize, growth: Growth, f: VecFn, grad: VecFn, hess: HessFn },
}

/// An immutable observable family; cheap to clone and share across threads.
#[derive(Clone)]
pub struct Observable {
    kind: Kind,
}

impl fmt::Debug for Observable {
    fn fmt(&self, fm: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match &self.kind {
            Kind::Identity { d } => return write!(fm, "Observable::identity({d})"),
            Kind::SecondMoment1d => "second_moment_1d",
            Kind::MeanAndSecond1d => "mean_and_second_1d",
            Kind::Tanh1d => "tanh_1d",
            Kind::Custom { d, p, .. } => return write!(fm, "Observable::custom(d={d}, p={p})"),
        };
        write!(fm, "Observable::{name}")
    }
}

impl Observable {
    /// `f(x) = x` in `R^d` (so `p = d`); the Gram matrix is the identity.
    pub fn identity(d: usize) -> Self {
        assert!(d >= 1, "identity observable needs d >= 1");
        Self { kind: Kind::Identity { d } }
    }

    /// `f(x) = x^2`, one dimension.
    pub fn second_moment_1d() -> Self {
        Self { kind: Kind::SecondMoment1d }
    }

    /// `f(x) = (x, x^2)`, one dimension: tracks mean and second moment jointly.
    pub fn mean_and_second_1d() -> Self {
        Self { kind: Kind::MeanAndSecond1d }
    }

    /// `f(x) = tanh x`, one dimension; bounded with bounded derivatives.
    pub fn tanh_1d() -> Self {
        Self { kind: Kind::Tanh1d }
    }

    /// Look up a builtin by the names accepted in config files.
    pub fn builtin(name: &str) -> Result<Self, ObservableError> {
        match name {
            "identity" | "identity_d" => Ok(Self::identity(1)),
            "second_moment_1d" => Ok(Self::second_moment_1d()),
            "mean_and_second_1d" => Ok(Self::mean_and_second_1d()),
            "tanh_1d" => Ok(Self::tanh_1d()),
            other => Err(ObservableError::UnknownBuiltin(other.to_string())),
        }
    }

    /// Register a user-supplied family. The declared derivatives are checked
    /// against centered finite differences at 100 deterministic pseudo-random
    /// points; the declared growth class is trusted (there is no decidable
    /// test for the growth constants).
    pub fn custom(
        d: usize,
        p: usize,
        growth: Growth,
        f: VecFn,
        grad: VecFn,
        hess: HessFn,
    ) -> Result<Self, ObservableError> {
        if d == 0 || p == 0 {
            return Err(ObservableError::BadDims { d, p });
        }
        let obs = Self { kind: Kind::Custom { d, p, growth, f, grad, hess } };
        obs.validate_derivatives(100)?;
        Ok(obs)
    }

    pub fn dim_d(&self) -> usize {
        match &self.kind {
            Kind::Identity { d } => *d,
            Kind::SecondMoment1d | Kind::MeanAndSecond1d | Kind::Tanh1d => 1,
            Kind::Custom { d, .. } => *d,
        }
    }

    pub fn dim_p(&self) -> usize {
        match &self.kind {
            Kind::Identity { d } => *d,
            Kind::SecondMoment1d | Kind::Tanh1d => 1,
            Kind::MeanAndSecond1d => 2,
            Kind::Custom { p, .. } => *p,
        }
    }

    pub fn growth(&self) -> Growth {
        match &self.kind {
            Kind::Identity { .. } | Kind::SecondMoment1d | Kind::MeanAndSecond1d => Growth::Quadratic,
            Kind::Tanh1d => Growth::Bounded,
            Kind::Custom { growth, .. } => *growth,
        }
    }

    /// Moment order monitored for explosion: 2 for the quadratic and bounded
    /// classes, `max(a1 + 1, 2 a2 + a3 + 3)` for the polynomial class.
    pub fn alpha(&self) -> f64 {
        match self.growth() {
            Growth::Quadratic | Growth::Bounded => 2.0,
            Growth::Polynomial { a1, a2, a3 } => (a1 + 1.0).max(2.0 * a2 + a3 + 3.0),
        }
    }

    /// Growth rate `beta` of the Jacobian: 1, 0, or `a2 + 1` by class.
    pub fn grad_growth_beta(&self) -> f64 {
        match self.growth() {
            Growth::Quadratic => 1.0,
            Growth::Bounded => 0.0,
            Growth::Polynomial { a2, .. } => a2 + 1.0,
        }
    }

    /// Evaluate `f(x)` into `out` (length `p`).
    #[inline(always)]
    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim_d());
        debug_assert_eq!(out.len(), self.dim_p());
        match &self.kind {
            Kind::Identity { .. } => out.copy_from_slice(x),
            Kind::SecondMoment1d => out[0] = x[0] * x[0],
            Kind::MeanAndSecond1d => {
                out[0] = x[0];
                out[1] = x[0] * x[0];
            }
            Kind::Tanh1d => out[0] = x[0].tanh(),
            Kind::Custom { f, .. } => f(x, out),
        }
    }

    /// Evaluate the Jacobian into `out` (column-major `d x p`).
    #[inline(always)]
    pub fn grad(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim_d());
        debug_assert_eq!(out.len(), self.dim_d() * self.dim_p());
        match &self.kind {
            Kind::Identity { d } => {
                out.fill(0.0);
                for j in 0..*d {
                    out[j + d * j] = 1.0;
                }
            }
            Kind::SecondMoment1d => out[0] = 2.0 * x[0],
            Kind::MeanAndSecond1d => {
                out[0] = 1.0;
                out[1] = 2.0 * x[0];
            }
            Kind::Tanh1d => {
                let c = x[0].cosh();
                out[0] = 1.0 / (c * c);
            }
            Kind::Custom { grad, .. } => grad(x, out),
        }
    }

    /// Evaluate the Hessian of component `k` into `out` (column-major `d x d`).
    #[inline(always)]
    pub fn hess(&self, x: &[f64], k: usize, out: &mut [f64]) {
        debug_assert!(k < self.dim_p());
        debug_assert_eq!(out.len(), self.dim_d() * self.dim_d());
        match &self.kind {
            Kind::Identity { .. } => out.fill(0.0),
            Kind::SecondMoment1d => out[0] = 2.0,
            Kind::MeanAndSecond1d => out[0] = if k == 0 { 0.0 } else { 2.0 },
            Kind::Tanh1d => {
                let t = x[0].tanh();
                out[0] = -2.0 * t * (1.0 - t * t);
            }
            Kind::Custom { hess, .. } => hess(x, k, out),
        }
    }

    /// Check the declared derivatives against centered finite differences at
    /// `n_points` deterministic pseudo-random points. Jacobian entries must
    /// agree to 1e-6 relative error, Hessian entries to 1e-5.
    pub fn validate_derivatives(&self, n_points: usize) -> Result<(), ObservableError> {
        let d = self.dim_d();
        let mut draws = CounterRng::from_seed(0x0b5e);
        let mut x = vec![0.0; d];
        for _ in 0..n_points {
            for xl in x.iter_mut() {
                *xl = 1.5 * draws.next_normal();
            }
            self.check_grad_at(&x)?;
            self.check_hess_at(&x)?;
        }
        Ok(())
    }

    fn check_grad_at(&self, x: &[f64]) -> Result<(), ObservableError> {
        let d = self.dim_d();
        let p = self.dim_p();
        let mut analytic = vec![0.0; d * p];
        self.grad(x, &mut analytic);
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; p];
        let mut fm = vec![0.0; p];
        for l in 0..d {
            let h = fd_step(x[l]);
            xp[l] = x[l] + h;
            self.eval(&xp, &mut fp);
            xp[l] = x[l] - h;
            self.eval(&xp, &mut fm);
            xp[l] = x[l];
            for j in 0..p {
                let numeric = (fp[j] - fm[j]) / (2.0 * h);
                let a = analytic[l + d * j];
                if !close(a, numeric, 1e-6) {
                    return Err(ObservableError::DerivativeMismatch {
                        what: "Jacobian",
                        point: x.to_vec(),
                        component: j,
                        analytic: a,
                        numeric,
                    });
                }
            }
        }
        Ok(())
    }

    fn check_hess_at(&self, x: &[f64]) -> Result<(), ObservableError> {
        let d = self.dim_d();
        let p = self.dim_p();
        let mut xp = x.to_vec();
        let mut gp = vec![0.0; d * p];
        let mut gm = vec![0.0; d * p];
        let mut analytic = vec![0.0; d * d];
        for k in 0..p {
            self.hess(x, k, &mut analytic);
            for u in 0..d {
                let h = fd_step(x[u]);
                xp[u] = x[u] + h;
                self.grad(&xp, &mut gp);
                xp[u] = x[u] - h;
                self.grad(&xp, &mut gm);
                xp[u] = x[u];
                for l in 0..d {
                    // row u of hess f_k is the u-derivative of grad column k
                    let numeric = (gp[l + d * k] - gm[l + d * k]) / (2.0 * h);
                    let a = analytic[l + d * u];
                    if !close(a, numeric, 1e-5) {
                        return Err(ObservableError::DerivativeMismatch {
                            what: "Hessian",
                            point: x.to_vec(),
                            component: k,
                            analytic: a,
                            numeric,
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Centered-stencil step: cbrt(machine epsilon) scaled to the coordinate.
fn fd_step(xl: f64) -> f64 {
    f64::EPSILON.cbrt() * xl.abs().max(1.0)
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}
