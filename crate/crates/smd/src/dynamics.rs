//! Baseline interacting-particle dynamics: the part of the motion that is
//! there before any moment steering, namely a granular-media drift
//! `-grad_U(x) - (mu * grad_W)(x)` plus a constant isotropic diffusion.

use std::fmt;
use std::sync::Arc;

use crate::measures::{EmpiricalMeasure, Kahan};

/// A gradient field selectable by name (so the quadratic-interaction shortcut
/// can be applied automatically) or supplied as a closure.
#[derive(Clone)]
pub enum GradField {
    /// Identically zero.
    Zero,
    /// `x`, the gradient of the quadratic potential `|x|^2 / 2`.
    Linear,
    /// `x^3 - x`, the gradient of the double well `x^4/4 - x^2/2` (d = 1).
    DoubleWell,
    /// Arbitrary gradient, written into `out` (same length as `x`).
    Custom(Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>),
}

impl fmt::Debug for GradField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradField::Zero => f.write_str("Zero"),
            GradField::Linear => f.write_str("Linear"),
            GradField::DoubleWell => f.write_str("DoubleWell"),
            GradField::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

impl GradField {
    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), out.len());
        match self {
            GradField::Zero => out.fill(0.0),
            GradField::Linear => out.copy_from_slice(x),
            GradField::DoubleWell => {
                assert_eq!(x.len(), 1, "the double well is one-dimensional");
                out[0] = x[0] * x[0] * x[0] - x[0];
            }
            GradField::Custom(f) => f(x, out),
        }
    }

    fn is_zero(&self) -> bool {
        matches!(self, GradField::Zero)
    }
}

/// The confining/interaction drift `-grad_U(x) - (1/N) sum_j grad_W(x - x_j)`
/// with constant diffusion `sigma_tilde`. Evaluation is read-only, so it can
/// run for many particles in parallel against one measure snapshot.
#[derive(Clone, Debug)]
pub struct BaselineDynamics {
    grad_u: GradField,
    grad_w: GradField,
    sigma_tilde: f64,
}

/// The standard double-well pair: confinement `x^4/4 - x^2/2` and attracting
/// quadratic interaction `x^2/2`, as gradients.
pub fn builtin_double_well() -> (GradField, GradField) {
    (GradField::DoubleWell, GradField::Linear)
}

impl BaselineDynamics {
    pub fn granular_media(grad_u: GradField, grad_w: GradField, sigma_tilde: f64) -> Self {
        assert!(
            sigma_tilde >= 0.0 && sigma_tilde.is_finite(),
            "baseline diffusion must be a finite nonnegative scalar"
        );
        BaselineDynamics { grad_u, grad_w, sigma_tilde }
    }

    /// No baseline motion at all.
    pub fn zero() -> Self {
        Self::granular_media(GradField::Zero, GradField::Zero, 0.0)
    }

    pub fn sigma_tilde(&self) -> f64 {
        self.sigma_tilde
    }

    /// True when both the drift and the diffusion vanish, letting a stepper
    /// skip the baseline pass entirely.
    pub fn is_zero(&self) -> bool {
        self.grad_u.is_zero() && self.grad_w.is_zero() && self.sigma_tilde == 0.0
    }

    /// Drift at a single point. For the quadratic interaction this costs one
    /// pass over the measure; prefer [`BaselineDynamics::drift_all`] when
    /// every particle needs it.
    pub fn drift(&self, x: &[f64], pi: &EmpiricalMeasure, out: &mut [f64]) {
        let d = x.len();
        assert_eq!(d, pi.dim());
        assert_eq!(d, out.len());
        let mut buf = vec![0.0; d];
        self.grad_u.eval(x, &mut buf);
        for (o, g) in out.iter_mut().zip(&buf) {
            *o = -g;
        }
        match &self.grad_w {
            GradField::Zero => {}
            GradField::Linear => {
                // (1/N) sum_j (x - x_j) = x - mean
                let mean = pi.mean_vector();
                for l in 0..d {
                    out[l] -= x[l] - mean[l];
                }
            }
            gw => {
                let mut diff = vec![0.0; d];
                let mut acc = vec![Kahan::new(); d];
                for j in 0..pi.n() {
                    let xj = pi.point(j);
                    for l in 0..d {
                        diff[l] = x[l] - xj[l];
                    }
                    gw.eval(&diff, &mut buf);
                    for (a, g) in acc.iter_mut().zip(&buf) {
                        a.add(*g);
                    }
                }
                let inv_n = 1.0 / pi.n() as f64;
                for (o, a) in out.iter_mut().zip(&acc) {
                    *o -= a.total() * inv_n;
                }
            }
        }
    }

    /// Drift at every particle of `pi`, written to `out` (flat `N x d`,
    /// row-major). The quadratic interaction runs in O(N); a custom kernel
    /// costs O(N^2) pairwise evaluations.
    pub fn drift_all(&self, pi: &EmpiricalMeasure, out: &mut [f64]) {
        let d = pi.dim();
        let n = pi.n();
        assert_eq!(out.len(), n * d);
        match &self.grad_w {
            GradField::Linear => {
                let mean = pi.mean_vector();
                let mut buf = vec![0.0; d];
                for i in 0..n {
                    let x = pi.point(i);
                    self.grad_u.eval(x, &mut buf);
                    let o = &mut out[i * d..(i + 1) * d];
                    for l in 0..d {
                        o[l] = -buf[l] - (x[l] - mean[l]);
                    }
                }
            }
            _ => {
                for i in 0..n {
                    self.drift(pi.point(i), pi, &mut out[i * d..(i + 1) * d]);
                }
            }
        }
    }
}

/// Empirical confinement check: the ratios `<drift(x), x> / |x|^q` over a
/// radial grid, plus how often the bound `<drift(x), x> <= -c |x|^q + c_off`
/// fails there.
#[derive(Clone, Debug)]
pub struct CoercivityReport {
    pub sup_ratio: f64,
    pub inf_ratio: f64,
    /// Grid points where `<drift, x> > -c |x|^q + c_off`.
    pub violations: usize,
    pub n_points: usize,
}

impl CoercivityReport {
    pub fn bound_holds(&self) -> bool {
        self.violations == 0
    }
}

/// Probe `dyn` along `+/- r e_l` for each radius `r` and axis `l`. With
/// `sample_measure = None` the interaction term is dropped (pure drift).
pub fn coercivity_probe(
    dynamics: &BaselineDynamics,
    d: usize,
    radius_grid: &[f64],
    sample_measure: Option<&EmpiricalMeasure>,
    q: f64,
    c: f64,
    c_off: f64,
) -> CoercivityReport {
    assert!(d >= 1);
    assert!(q > 0.0 && c >= 0.0);
    if let Some(pi) = sample_measure {
        assert_eq!(pi.dim(), d);
    }
    let pure = BaselineDynamics {
        grad_u: dynamics.grad_u.clone(),
        grad_w: GradField::Zero,
        sigma_tilde: dynamics.sigma_tilde,
    };
    let mut x = vec![0.0; d];
    let mut b = vec![0.0; d];
    let mut sup = f64::NEG_INFINITY;
    let mut inf = f64::INFINITY;
    let mut violations = 0;
    let mut n_points = 0;
    let trivial = EmpiricalMeasure::new(d, vec![0.0; d]).unwrap();
    for &r in radius_grid {
        assert!(r > 0.0, "radii must be positive");
        for l in 0..d {
            for sign in [1.0, -1.0] {
                x.fill(0.0);
                x[l] = sign * r;
                match sample_measure {
                    Some(pi) => dynamics.drift(&x, pi, &mut b),
                    None => pure.drift(&x, &trivial, &mut b),
                }
                let inner: f64 = b.iter().zip(&x).map(|(bi, xi)| bi * xi).sum();
                let ratio = inner / r.powf(q);
                sup = sup.max(ratio);
                inf = inf.min(ratio);
                if inner > -c * r.powf(q) + c_off {
                    violations += 1;
                }
                n_points += 1;
            }
        }
    }
    CoercivityReport { sup_ratio: sup, inf_ratio: inf, violations, n_points }
}
