//! The per-particle field: drift and diffusion derived from the empirical
//! measure so that the observable moment tracks the target SDE.
//!
//! With `z = mu(f)`, `G = mu(grad_f^T grad_f)` and a regularization
//! `eta >= 0`, the pipeline computes
//!
//! ```text
//! M = (eta I + G)^-1 s(z)                  sigma_mu(x) = grad_f(x) M
//! B = M M^T
//! c_k = mu( (grad_f B grad_f^T) : hess f_k )      (Ito correction)
//! NV = (eta I + G)^-1 [ a(z) - c/2 ]       b_mu(x) = grad_f(x) NV
//! ```
//!
//! At `eta = 0` the defining identity `mu(grad_f^T sigma_mu) = s(z)` holds
//! exactly and `pi(f)` follows `dZ = a(Z) dt + s(Z) dW0`; `eta > 0` keeps the
//! field defined everywhere at the cost of exact tracking. The closed forms
//! at the bottom evaluate the same fields without any matrix solve and serve
//! as independent oracles for the pipeline.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

use crate::drivers::MomentDriver;
use crate::measures::{EmpiricalMeasure, Kahan};
use crate::observables::Observable;

/// Default determinant guard for the unregularized pipeline. This is a
/// numerical-failure floor, not monitor policy; explosion thresholds live in
/// the simulator's policy type.
pub const DET_FLOOR_DEFAULT: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("Gram matrix is numerically singular (det {det:.6e} <= floor {floor:.6e}, eta = 0)")]
    SingularGram { det: f64, floor: f64 },
    #[error("target SDE evaluated at a singular point (margin {margin:.6e})")]
    DriverSingularity { margin: f64 },
}

/// Per-particle drift and diffusion, plus the shared statistics they came from.
#[derive(Clone, Debug)]
pub struct SmdField {
    n: usize,
    d: usize,
    p: usize,
    /// Drift `b_mu(x_i)`, flat `n x d` row-major.
    pub b: Vec<f64>,
    /// Diffusion `sigma_mu(x_i)`, one column-major `d x p` block per particle.
    pub sigma: Vec<f64>,
    /// det(G) of the raw Gram matrix (before regularization), for monitoring.
    pub det_gram: f64,
    /// Current observable moment `z = mu(f)`.
    pub z: Vec<f64>,
}

impl SmdField {
    /// Zero field of the given shape, for reuse across
    /// [`compute_field_given_into`] calls.
    pub fn zeroed(n: usize, d: usize, p: usize) -> Self {
        SmdField {
            n,
            d,
            p,
            b: vec![0.0; n * d],
            sigma: vec![0.0; n * d * p],
            det_gram: 0.0,
            z: vec![0.0; p],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim_d(&self) -> usize {
        self.d
    }

    pub fn dim_p(&self) -> usize {
        self.p
    }

    /// Drift of particle `i` (length d).
    #[inline(always)]
    pub fn b_of(&self, i: usize) -> &[f64] {
        &self.b[i * self.d..(i + 1) * self.d]
    }

    /// Diffusion block of particle `i` (column-major `d x p`).
    #[inline(always)]
    pub fn sigma_of(&self, i: usize) -> &[f64] {
        &self.sigma[i * self.d * self.p..(i + 1) * self.d * self.p]
    }
}

/// Compute the field for measure `pi`. At `eta = 0` requires `det G` above
/// `det_floor` and a positive singularity margin.
pub fn compute_field(
    pi: &EmpiricalMeasure,
    obs: &Observable,
    drv: &MomentDriver,
    eta: f64,
    det_floor: f64,
) -> Result<SmdField, FieldError> {
    let z = pi.f_moment(obs);
    let gram = pi.gram(obs);
    compute_field_given(pi, obs, drv, eta, det_floor, &z, &gram)
}

/// Same as [`compute_field`] with `z = mu(f)` and the Gram matrix already at
/// hand (the simulator computes them for monitoring before building a field).
pub fn compute_field_given(
    pi: &EmpiricalMeasure,
    obs: &Observable,
    drv: &MomentDriver,
    eta: f64,
    det_floor: f64,
    z: &DVector<f64>,
    gram: &DMatrix<f64>,
) -> Result<SmdField, FieldError> {
    let mut field = SmdField::zeroed(pi.n(), obs.dim_d(), obs.dim_p());
    compute_field_given_into(pi, obs, drv, eta, det_floor, z, gram, &mut field)?;
    Ok(field)
}

/// [`compute_field_given`] writing into a caller-owned field, so a long run
/// does not reallocate the per-particle buffers every step. On error the
/// field contents are unspecified.
#[allow(clippy::too_many_arguments)]
pub fn compute_field_given_into(
    pi: &EmpiricalMeasure,
    obs: &Observable,
    drv: &MomentDriver,
    eta: f64,
    det_floor: f64,
    z: &DVector<f64>,
    gram: &DMatrix<f64>,
    field: &mut SmdField,
) -> Result<(), FieldError> {
    assert!(eta >= 0.0, "regularization must be nonnegative");
    assert_eq!(obs.dim_p(), drv.dim_p(), "observable/driver dimension mismatch");
    let n = pi.n();
    let d = obs.dim_d();
    let p = obs.dim_p();
    if (field.n, field.d, field.p) != (n, d, p) {
        *field = SmdField::zeroed(n, d, p);
    }

    let margin = drv.singularity_margin(z.as_slice());
    if margin <= 0.0 {
        return Err(FieldError::DriverSingularity { margin });
    }
    let det_gram = gram.determinant();
    if eta == 0.0 && det_gram <= det_floor {
        return Err(FieldError::SingularGram { det: det_gram, floor: det_floor });
    }

    // factor (eta I + G) once; reused for both solves
    let mut reg = gram.clone();
    for j in 0..p {
        reg[(j, j)] += eta;
    }
    let chol = Cholesky::new(reg)
        .ok_or(FieldError::SingularGram { det: det_gram, floor: det_floor })?;

    let mut s = DMatrix::<f64>::zeros(p, p);
    drv.diffusion(z.as_slice(), s.as_mut_slice())
        .map_err(|_| FieldError::DriverSingularity { margin })?;
    let m_mat = chol.solve(&s);
    let b_mat = &m_mat * m_mat.transpose();

    // Ito correction c_k = mu( (grad_f B grad_f^T) : hess f_k ). The Jacobian
    // J_i is stashed in particle i's sigma slot (same d x p column-major
    // layout) so the assembly pass below does not recompute it.
    let mut c_acc = vec![Kahan::new(); p];
    let mut hbuf = vec![0.0; d * d];
    let mut tmp = vec![0.0; d * p];
    let mut quad = vec![0.0; d * d];
    for i in 0..n {
        let jac = &mut field.sigma[i * d * p..(i + 1) * d * p];
        obs.grad(pi.point(i), jac);
        // tmp = J B (d x p), quad = tmp J^T = J B J^T (d x d)
        for m in 0..p {
            for u in 0..d {
                let mut acc = 0.0;
                for j in 0..p {
                    acc += jac[u + d * j] * b_mat[(j, m)];
                }
                tmp[u + d * m] = acc;
            }
        }
        for v in 0..d {
            for u in 0..d {
                let mut acc = 0.0;
                for m in 0..p {
                    acc += tmp[u + d * m] * jac[v + d * m];
                }
                quad[u + d * v] = acc;
            }
        }
        for (k, acc) in c_acc.iter_mut().enumerate() {
            obs.hess(pi.point(i), k, &mut hbuf);
            let mut dot = 0.0;
            for (q, h) in quad.iter().zip(&hbuf) {
                dot += q * h;
            }
            acc.add(dot);
        }
    }

    let mut r = DVector::<f64>::zeros(p);
    drv.drift(z.as_slice(), r.as_mut_slice())
        .map_err(|_| FieldError::DriverSingularity { margin })?;
    let inv_n = 1.0 / n as f64;
    for k in 0..p {
        r[k] -= 0.5 * c_acc[k].total() * inv_n;
    }
    let nv = chol.solve(&r);

    // per-particle products b_i = J_i NV, then sigma_i = J_i M over the
    // stashed Jacobian
    for i in 0..n {
        let sig = &mut field.sigma[i * d * p..(i + 1) * d * p];
        let bi = &mut field.b[i * d..(i + 1) * d];
        for l in 0..d {
            let mut acc = 0.0;
            for m in 0..p {
                acc += sig[l + d * m] * nv[m];
            }
            bi[l] = acc;
        }
        for j in 0..p {
            for l in 0..d {
                let mut acc = 0.0;
                for m in 0..p {
                    acc += sig[l + d * m] * m_mat[(m, j)];
                }
                tmp[l + d * j] = acc;
            }
        }
        sig.copy_from_slice(&tmp);
    }

    field.det_gram = det_gram;
    field.z.clear();
    field.z.extend_from_slice(z.as_slice());
    Ok(())
}

fn moments_1d(pi: &EmpiricalMeasure) -> (f64, f64) {
    assert_eq!(pi.dim(), 1, "closed forms are one-dimensional");
    let (mut m1, mut m2) = (Kahan::new(), Kahan::new());
    for x in pi.positions() {
        m1.add(*x);
        m2.add(x * x);
    }
    let inv = 1.0 / pi.n() as f64;
    (m1.total() * inv, m2.total() * inv)
}

/// Closed form for `f(x) = x^2` with the Bessel-type target of index `delta`:
/// `sigma(x) = x / (2 m2)`, `b(x) = (delta - 3/2) x / (4 m2^2)`.
pub fn closed_form_bessel_x2(
    pi: &EmpiricalMeasure,
    delta: f64,
) -> Result<SmdField, FieldError> {
    let (_, m2) = moments_1d(pi);
    if m2 <= 0.0 {
        return Err(FieldError::SingularGram { det: 4.0 * m2, floor: 0.0 });
    }
    let n = pi.n();
    let sig_scale = 1.0 / (2.0 * m2);
    let b_scale = (delta - 1.5) / (4.0 * m2 * m2);
    let xs = pi.positions();
    Ok(SmdField {
        n,
        d: 1,
        p: 1,
        b: xs.iter().map(|x| b_scale * x).collect(),
        sigma: xs.iter().map(|x| sig_scale * x).collect(),
        det_gram: 4.0 * m2,
        z: vec![m2],
    })
}

/// Closed form for `f(x) = (x, x^2)` with the mean-and-variance target:
/// `b(x) = (delta - 3/2) (x - m) / (4 Var^2)`, `sigma(x) = (1, (x - m)/(2 Var))`.
///
/// The second sigma entry follows from the generic pipeline (and is what the
/// defining identity `mu(grad_f^T sigma) = s(z)` forces); a delta-dependent
/// factor sometimes quoted there is inconsistent with that identity and is
/// deliberately not used.
pub fn closed_form_mean_variance(
    pi: &EmpiricalMeasure,
    delta: f64,
) -> Result<SmdField, FieldError> {
    let (m, m2) = moments_1d(pi);
    let var = m2 - m * m;
    if var <= 0.0 {
        return Err(FieldError::SingularGram { det: 4.0 * var, floor: 0.0 });
    }
    let n = pi.n();
    let b_scale = (delta - 1.5) / (4.0 * var * var);
    let sig_scale = 1.0 / (2.0 * var);
    let xs = pi.positions();
    let mut sigma = Vec::with_capacity(2 * n);
    for x in xs {
        sigma.push(1.0);
        sigma.push(sig_scale * (x - m));
    }
    Ok(SmdField {
        n,
        d: 1,
        p: 2,
        b: xs.iter().map(|x| b_scale * (x - m)).collect(),
        sigma,
        det_gram: 4.0 * var,
        z: vec![m, m2],
    })
}

/// Closed form for `f(x) = x^2` against a plain Brownian target, regularized:
/// `sigma(x) = 2x / (eta + 4 m2)`, `b(x) = -8 x m2 / (eta + 4 m2)^3`.
pub fn closed_form_reg_x2(pi: &EmpiricalMeasure, eta: f64) -> Result<SmdField, FieldError> {
    let (_, m2) = moments_1d(pi);
    let denom = eta + 4.0 * m2;
    if denom <= 0.0 {
        return Err(FieldError::SingularGram { det: 4.0 * m2, floor: 0.0 });
    }
    let n = pi.n();
    let sig_scale = 2.0 / denom;
    let b_scale = -8.0 * m2 / (denom * denom * denom);
    let xs = pi.positions();
    Ok(SmdField {
        n,
        d: 1,
        p: 1,
        b: xs.iter().map(|x| b_scale * x).collect(),
        sigma: xs.iter().map(|x| sig_scale * x).collect(),
        det_gram: 4.0 * m2,
        z: vec![m2],
    })
}

/// Closed form for `f(x) = tanh x` against a plain Brownian target,
/// regularized: with `g = mu(1/cosh^4)` and `w = mu(tanh/cosh^6)`,
/// `sigma(x) = (1/cosh^2 x) / (eta + g)`, `b(x) = (1/cosh^2 x) w / (eta + g)^3`.
pub fn closed_form_reg_tanh(pi: &EmpiricalMeasure, eta: f64) -> Result<SmdField, FieldError> {
    assert_eq!(pi.dim(), 1, "closed forms are one-dimensional");
    let (mut zt, mut g, mut w) = (Kahan::new(), Kahan::new(), Kahan::new());
    for x in pi.positions() {
        let c2 = {
            let c = x.cosh();
            c * c
        };
        let sech2 = 1.0 / c2;
        zt.add(x.tanh());
        g.add(sech2 * sech2);
        w.add(x.tanh() * sech2 * sech2 * sech2);
    }
    let inv = 1.0 / pi.n() as f64;
    let (zt, g, w) = (zt.total() * inv, g.total() * inv, w.total() * inv);
    let denom = eta + g;
    if denom <= 0.0 {
        return Err(FieldError::SingularGram { det: g, floor: 0.0 });
    }
    let n = pi.n();
    let sig_scale = 1.0 / denom;
    let b_scale = w / (denom * denom * denom);
    let mut b = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    for x in pi.positions() {
        let c = x.cosh();
        let sech2 = 1.0 / (c * c);
        b.push(b_scale * sech2);
        sigma.push(sig_scale * sech2);
    }
    Ok(SmdField { n, d: 1, p: 1, b, sigma, det_gram: g, z: vec![zt] })
}

/// Lipschitz approximation of the indicator of `[0, r]`: 1 up to `r`, linear
/// down to 0 at `r + 1` (slope 1).
pub fn ramp_one_to_zero(r: f64, u: f64) -> f64 {
    if u <= r {
        1.0
    } else if u >= r + 1.0 {
        0.0
    } else {
        r + 1.0 - u
    }
}

/// Lipschitz approximation of the indicator of `[1/r, inf)`: 0 up to
/// `1/(r+1)`, linear up to 1 at `1/r` (slope `r (r + 1)`).
pub fn ramp_zero_to_one(r: f64, u: f64) -> f64 {
    if u <= 1.0 / (r + 1.0) {
        0.0
    } else if u >= 1.0 / r {
        1.0
    } else {
        r * (r + 1.0) * u - r
    }
}

/// Smooth cut-off `chi(x, pi) in [0, 1]`: 1 on the good region (position in a
/// ball of radius `k`, moment of order alpha below `m`, margin and Gram
/// determinant above `1/m`), 0 outside its enlargement, linear in between.
/// Multiplying the field by `chi` yields globally Lipschitz truncated
/// coefficients.
pub fn cutoff_chi(
    x: &[f64],
    pi: &EmpiricalMeasure,
    obs: &Observable,
    drv: &MomentDriver,
    k: f64,
    m: f64,
) -> f64 {
    assert!(k > 0.0 && m > 0.0, "cut-off levels must be positive");
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let z = pi.f_moment(obs);
    let det = pi.gram(obs).determinant();
    let margin = drv.singularity_margin(z.as_slice());
    let m_alpha = pi.poly_moment(obs.alpha());
    ramp_one_to_zero(k, norm)
        * ramp_one_to_zero(m, m_alpha)
        * ramp_zero_to_one(m, margin)
        * ramp_zero_to_one(m, det)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn gaussian_measure(rng: &mut CounterRng, n: usize, mean: f64, std: f64) -> EmpiricalMeasure {
        let pts: Vec<f64> = (0..n).map(|_| mean + std * rng.next_normal()).collect();
        EmpiricalMeasure::from_points_1d(pts).unwrap()
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-300))
            .fold(0.0, f64::max)
    }

    #[test]
    fn identity_observable_with_brownian_target_moves_rigidly() {
        let mut rng = CounterRng::from_seed(1);
        let pts: Vec<f64> = (0..40).map(|_| rng.next_normal()).collect();
        let pi = EmpiricalMeasure::new(2, pts).unwrap();
        let obs = Observable::identity(2);
        let drv = MomentDriver::brownian(2);
        let field = compute_field(&pi, &obs, &drv, 0.0, DET_FLOOR_DEFAULT).unwrap();
        for i in 0..pi.n() {
            assert_eq!(field.b_of(i), &[0.0, 0.0]);
            assert_eq!(field.sigma_of(i), &[1.0, 0.0, 0.0, 1.0]);
        }
        assert_eq!(field.det_gram, 1.0);
    }

    #[test]
    fn bessel_x2_pipeline_matches_unit_second_moment_form() {
        // with m2 = 1: sigma_i = x_i/2, b_i = (delta - 3/2) x_i / 4
        let pi = EmpiricalMeasure::from_points_1d(vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let obs = Observable::second_moment_1d();
        for delta in [1.0, 2.0, 3.0] {
            let drv = MomentDriver::bessel(delta);
            let field = compute_field(&pi, &obs, &drv, 0.0, DET_FLOOR_DEFAULT).unwrap();
            for (i, x) in pi.positions().iter().enumerate() {
                assert!((field.sigma_of(i)[0] - x / 2.0).abs() <= 1e-14);
                assert!((field.b_of(i)[0] - (delta - 1.5) * x / 4.0).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn regularized_x2_frozen_two_atom_case() {
        // eta = 1, m2 = 1: sigma_i = 2 x_i / 5, b_i = -8 x_i / 125
        let pi = EmpiricalMeasure::from_points_1d(vec![-1.0, 1.0]).unwrap();
        let obs = Observable::second_moment_1d();
        let drv = MomentDriver::brownian(1);
        let field = compute_field(&pi, &obs, &drv, 1.0, DET_FLOOR_DEFAULT).unwrap();
        for (i, x) in pi.positions().iter().enumerate() {
            assert!((field.sigma_of(i)[0] - 2.0 * x / 5.0).abs() <= 1e-15);
            assert!((field.b_of(i)[0] + 8.0 * x / 125.0).abs() <= 1e-15);
        }
        let oracle = closed_form_reg_x2(&pi, 1.0).unwrap();
        assert!(max_rel_err(&oracle.sigma, &field.sigma) <= 1e-14);
        assert!(max_rel_err(&oracle.b, &field.b) <= 1e-14);
    }

    #[test]
    fn closed_form_frozen_values() {
        // bessel x2: delta = 3, m2 = 2, x = 1 -> b = 0.09375, sigma = 0.25
        let pi = EmpiricalMeasure::from_points_1d(vec![1.0, 3.0f64.sqrt(), -1.0, -3.0f64.sqrt()])
            .unwrap();
        assert!((moments_1d(&pi).1 - 2.0).abs() <= 1e-15);
        let f = closed_form_bessel_x2(&pi, 3.0).unwrap();
        assert!((f.z[0] - 2.0).abs() <= 1e-15);
        assert!((f.b[0] - 0.09375).abs() <= 1e-15);
        assert!((f.sigma[0] - 0.25).abs() <= 1e-15);

        // mean-variance: pi = (delta_0 + delta_2)/2 -> m = 1, var = 1; at x = 0
        let pi = EmpiricalMeasure::from_points_1d(vec![0.0, 2.0]).unwrap();
        for delta in [2.0, 3.0] {
            let f = closed_form_mean_variance(&pi, delta).unwrap();
            assert!((f.b[0] - (delta - 1.5) / 4.0 * (-1.0)).abs() <= 1e-15);
            assert_eq!(f.sigma_of(0), &[1.0, -0.5]);
        }
    }

    #[test]
    fn pipeline_matches_closed_forms_on_random_gaussian_measures() {
        let mut rng = CounterRng::from_seed(90);
        let obs_x2 = Observable::second_moment_1d();
        let obs_mv = Observable::mean_and_second_1d();
        let obs_tanh = Observable::tanh_1d();
        for _ in 0..20 {
            let pi = gaussian_measure(&mut rng, 64, 0.3, 1.2);

            let f = compute_field(&pi, &obs_x2, &MomentDriver::bessel(3.0), 0.0, 1e-10).unwrap();
            let o = closed_form_bessel_x2(&pi, 3.0).unwrap();
            assert!(max_rel_err(&f.sigma, &o.sigma) <= 1e-10);
            assert!(max_rel_err(&f.b, &o.b) <= 1e-10);

            let f = compute_field(&pi, &obs_mv, &MomentDriver::mean_variance(3.0), 0.0, 1e-10)
                .unwrap();
            let o = closed_form_mean_variance(&pi, 3.0).unwrap();
            assert!(max_rel_err(&f.sigma, &o.sigma) <= 1e-10);
            assert!(max_rel_err(&f.b, &o.b) <= 1e-10);

            let f = compute_field(&pi, &obs_x2, &MomentDriver::brownian(1), 1.0, 1e-10).unwrap();
            let o = closed_form_reg_x2(&pi, 1.0).unwrap();
            assert!(max_rel_err(&f.sigma, &o.sigma) <= 1e-10);
            assert!(max_rel_err(&f.b, &o.b) <= 1e-10);

            let f = compute_field(&pi, &obs_tanh, &MomentDriver::brownian(1), 0.5, 1e-10).unwrap();
            let o = closed_form_reg_tanh(&pi, 0.5).unwrap();
            assert!(max_rel_err(&f.sigma, &o.sigma) <= 1e-10);
            assert!(max_rel_err(&f.b, &o.b) <= 1e-10);
        }
    }

    // the defining identity mu(grad_f^T sigma) = s(z), exact at eta = 0
    #[test]
    fn diffusion_identity_holds_at_zero_eta() {
        let mut rng = CounterRng::from_seed(44);
        let cases: Vec<(Observable, MomentDriver)> = vec![
            (Observable::second_moment_1d(), MomentDriver::bessel(3.0)),
            (Observable::mean_and_second_1d(), MomentDriver::mean_variance(3.0)),
            (Observable::second_moment_1d(), MomentDriver::brownian(1)),
            (Observable::tanh_1d(), MomentDriver::brownian(1)),
        ];
        for (obs, drv) in &cases {
            for _ in 0..10 {
                let pi = gaussian_measure(&mut rng, 64, 0.1, 1.0);
                let field = compute_field(&pi, obs, drv, 0.0, 1e-10).unwrap();
                let p = obs.dim_p();
                let d = obs.dim_d();
                // accumulate (1/N) sum grad_f(x_i)^T sigma_i
                let mut acc = DMatrix::<f64>::zeros(p, p);
                let mut jac = vec![0.0; d * p];
                for i in 0..pi.n() {
                    obs.grad(pi.point(i), &mut jac);
                    let j = DMatrix::from_column_slice(d, p, &jac);
                    let s = DMatrix::from_column_slice(d, p, field.sigma_of(i));
                    acc += j.transpose() * s;
                }
                acc /= pi.n() as f64;
                let mut s_z = DMatrix::<f64>::zeros(p, p);
                drv.diffusion(&field.z, s_z.as_mut_slice()).unwrap();
                for (a, b) in acc.iter().zip(s_z.iter()) {
                    assert!((a - b).abs() <= 1e-12, "identity violated: {a} vs {b}");
                }
            }
        }
    }

    // Monte-Carlo check that E[pi_new(f) - pi(f)] = a(z) dt for quadratic f
    #[test]
    fn one_step_moment_update_matches_target_drift() {
        let mut rng = CounterRng::from_seed(7777);
        let dt: f64 = 1e-3;
        let n_mc = 100_000;
        let cases: Vec<(Observable, MomentDriver)> = vec![
            (Observable::second_moment_1d(), MomentDriver::bessel(3.0)),
            (Observable::mean_and_second_1d(), MomentDriver::mean_variance(3.0)),
        ];
        for (obs, drv) in &cases {
            let pi = gaussian_measure(&mut rng, 32, 0.2, 1.0);
            let field = compute_field(&pi, obs, drv, 0.0, 1e-10).unwrap();
            let p = obs.dim_p();
            let z0 = pi.f_moment(obs);
            let mut a = vec![0.0; p];
            drv.drift(z0.as_slice(), &mut a).unwrap();

            let mut mean = vec![Kahan::new(); p];
            let mut sq = vec![0.0; p];
            let mut fbuf = vec![0.0; p];
            let mut zacc = vec![Kahan::new(); p];
            for _ in 0..n_mc {
                let dw: Vec<f64> = (0..p).map(|_| dt.sqrt() * rng.next_normal()).collect();
                for acc in zacc.iter_mut() {
                    *acc = Kahan::new();
                }
                for i in 0..pi.n() {
                    let x = pi.point(i)[0];
                    let bi = field.b_of(i)[0];
                    let si = field.sigma_of(i);
                    let mut shift = bi * dt;
                    for (j, w) in dw.iter().enumerate() {
                        shift += si[j] * w;
                    }
                    obs.eval(&[x + shift], &mut fbuf);
                    for (acc, v) in zacc.iter_mut().zip(&fbuf) {
                        acc.add(*v);
                    }
                }
                for k in 0..p {
                    let dz = zacc[k].total() / pi.n() as f64 - z0[k];
                    mean[k].add(dz);
                    sq[k] += dz * dz;
                }
            }
            for k in 0..p {
                let m = mean[k].total() / n_mc as f64;
                let var = sq[k] / n_mc as f64 - m * m;
                let se = (var / n_mc as f64).sqrt();
                let expected = a[k] * dt;
                assert!(
                    (m - expected).abs() <= 3.0 * se,
                    "component {k}: mean {m} vs {expected}, se {se}"
                );
            }
        }
    }

    #[test]
    fn field_converges_as_regularization_vanishes() {
        let mut rng = CounterRng::from_seed(3);
        let obs = Observable::second_moment_1d();
        let drv = MomentDriver::bessel(3.0);
        let pi = gaussian_measure(&mut rng, 64, 0.0, 1.0);
        let exact = compute_field(&pi, &obs, &drv, 0.0, 1e-10).unwrap();
        let mut last = f64::INFINITY;
        for eta in [1e-2, 1e-4, 1e-6] {
            let f = compute_field(&pi, &obs, &drv, eta, 1e-10).unwrap();
            let err = max_rel_err(&f.sigma, &exact.sigma).max(max_rel_err(&f.b, &exact.b));
            assert!(err < last, "error must decay with eta: {err} !< {last}");
            last = err;
        }
        assert!(last <= 1e-5);
    }

    #[test]
    fn singular_gram_is_reported() {
        let pi = EmpiricalMeasure::from_points_1d(vec![0.0, 0.0, 0.0]).unwrap();
        let obs = Observable::second_moment_1d();
        let drv = MomentDriver::brownian(1);
        assert!(matches!(
            compute_field(&pi, &obs, &drv, 0.0, 1e-10),
            Err(FieldError::SingularGram { .. })
        ));
        // regularization rescues the degenerate measure
        assert!(compute_field(&pi, &obs, &drv, 0.5, 1e-10).is_ok());
    }

    #[test]
    fn driver_singularity_is_reported() {
        // tanh moment negative, Gram fine: the Bessel-type target is singular
        let pi = EmpiricalMeasure::from_points_1d(vec![-1.0, -1.0, -0.5]).unwrap();
        let obs = Observable::tanh_1d();
        let drv = MomentDriver::bessel(2.0);
        assert!(matches!(
            compute_field(&pi, &obs, &drv, 0.0, 1e-10),
            Err(FieldError::DriverSingularity { .. })
        ));
    }

    #[test]
    fn cutoff_ramp_frozen_values() {
        assert_eq!(ramp_one_to_zero(2.0, 2.5), 0.5);
        assert_eq!(ramp_one_to_zero(2.0, 1.0), 1.0);
        assert_eq!(ramp_one_to_zero(2.0, 3.5), 0.0);
        assert_eq!(ramp_zero_to_one(4.0, 0.25), 1.0);
        assert_eq!(ramp_zero_to_one(4.0, 0.1), 0.0);
        let mid = 0.5 * (1.0 / 5.0 + 1.0 / 4.0);
        assert!((ramp_zero_to_one(4.0, mid) - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn cutoff_ramps_have_the_stated_lipschitz_slopes() {
        let r = 3.0;
        let du = 1e-6;
        // interior slope of the decreasing ramp is exactly -1
        let u = r + 0.5;
        let slope = (ramp_one_to_zero(r, u + du) - ramp_one_to_zero(r, u)) / du;
        assert!((slope + 1.0).abs() <= 1e-6);
        // interior slope of the increasing ramp is r (r + 1)
        let u = 0.5 * (1.0 / (r + 1.0) + 1.0 / r);
        let slope = (ramp_zero_to_one(r, u + du) - ramp_zero_to_one(r, u)) / du;
        assert!((slope - r * (r + 1.0)).abs() <= 1e-4);
    }

    #[test]
    fn cutoff_chi_is_one_inside_and_zero_outside() {
        let mut rng = CounterRng::from_seed(8);
        let pi = gaussian_measure(&mut rng, 128, 0.0, 1.0);
        let obs = Observable::second_moment_1d();
        let drv = MomentDriver::bessel(3.0);
        // deep inside the good region
        let chi = cutoff_chi(&[0.5], &pi, &obs, &drv, 10.0, 100.0);
        assert_eq!(chi, 1.0);
        // position far outside the ball
        let chi = cutoff_chi(&[12.0], &pi, &obs, &drv, 10.0, 100.0);
        assert_eq!(chi, 0.0);
        // margin below 1/(m+1) forces zero: second moment tiny
        let tiny = EmpiricalMeasure::from_points_1d(vec![1e-6, -1e-6]).unwrap();
        let chi = cutoff_chi(&[0.0], &tiny, &obs, &drv, 10.0, 100.0);
        assert_eq!(chi, 0.0);
    }
}
