//! Empirical measures over particle positions and the statistics the field
//! pipeline and diagnostics consume: f-moments, Gram matrices, polynomial
//! moments, and one-dimensional Wasserstein distances.
//!
//! All reductions run in fixed particle order with compensated summation, so
//! results never depend on thread count.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::observables::Observable;

/// Kahan-Babuska (Neumaier) compensated accumulator.
#[derive(Clone, Copy, Debug, Default)]
pub struct Kahan {
    sum: f64,
    c: f64,
}

impl Kahan {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline(always)]
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.c += (self.sum - t) + v;
        } else {
            self.c += (v - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline(always)]
    pub fn total(&self) -> f64 {
        self.sum + self.c
    }
}

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("an empirical measure needs at least one particle")]
    Empty,
    #[error("positions length {len} is not a multiple of dimension {d}")]
    RaggedPositions { len: usize, d: usize },
    #[error("positions contain a non-finite coordinate (particle {particle})")]
    NonFinite { particle: usize },
    #[error("dimension mismatch: measure has d={have}, operation needs d={need}")]
    DimensionMismatch { have: usize, need: usize },
    #[error("Wasserstein distances are implemented for d=1 only (got d={0})")]
    UnsupportedDimension(usize),
}

/// `N` particle positions with uniform weights `1/N`; immutable snapshot.
#[derive(Clone, Debug)]
pub struct EmpiricalMeasure {
    d: usize,
    positions: Vec<f64>,
}

impl EmpiricalMeasure {
    /// Positions are flat row-major: particle `i` occupies `[i*d, (i+1)*d)`.
    pub fn new(d: usize, positions: Vec<f64>) -> Result<Self, MeasureError> {
        if d == 0 || positions.is_empty() {
            return Err(MeasureError::Empty);
        }
        if positions.len() % d != 0 {
            return Err(MeasureError::RaggedPositions { len: positions.len(), d });
        }
        if let Some(bad) = positions.iter().position(|v| !v.is_finite()) {
            return Err(MeasureError::NonFinite { particle: bad / d });
        }
        Ok(Self { d, positions })
    }

    pub fn from_points_1d(points: Vec<f64>) -> Result<Self, MeasureError> {
        Self::new(1, points)
    }

    pub fn n(&self) -> usize {
        self.positions.len() / self.d
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    /// Recover the underlying flat position buffer (steppers reuse it).
    pub fn into_positions(self) -> Vec<f64> {
        self.positions
    }

    #[inline(always)]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.positions[i * self.d..(i + 1) * self.d]
    }

    /// `mu(f) = (1/N) sum_i f(x_i)`.
    pub fn f_moment(&self, obs: &Observable) -> DVector<f64> {
        assert_eq!(obs.dim_d(), self.d, "observable dimension mismatch");
        let p = obs.dim_p();
        let mut acc = vec![Kahan::new(); p];
        let mut buf = vec![0.0; p];
        for i in 0..self.n() {
            obs.eval(self.point(i), &mut buf);
            for (a, v) in acc.iter_mut().zip(&buf) {
                a.add(*v);
            }
        }
        let inv = 1.0 / self.n() as f64;
        DVector::from_iterator(p, acc.iter().map(|a| a.total() * inv))
    }

    /// Gram matrix `G = mu(grad_f^T grad_f)`, symmetric positive semidefinite.
    pub fn gram(&self, obs: &Observable) -> DMatrix<f64> {
        assert_eq!(obs.dim_d(), self.d, "observable dimension mismatch");
        let (d, p) = (self.d, obs.dim_p());
        // accumulate the lower triangle (j <= k) and mirror
        let mut acc = vec![Kahan::new(); p * (p + 1) / 2];
        let mut jac = vec![0.0; d * p];
        for i in 0..self.n() {
            obs.grad(self.point(i), &mut jac);
            let mut slot = 0;
            for k in 0..p {
                for j in k..p {
                    let mut dot = 0.0;
                    for l in 0..d {
                        dot += jac[l + d * j] * jac[l + d * k];
                    }
                    acc[slot].add(dot);
                    slot += 1;
                }
            }
        }
        let inv = 1.0 / self.n() as f64;
        let mut g = DMatrix::zeros(p, p);
        let mut slot = 0;
        for k in 0..p {
            for j in k..p {
                let v = acc[slot].total() * inv;
                g[(j, k)] = v;
                g[(k, j)] = v;
                slot += 1;
            }
        }
        g
    }

    /// `m_gamma(mu) = (1/N) sum_i |x_i|^gamma` (Euclidean norm), `gamma >= 1`.
    pub fn poly_moment(&self, gamma: f64) -> f64 {
        assert!(gamma >= 1.0, "poly_moment needs gamma >= 1");
        let mut acc = Kahan::new();
        if gamma == 2.0 {
            for i in 0..self.n() {
                let mut sq = 0.0;
                for v in self.point(i) {
                    sq += v * v;
                }
                acc.add(sq);
            }
        } else {
            for i in 0..self.n() {
                let mut sq = 0.0;
                for v in self.point(i) {
                    sq += v * v;
                }
                acc.add(sq.sqrt().powf(gamma));
            }
        }
        acc.total() / self.n() as f64
    }

    /// Coordinate-wise mean of the positions.
    pub fn mean_vector(&self) -> Vec<f64> {
        let mut acc = vec![Kahan::new(); self.d];
        for i in 0..self.n() {
            for (a, v) in acc.iter_mut().zip(self.point(i)) {
                a.add(*v);
            }
        }
        let inv = 1.0 / self.n() as f64;
        acc.iter().map(|a| a.total() * inv).collect()
    }

    /// One-pass fusion of [`f_moment`](Self::f_moment), [`gram`](Self::gram),
    /// [`mean_vector`](Self::mean_vector) and the moments `m_2`, `m_alpha`,
    /// writing into caller-owned buffers. The per-entry accumulation order is
    /// identical to the separate methods, so the results match them bit for
    /// bit; the single traversal is what the simulation loop wants.
    /// Returns `(m2, m_alpha)`.
    pub fn step_stats(
        &self,
        obs: &Observable,
        alpha: f64,
        z: &mut DVector<f64>,
        gram: &mut DMatrix<f64>,
        mean: &mut [f64],
    ) -> (f64, f64) {
        assert_eq!(obs.dim_d(), self.d, "observable dimension mismatch");
        let (d, p) = (self.d, obs.dim_p());
        assert_eq!(z.len(), p);
        assert_eq!((gram.nrows(), gram.ncols()), (p, p));
        assert_eq!(mean.len(), d);
        let mut z_acc = vec![Kahan::new(); p];
        let mut g_acc = vec![Kahan::new(); p * (p + 1) / 2];
        let mut mean_acc = vec![Kahan::new(); d];
        let mut m2_acc = Kahan::new();
        let mut ma_acc = Kahan::new();
        let mut fbuf = vec![0.0; p];
        let mut jac = vec![0.0; d * p];
        for i in 0..self.n() {
            let x = self.point(i);
            obs.eval(x, &mut fbuf);
            for (a, v) in z_acc.iter_mut().zip(&fbuf) {
                a.add(*v);
            }
            obs.grad(x, &mut jac);
            let mut slot = 0;
            for k in 0..p {
                for j in k..p {
                    let mut dot = 0.0;
                    for l in 0..d {
                        dot += jac[l + d * j] * jac[l + d * k];
                    }
                    g_acc[slot].add(dot);
                    slot += 1;
                }
            }
            let mut sq = 0.0;
            for (a, v) in mean_acc.iter_mut().zip(x) {
                a.add(*v);
                sq += v * v;
            }
            m2_acc.add(sq);
            if alpha != 2.0 {
                ma_acc.add(sq.sqrt().powf(alpha));
            }
        }
        let inv = 1.0 / self.n() as f64;
        for (k, a) in z_acc.iter().enumerate() {
            z[k] = a.total() * inv;
        }
        let mut slot = 0;
        for k in 0..p {
            for j in k..p {
                let v = g_acc[slot].total() * inv;
                gram[(j, k)] = v;
                gram[(k, j)] = v;
                slot += 1;
            }
        }
        for (m, a) in mean.iter_mut().zip(&mean_acc) {
            *m = a.total() * inv;
        }
        let nf = self.n() as f64;
        let m2 = m2_acc.total() / nf;
        let m_alpha = if alpha == 2.0 { m2 } else { ma_acc.total() / nf };
        (m2, m_alpha)
    }
}

/// Order-`p` Wasserstein distance between one-dimensional empirical measures.
///
/// Equal sample counts use the sorted-sample formula
/// `W_p = ((1/N) sum |x_(i) - y_(i)|^p)^(1/p)`; unequal counts integrate the
/// quantile-function difference exactly on the merged breakpoint grid.
pub fn wasserstein_1d(
    p: f64,
    a: &EmpiricalMeasure,
    b: &EmpiricalMeasure,
) -> Result<f64, MeasureError> {
    assert!(p >= 1.0, "Wasserstein order must be >= 1");
    if a.dim() != 1 {
        return Err(MeasureError::UnsupportedDimension(a.dim()));
    }
    if b.dim() != 1 {
        return Err(MeasureError::UnsupportedDimension(b.dim()));
    }
    let mut xs = a.positions().to_vec();
    let mut ys = b.positions().to_vec();
    xs.sort_by(|u, v| u.partial_cmp(v).expect("finite by construction"));
    ys.sort_by(|u, v| u.partial_cmp(v).expect("finite by construction"));
    let mut acc = Kahan::new();
    if xs.len() == ys.len() {
        for (x, y) in xs.iter().zip(&ys) {
            acc.add((x - y).abs().powf(p));
        }
        return Ok((acc.total() / xs.len() as f64).powf(1.0 / p));
    }
    // two-pointer sweep over the merged quantile breakpoints i/n and j/m
    let (n, m) = (xs.len() as f64, ys.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0;
    while i < xs.len() && j < ys.len() {
        let ni = (i + 1) as f64 / n;
        let nj = (j + 1) as f64 / m;
        let next = ni.min(nj);
        acc.add((next - u) * (xs[i] - ys[j]).abs().powf(p));
        u = next;
        if ni <= next {
            i += 1;
        }
        if nj <= next {
            j += 1;
        }
    }
    Ok(acc.total().powf(1.0 / p))
}
