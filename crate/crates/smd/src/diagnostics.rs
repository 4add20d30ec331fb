//! Post-hoc analysis: generator checks for non-explosion certificates,
//! reference-minimizer estimation, transition counting, and Wasserstein
//! tracking of a trajectory against reference measures.

use std::sync::Arc;

use thiserror::Error;

use crate::drivers::MomentDriver;
use crate::dynamics::BaselineDynamics;
use crate::measures::{self, EmpiricalMeasure};
use crate::observables::Observable;
use crate::simulator::{
    run, ExplosionPolicy, InitialCondition, SimConfig, SimError, Trajectory,
};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("{what} disagrees with finite differences at z = {z:?} (relative error {err:.3e})")]
    DerivativeMismatch { what: &'static str, z: Vec<f64>, err: f64 },
    #[error("generator evaluated at a singular point (margin {margin:.6e})")]
    SingularPoint { margin: f64 },
    #[error("trajectory holds no snapshots; rerun with snapshot_stride > 0")]
    NoSnapshots,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Measure(#[from] measures::MeasureError),
}

type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type VecOutFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// A candidate Lyapunov function `V >= 0` on the moment space, with its
/// gradient and Hessian. If the generator of the target SDE satisfies
/// `G V <= C V` everywhere, the moment SDE cannot explode; [`generator_value`]
/// and [`lyapunov_report`] probe that inequality numerically.
#[derive(Clone)]
pub struct LyapunovSpec {
    p: usize,
    q: f64,
    v: ScalarFn,
    grad_v: VecOutFn,
    /// Column-major `p x p` Hessian.
    hess_v: VecOutFn,
}

/// Midpoint of the admissible exponent range for the built-in candidates:
/// they need `0 < q < delta - 2`, so this returns `(delta - 2) / 2` for
/// `delta > 2` and `None` otherwise.
pub fn default_q(delta: f64) -> Option<f64> {
    if delta > 2.0 {
        Some((delta - 2.0) / 2.0)
    } else {
        None
    }
}

impl LyapunovSpec {
    /// `V(z) = z + z^-q` on `z > 0`, the standard candidate for the
    /// one-dimensional Bessel-type target.
    pub fn bessel(q: f64) -> Self {
        assert!(q > 0.0, "exponent must be positive");
        let spec = LyapunovSpec {
            p: 1,
            q,
            v: Arc::new(move |z: &[f64]| z[0] + z[0].powf(-q)),
            grad_v: Arc::new(move |z: &[f64], out: &mut [f64]| {
                out[0] = 1.0 - q * z[0].powf(-q - 1.0);
            }),
            hess_v: Arc::new(move |z: &[f64], out: &mut [f64]| {
                out[0] = q * (q + 1.0) * z[0].powf(-q - 2.0);
            }),
        };
        let grid: Vec<Vec<f64>> = [0.05, 0.3, 1.0, 4.0, 50.0].iter().map(|z| vec![*z]).collect();
        spec.validate_at(&grid).expect("built-in derivatives are consistent");
        spec
    }

    /// `V(z) = 1 + z_2 + h^-q` with `h = z_2 - z_1^2`, the candidate for the
    /// mean-and-second-moment target (defined where `h > 0`).
    pub fn mean_variance(q: f64) -> Self {
        assert!(q > 0.0, "exponent must be positive");
        let spec = LyapunovSpec {
            p: 2,
            q,
            v: Arc::new(move |z: &[f64]| {
                let h = z[1] - z[0] * z[0];
                1.0 + z[1] + h.powf(-q)
            }),
            grad_v: Arc::new(move |z: &[f64], out: &mut [f64]| {
                let h = z[1] - z[0] * z[0];
                let e1 = h.powf(-q - 1.0);
                out[0] = 2.0 * q * z[0] * e1;
                out[1] = 1.0 - q * e1;
            }),
            hess_v: Arc::new(move |z: &[f64], out: &mut [f64]| {
                let h = z[1] - z[0] * z[0];
                let e1 = h.powf(-q - 1.0);
                let e2 = h.powf(-q - 2.0);
                let d11 = 2.0 * q * e1 + 4.0 * q * (q + 1.0) * z[0] * z[0] * e2;
                let d12 = -2.0 * q * (q + 1.0) * z[0] * e2;
                let d22 = q * (q + 1.0) * e2;
                out[0] = d11;
                out[1] = d12;
                out[2] = d12;
                out[3] = d22;
            }),
        };
        let grid: Vec<Vec<f64>> = [
            (0.0, 0.5),
            (0.4, 1.0),
            (-1.2, 2.0),
            (2.0, 9.0),
            (0.1, 0.05),
        ]
        .iter()
        .map(|(z1, h)| vec![*z1, z1 * z1 + h])
        .collect();
        spec.validate_at(&grid).expect("built-in derivatives are consistent");
        spec
    }

    /// User-supplied candidate; derivative consistency is checked by finite
    /// differences at the given sample points before the candidate is accepted.
    pub fn custom(
        p: usize,
        q: f64,
        v: ScalarFn,
        grad_v: VecOutFn,
        hess_v: VecOutFn,
        check_points: &[Vec<f64>],
    ) -> Result<Self, DiagnosticsError> {
        assert!(p >= 1 && q > 0.0);
        let spec = LyapunovSpec { p, q, v, grad_v, hess_v };
        spec.validate_at(check_points)?;
        Ok(spec)
    }

    pub fn dim_p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        assert_eq!(z.len(), self.p);
        (self.v)(z)
    }

    fn validate_at(&self, points: &[Vec<f64>]) -> Result<(), DiagnosticsError> {
        let p = self.p;
        let mut grad = vec![0.0; p];
        let mut hess = vec![0.0; p * p];
        let mut gp = vec![0.0; p];
        let mut gm = vec![0.0; p];
        for z in points {
            assert_eq!(z.len(), p, "check point has wrong dimension");
            let mut zp = z.clone();
            let mut zm = z.clone();
            (self.grad_v)(z, &mut grad);
            (self.hess_v)(z, &mut hess);
            for k in 0..p {
                let step = 1e-6 * z[k].abs().max(1.0);
                zp[k] = z[k] + step;
                zm[k] = z[k] - step;
                let fd = ((self.v)(&zp) - (self.v)(&zm)) / (2.0 * step);
                let scale = grad[k].abs().max(fd.abs()).max(1.0);
                let err = (fd - grad[k]).abs() / scale;
                if err > 1e-6 {
                    return Err(DiagnosticsError::DerivativeMismatch {
                        what: "grad_V",
                        z: z.clone(),
                        err,
                    });
                }
                // second derivatives from the gradient, one column at a time
                (self.grad_v)(&zp, &mut gp);
                (self.grad_v)(&zm, &mut gm);
                for l in 0..p {
                    let fd2 = (gp[l] - gm[l]) / (2.0 * step);
                    let h = hess[l + p * k];
                    let scale = h.abs().max(fd2.abs()).max(1.0);
                    let err = (fd2 - h).abs() / scale;
                    if err > 1e-5 {
                        return Err(DiagnosticsError::DerivativeMismatch {
                            what: "hess_V",
                            z: z.clone(),
                            err,
                        });
                    }
                }
                zp[k] = z[k];
                zm[k] = z[k];
            }
        }
        Ok(())
    }
}

/// The target-SDE generator applied to `V` at `z`:
/// `a(z) . grad_V(z) + (1/2) (s s^T)(z) : hess_V(z)`.
pub fn generator_value(
    spec: &LyapunovSpec,
    drv: &MomentDriver,
    z: &[f64],
) -> Result<f64, DiagnosticsError> {
    let p = spec.p;
    assert_eq!(drv.dim_p(), p, "driver/Lyapunov dimension mismatch");
    assert_eq!(z.len(), p);
    let margin = drv.singularity_margin(z);
    if margin <= 0.0 {
        return Err(DiagnosticsError::SingularPoint { margin });
    }
    let mut a = vec![0.0; p];
    let mut s = vec![0.0; p * p];
    drv.drift(z, &mut a).map_err(|_| DiagnosticsError::SingularPoint { margin })?;
    drv.diffusion(z, &mut s).map_err(|_| DiagnosticsError::SingularPoint { margin })?;
    let mut grad = vec![0.0; p];
    let mut hess = vec![0.0; p * p];
    (spec.grad_v)(z, &mut grad);
    (spec.hess_v)(z, &mut hess);
    let mut value = 0.0;
    for k in 0..p {
        value += a[k] * grad[k];
    }
    // (s s^T)_{kl} = sum_m s[k + p m] s[l + p m] (column-major)
    for k in 0..p {
        for l in 0..p {
            let mut cov = 0.0;
            for m in 0..p {
                cov += s[k + p * m] * s[l + p * m];
            }
            value += 0.5 * cov * hess[k + p * l];
        }
    }
    Ok(value)
}

/// Empirical sup of `G V / V` over a grid, with the points violating a
/// candidate bound `G V <= c V`. A finite, refinement-stable sup certifies
/// the non-explosion condition numerically; a sup that keeps growing as the
/// grid approaches the singularity is evidence against it.
#[derive(Clone, Debug)]
pub struct LyapunovReport {
    pub sup_ratio: f64,
    /// Grid point attaining the sup.
    pub argmax: Vec<f64>,
    /// Points where `G V > c V`.
    pub violating: Vec<Vec<f64>>,
    pub n_points: usize,
    /// Grid points skipped because the driver is singular there.
    pub skipped: usize,
}

pub fn lyapunov_report(
    spec: &LyapunovSpec,
    drv: &MomentDriver,
    grid: &[Vec<f64>],
    c: f64,
) -> LyapunovReport {
    let mut sup = f64::NEG_INFINITY;
    let mut argmax = Vec::new();
    let mut violating = Vec::new();
    let mut skipped = 0;
    let mut n_points = 0;
    for z in grid {
        let gv = match generator_value(spec, drv, z) {
            Ok(v) => v,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        n_points += 1;
        let v = spec.value(z);
        let ratio = gv / v;
        if ratio > sup {
            sup = ratio;
            argmax = z.clone();
        }
        if gv > c * v {
            violating.push(z.clone());
        }
    }
    LyapunovReport { sup_ratio: sup, argmax, violating, n_points, skipped }
}

/// Log-spaced scalar grid, endpoints included.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && n >= 2);
    let (llo, lhi) = (lo.ln(), hi.ln());
    (0..n).map(|i| (llo + (lhi - llo) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// Relax the plain interacting system (`gamma = 0`, monitor off) from each
/// initial condition for `t_relax` and return the final empirical measures.
/// These act as reference states, e.g. the two wells of a bistable landscape.
pub fn estimate_minimizers(
    dynamics: &BaselineDynamics,
    d: usize,
    inits: &[InitialCondition],
    t_relax: f64,
    base: &SimConfig,
) -> Result<Vec<EmpiricalMeasure>, DiagnosticsError> {
    let obs = Observable::identity(d);
    let drv = MomentDriver::brownian(d);
    let n_steps = ((t_relax / base.dt) + 1e-9).floor().max(1.0) as usize;
    inits
        .iter()
        .map(|init| {
            let cfg = SimConfig {
                gamma: 0.0,
                t_final: t_relax,
                init: init.clone(),
                monitor: ExplosionPolicy::disabled(),
                record_stride: n_steps,
                snapshot_stride: n_steps,
                ..base.clone()
            };
            let traj = run(&cfg, &obs, &drv, dynamics)?;
            let last = traj.snapshots.last().ok_or(DiagnosticsError::NoSnapshots)?;
            Ok(EmpiricalMeasure::new(d, last.positions.clone())?)
        })
        .collect()
}

/// Sign changes of the recorded mean after `burn_in`, counted with a
/// hysteresis band: a side is taken only when the mean leaves `[-band, band]`,
/// and a transition is counted when the opposite side is reached.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionStats {
    pub n_transitions: usize,
    /// Time spent on each side before switching (one entry per transition).
    pub dwell_times: Vec<f64>,
}

pub fn transition_stats(traj: &Trajectory, burn_in: f64) -> TransitionStats {
    transition_stats_banded(traj, burn_in, 0.2)
}

pub fn transition_stats_banded(traj: &Trajectory, burn_in: f64, band: f64) -> TransitionStats {
    assert!(band >= 0.0);
    let mut side: Option<(i8, f64)> = None;
    let mut n_transitions = 0;
    let mut dwell_times = Vec::new();
    for (t, m) in traj.times.iter().zip(&traj.mean_series) {
        if *t < burn_in {
            continue;
        }
        let s: i8 = if *m > band {
            1
        } else if *m < -band {
            -1
        } else {
            0
        };
        if s == 0 {
            continue;
        }
        match side {
            None => side = Some((s, *t)),
            Some((cur, entered)) if s != cur => {
                n_transitions += 1;
                dwell_times.push(t - entered);
                side = Some((s, *t));
            }
            Some(_) => {}
        }
    }
    TransitionStats { n_transitions, dwell_times }
}

/// Wasserstein-`p` distance of each snapshot to each reference measure, plus
/// the snapshot time closest to each reference (the cross-points of a
/// transition plot).
#[derive(Clone, Debug)]
pub struct WassersteinTrack {
    pub times: Vec<f64>,
    /// `distances[r][k]` = distance of snapshot `k` to reference `r`.
    pub distances: Vec<Vec<f64>>,
    /// Per reference, the snapshot time attaining the minimal distance.
    pub argmin_times: Vec<f64>,
}

pub fn wasserstein_track(
    traj: &Trajectory,
    refs: &[EmpiricalMeasure],
    p: f64,
) -> Result<WassersteinTrack, DiagnosticsError> {
    if traj.snapshots.is_empty() {
        return Err(DiagnosticsError::NoSnapshots);
    }
    let times: Vec<f64> = traj.snapshots.iter().map(|s| s.time).collect();
    let mut distances = Vec::with_capacity(refs.len());
    let mut argmin_times = Vec::with_capacity(refs.len());
    for r in refs {
        let mut row = Vec::with_capacity(times.len());
        for snap in &traj.snapshots {
            let pi = EmpiricalMeasure::new(r.dim(), snap.positions.clone())?;
            row.push(measures::wasserstein_1d(p, &pi, r)?);
        }
        let (k_min, _) = row
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| a.partial_cmp(b).expect("distances are finite"))
            .expect("snapshots are nonempty");
        argmin_times.push(times[k_min]);
        distances.push(row);
    }
    Ok(WassersteinTrack { times, distances, argmin_times })
}
