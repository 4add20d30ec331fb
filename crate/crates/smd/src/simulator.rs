//! Euler-Maruyama integration of the full particle system
//!
//! ```text
//! dX_i = [ btilde(X_i, pi) + gamma b_mu(X_i) ] dt
//!        + sigma_tilde dB_i + gamma sigma_mu(X_i) dW0
//! ```
//!
//! with one Brownian motion `W0` shared by all particles (the common noise)
//! and independent private motions `B_i`. The moment field `(b_mu, sigma_mu)`
//! is recomputed from the empirical measure every step; an explosion monitor
//! watches the measure before each step and freezes the state the first time
//! it leaves the good region.
//!
//! Noise streams are counter-addressed: the common increment at step `k`
//! depends only on `seed_common` and `k` (never on the particle count), and
//! particle `i`'s private stream depends only on `seed_private` and `i`. Runs
//! that differ in `n_particles` therefore share both the common noise and the
//! per-particle private noise of the particles they have in common, which is
//! exactly the coupling the chaos experiments need. It also makes every run
//! bit-reproducible regardless of thread count.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coefficients::{self, FieldError, SmdField};
use crate::drivers::MomentDriver;
use crate::dynamics::BaselineDynamics;
use crate::measures::EmpiricalMeasure;
use crate::observables::Observable;
use crate::rng::CounterRng;

/// How the intensity `gamma` enters the motion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    /// Multiply the assembled per-particle `b_i` and `sigma_i` by `gamma`.
    /// This is the convention of the bistability experiment; note it scales
    /// the Ito-correction part of the drift by `gamma` where consistency
    /// with a `gamma`-scaled target SDE would need `gamma^2`.
    ScaleField,
    /// Scale the target SDE itself (`a -> gamma^2 a`, `s -> gamma s`) before
    /// the field pipeline, so the observable tracks the scaled SDE exactly.
    ScaleDriver,
}

/// Initial particle positions. In configs a Gaussian is the object
/// `{"mean": M, "std": S}` and explicit samples are a flat `N x d` array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitialCondition {
    /// Every coordinate independent `N(mean, std^2)`.
    Gaussian { mean: f64, std: f64 },
    /// Explicit flat `N x d` row-major positions.
    Samples(Vec<f64>),
}

/// Thresholds whose first violation stops a run. The monitored region is
/// `{ m_alpha < moment_cap, margin > margin_floor, det G > det_floor }`;
/// triggering is the OR of the three exit clauses. Set `moment_cap` to
/// infinity or a floor to 0 to disable that clause.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplosionPolicy {
    pub moment_cap: f64,
    pub margin_floor: f64,
    pub det_floor: f64,
}

impl Default for ExplosionPolicy {
    fn default() -> Self {
        ExplosionPolicy { moment_cap: 1e6, margin_floor: 1e-6, det_floor: 1e-6 }
    }
}

impl ExplosionPolicy {
    /// All clauses off (useful for reference runs that must never stop).
    pub fn disabled() -> Self {
        ExplosionPolicy { moment_cap: f64::INFINITY, margin_floor: 0.0, det_floor: 0.0 }
    }
}

/// Run parameters. In configs only `n_particles`, `dt` and `t_final` are
/// required; every other field falls back to the documented default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n_particles: usize,
    pub dt: f64,
    pub t_final: f64,
    #[serde(default = "default_seed_common")]
    pub seed_common: u64,
    #[serde(default = "default_seed_private")]
    pub seed_private: u64,
    /// Gram regularization `eta >= 0` passed to the field pipeline.
    #[serde(default)]
    pub eta: f64,
    /// Moment-coupling intensity; `gamma = 0` turns the coupling off.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_gamma_mode")]
    pub gamma_mode: GammaMode,
    #[serde(default = "default_init")]
    pub init: InitialCondition,
    #[serde(default)]
    pub monitor: ExplosionPolicy,
    /// Record the series every this many steps (>= 1).
    #[serde(default = "default_record_stride")]
    pub record_stride: usize,
    /// Store full particle snapshots every this many steps (0 = never).
    #[serde(default)]
    pub snapshot_stride: usize,
}

fn default_seed_common() -> u64 {
    1
}

fn default_seed_private() -> u64 {
    2
}

fn default_gamma() -> f64 {
    1.0
}

fn default_gamma_mode() -> GammaMode {
    GammaMode::ScaleField
}

fn default_init() -> InitialCondition {
    InitialCondition::Gaussian { mean: 0.0, std: 1.0 }
}

fn default_record_stride() -> usize {
    1
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_particles: 100,
            dt: 1e-3,
            t_final: 1.0,
            seed_common: 1,
            seed_private: 2,
            eta: 0.0,
            gamma: 1.0,
            gamma_mode: GammaMode::ScaleField,
            init: InitialCondition::Gaussian { mean: 0.0, std: 1.0 },
            monitor: ExplosionPolicy::default(),
            record_stride: 1,
            snapshot_stride: 0,
        }
    }
}

/// Which monitor clause fired (numeric overflow during an update is reported
/// as `MomentCap`: the state left every bounded moment set).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplosionCause {
    MomentCap,
    SingularityMargin,
    DetFloor,
}

#[derive(Clone, Debug)]
pub struct Snapshot {
    pub time: f64,
    /// Flat `N x d` row-major positions.
    pub positions: Vec<f64>,
}

/// Recorded output of one run. All series share the same length as `times`;
/// on explosion the final recorded row is the frozen pre-trigger state.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// Observable moment `pi_t(f)` per recorded time.
    pub z_series: Vec<Vec<f64>>,
    /// Mean of the first coordinate.
    pub mean_series: Vec<f64>,
    /// `pi(|x|^2)`.
    pub m2_series: Vec<f64>,
    /// `pi(|x|^2) - |pi(x)|^2`.
    pub var_series: Vec<f64>,
    pub det_series: Vec<f64>,
    pub margin_series: Vec<f64>,
    pub malpha_series: Vec<f64>,
    pub exploded: bool,
    pub explosion_time: Option<f64>,
    pub explosion_cause: Option<ExplosionCause>,
    pub snapshots: Vec<Snapshot>,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("coupled runs may differ only in particle count, private seed, and recording: {0}")]
    CoupledMismatch(String),
    #[error(transparent)]
    Measure(#[from] crate::measures::MeasureError),
}

impl SimConfig {
    fn validate(&self, obs: &Observable, drv: &MomentDriver) -> Result<(), SimError> {
        let fail = |msg: String| Err(SimError::Config(msg));
        if self.n_particles == 0 {
            return fail("n_particles must be at least 1".into());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return fail(format!("dt must be positive and finite, got {}", self.dt));
        }
        if !(self.t_final >= self.dt && self.t_final.is_finite()) {
            return fail(format!(
                "t_final must be finite and at least dt, got t_final {} with dt {}",
                self.t_final, self.dt
            ));
        }
        if !(self.eta >= 0.0) {
            return fail(format!("eta must be nonnegative, got {}", self.eta));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return fail(format!("gamma must be finite and nonnegative, got {}", self.gamma));
        }
        if self.record_stride == 0 {
            return fail("record_stride must be at least 1".into());
        }
        if obs.dim_p() != drv.dim_p() {
            return fail(format!(
                "observable produces {} moments but the driver is {}-dimensional",
                obs.dim_p(),
                drv.dim_p()
            ));
        }
        if let InitialCondition::Samples(s) = &self.init {
            if s.len() != self.n_particles * obs.dim_d() {
                return fail(format!(
                    "init samples hold {} values, expected n_particles x d = {}",
                    s.len(),
                    self.n_particles * obs.dim_d()
                ));
            }
        }
        if !(self.monitor.moment_cap > 0.0)
            || !(self.monitor.margin_floor >= 0.0)
            || !(self.monitor.det_floor >= 0.0)
        {
            return fail("monitor thresholds must be positive (or 0/inf to disable)".into());
        }
        Ok(())
    }
}

/// One Euler-Maruyama update. Writes the new flat positions into `out`
/// (length `N x d`); does not check finiteness. `field = None` means no
/// moment coupling this step (`gamma_eff` is then ignored), `dw_private =
/// None` means no private noise. `dw0` and `dw_private` are raw Brownian
/// increments (variance `dt` each).
#[allow(clippy::too_many_arguments)]
pub fn step(
    pi: &EmpiricalMeasure,
    field: Option<&SmdField>,
    gamma_eff: f64,
    dynamics: &BaselineDynamics,
    dw0: &[f64],
    dw_private: Option<&[f64]>,
    dt: f64,
    out: &mut [f64],
) {
    let n = pi.n();
    let d = pi.dim();
    assert_eq!(out.len(), n * d);
    if let Some(dw) = dw_private {
        assert_eq!(dw.len(), n * d);
    }

    out.copy_from_slice(pi.positions());

    if !dynamics.is_zero() {
        let mut base = vec![0.0; n * d];
        dynamics.drift_all(pi, &mut base);
        for (o, b) in out.iter_mut().zip(&base) {
            *o += b * dt;
        }
        let st = dynamics.sigma_tilde();
        if st > 0.0 {
            let dw = dw_private.expect("private increments required when sigma_tilde > 0");
            for (o, w) in out.iter_mut().zip(dw) {
                *o += st * w;
            }
        }
    }

    if let Some(field) = field {
        assert_eq!(dw0.len(), field.dim_p());
        for i in 0..n {
            let bi = field.b_of(i);
            let si = field.sigma_of(i);
            let o = &mut out[i * d..(i + 1) * d];
            for l in 0..d {
                let mut noise = 0.0;
                for (j, w) in dw0.iter().enumerate() {
                    noise += si[l + d * j] * w;
                }
                o[l] += gamma_eff * (bi[l] * dt + noise);
            }
        }
    }
}

struct Recorder {
    traj: Trajectory,
    last_recorded_step: Option<usize>,
}

impl Recorder {
    fn new() -> Self {
        Recorder {
            traj: Trajectory {
                times: Vec::new(),
                z_series: Vec::new(),
                mean_series: Vec::new(),
                m2_series: Vec::new(),
                var_series: Vec::new(),
                det_series: Vec::new(),
                margin_series: Vec::new(),
                malpha_series: Vec::new(),
                exploded: false,
                explosion_time: None,
                explosion_cause: None,
                snapshots: Vec::new(),
            },
            last_recorded_step: None,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        k: usize,
        t: f64,
        z: &[f64],
        mean0: f64,
        m2: f64,
        var: f64,
        det: f64,
        margin: f64,
        m_alpha: f64,
    ) {
        if self.last_recorded_step == Some(k) {
            return;
        }
        self.last_recorded_step = Some(k);
        let tr = &mut self.traj;
        tr.times.push(t);
        tr.z_series.push(z.to_vec());
        tr.mean_series.push(mean0);
        tr.m2_series.push(m2);
        tr.var_series.push(var);
        tr.det_series.push(det);
        tr.margin_series.push(margin);
        tr.malpha_series.push(m_alpha);
    }
}

fn det_small(m: &nalgebra::DMatrix<f64>) -> f64 {
    match m.nrows() {
        1 => m[(0, 0)],
        2 => m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)],
        _ => m.clone().determinant(),
    }
}

/// Integrate one full trajectory. Deterministic given the config; explosion
/// is a normal outcome, not an error.
pub fn run(
    cfg: &SimConfig,
    obs: &Observable,
    drv: &MomentDriver,
    dynamics: &BaselineDynamics,
) -> Result<Trajectory, SimError> {
    cfg.validate(obs, drv)?;
    let n = cfg.n_particles;
    let d = obs.dim_d();
    let p = obs.dim_p();
    let dt = cfg.dt;
    let sqrt_dt = dt.sqrt();
    let n_steps = ((cfg.t_final / dt) + 1e-9).floor().max(1.0) as usize;
    let alpha = obs.alpha();

    // independent root streams; all draws are counter-addressed below
    let common = CounterRng::from_seed(cfg.seed_common);
    let private_root = CounterRng::from_seed(cfg.seed_private);
    let init_rng = private_root.split(0);
    let step_root = private_root.split(1);

    let positions = match &cfg.init {
        InitialCondition::Gaussian { mean, std } => {
            if !(std.is_finite() && *std >= 0.0 && mean.is_finite()) {
                return Err(SimError::Config(format!(
                    "gaussian init needs finite mean and std >= 0, got ({mean}, {std})"
                )));
            }
            (0..n * d).map(|slot| mean + std * init_rng.normal_at(slot as u64)).collect()
        }
        InitialCondition::Samples(s) => s.clone(),
    };
    let mut pi = EmpiricalMeasure::new(d, positions)?;

    let (drv_eff, gamma_eff) = match cfg.gamma_mode {
        GammaMode::ScaleField => (drv.clone(), cfg.gamma),
        GammaMode::ScaleDriver => (drv.clone().scaled(cfg.gamma), 1.0),
    };
    let smd_active = cfg.gamma > 0.0;

    let private_streams: Option<Vec<CounterRng>> = if dynamics.sigma_tilde() > 0.0 {
        Some((0..n).map(|i| step_root.split(i as u64)).collect())
    } else {
        None
    };

    let mut rec = Recorder::new();
    let mut dw0 = vec![0.0; p];
    let mut dw_private = private_streams.as_ref().map(|_| vec![0.0; n * d]);
    let mut next_positions = vec![0.0; n * d];
    let mut z = nalgebra::DVector::<f64>::zeros(p);
    let mut gram = nalgebra::DMatrix::<f64>::zeros(p, p);
    let mut mean_vec = vec![0.0; d];
    let mut field_buf = SmdField::zeroed(n, d, p);

    let explode = |rec: &mut Recorder, t: f64, cause: ExplosionCause| {
        rec.traj.exploded = true;
        rec.traj.explosion_time = Some(t);
        rec.traj.explosion_cause = Some(cause);
    };

    for k in 0..=n_steps {
        let t = k as f64 * dt;

        // shared statistics of the current measure, one fused pass
        let (m2, m_alpha) = pi.step_stats(obs, alpha, &mut z, &mut gram, &mut mean_vec);
        let det = det_small(&gram);
        let margin = drv_eff.singularity_margin(z.as_slice());
        let var = m2 - mean_vec.iter().map(|m| m * m).sum::<f64>();

        if k % cfg.record_stride == 0 {
            rec.record(k, t, z.as_slice(), mean_vec[0], m2, var, det, margin, m_alpha);
        }
        if cfg.snapshot_stride > 0 && k % cfg.snapshot_stride == 0 {
            rec.traj.snapshots.push(Snapshot { time: t, positions: pi.positions().to_vec() });
        }

        // monitor: exit of the good region stops the run, first clause in
        // this fixed order names the cause
        let pol = &cfg.monitor;
        let cause = if m_alpha >= pol.moment_cap || !m_alpha.is_finite() {
            Some(ExplosionCause::MomentCap)
        } else if margin <= pol.margin_floor {
            Some(ExplosionCause::SingularityMargin)
        } else if det <= pol.det_floor {
            Some(ExplosionCause::DetFloor)
        } else {
            None
        };
        if let Some(cause) = cause {
            rec.record(k, t, z.as_slice(), mean_vec[0], m2, var, det, margin, m_alpha);
            explode(&mut rec, t, cause);
            break;
        }
        if k == n_steps {
            break;
        }

        // the moment field for this step (skipped entirely when gamma = 0)
        let field = if smd_active {
            match coefficients::compute_field_given_into(
                &pi,
                obs,
                &drv_eff,
                cfg.eta,
                coefficients::DET_FLOOR_DEFAULT,
                &z,
                &gram,
                &mut field_buf,
            ) {
                Ok(()) => Some(&field_buf),
                Err(e) => {
                    let cause = match e {
                        FieldError::SingularGram { .. } => ExplosionCause::DetFloor,
                        FieldError::DriverSingularity { .. } => ExplosionCause::SingularityMargin,
                    };
                    rec.record(k, t, z.as_slice(), mean_vec[0], m2, var, det, margin, m_alpha);
                    explode(&mut rec, t, cause);
                    break;
                }
            }
        } else {
            None
        };

        for (j, w) in dw0.iter_mut().enumerate() {
            *w = sqrt_dt * common.normal_at((k * p + j) as u64);
        }
        if let (Some(streams), Some(dw)) = (&private_streams, &mut dw_private) {
            for (i, stream) in streams.iter().enumerate() {
                for l in 0..d {
                    dw[i * d + l] = sqrt_dt * stream.normal_at((k * d + l) as u64);
                }
            }
        }

        step(
            &pi,
            field,
            gamma_eff,
            dynamics,
            &dw0,
            dw_private.as_deref(),
            dt,
            &mut next_positions,
        );

        // a non-finite update means the state left every bounded-moment set
        // within one step; freeze the pre-step state
        if !next_positions.iter().all(|v| v.is_finite()) {
            rec.record(k, t, z.as_slice(), mean_vec[0], m2, var, det, margin, m_alpha);
            explode(&mut rec, t, ExplosionCause::MomentCap);
            break;
        }
        let next = std::mem::take(&mut next_positions);
        let old = std::mem::replace(&mut pi, EmpiricalMeasure::new(d, next)?);
        next_positions = old.into_positions();
    }

    Ok(rec.traj)
}

/// Run several configs that share the same common noise (and therefore see
/// identical target-SDE increments) but differ in particle count and private
/// seed. Snapshots are forced on so the runs can be compared in Wasserstein
/// distance afterwards.
pub fn run_coupled(
    cfgs: &[SimConfig],
    obs: &Observable,
    drv: &MomentDriver,
    dynamics: &BaselineDynamics,
) -> Result<Vec<Trajectory>, SimError> {
    let first = cfgs
        .first()
        .ok_or_else(|| SimError::CoupledMismatch("no configs given".into()))?;
    for (idx, cfg) in cfgs.iter().enumerate().skip(1) {
        let mismatch = |what: &str| {
            Err(SimError::CoupledMismatch(format!("config {idx} differs from config 0 in {what}")))
        };
        if cfg.seed_common != first.seed_common {
            return mismatch("seed_common");
        }
        if cfg.dt != first.dt || cfg.t_final != first.t_final {
            return mismatch("time grid");
        }
        if cfg.eta != first.eta || cfg.gamma != first.gamma || cfg.gamma_mode != first.gamma_mode {
            return mismatch("coupling parameters");
        }
        if cfg.init != first.init {
            return mismatch("initial condition");
        }
        if cfg.monitor != first.monitor {
            return mismatch("monitor policy");
        }
    }
    cfgs.iter()
        .map(|cfg| {
            let mut cfg = cfg.clone();
            if cfg.snapshot_stride == 0 {
                cfg.snapshot_stride = cfg.record_stride;
            }
            run(&cfg, obs, drv, dynamics)
        })
        .collect()
}
