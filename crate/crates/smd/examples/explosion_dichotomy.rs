//! Finite-time explosion as a function of the target's Bessel index.
//!
//! The second moment is steered toward a squared-Bessel SDE of index delta.
//! For delta >= 2 the target never reaches 0, so the particle field stays
//! defined; for delta < 2 the target hits 0 in finite time and the field
//! coefficients (which scale like 1/m2 and 1/m2^2) blow up with it. The
//! monitor reports the first threshold crossing and freezes the trajectory.
//!
//! Both runs share seeds, so they see identical initial clouds and identical
//! common noise; only delta differs.

use smd::drivers::MomentDriver;
use smd::dynamics::BaselineDynamics;
use smd::observables::Observable;
use smd::simulator::{run, ExplosionPolicy, SimConfig};

fn main() {
    let cfg = SimConfig {
        n_particles: 1000,
        dt: 1e-4,
        t_final: 2.0,
        seed_common: 108,
        seed_private: 102,
        monitor: ExplosionPolicy { moment_cap: 1e6, margin_floor: 1e-4, det_floor: 1e-10 },
        record_stride: 10,
        ..SimConfig::default()
    };
    let obs = Observable::second_moment_1d();

    for delta in [1.0, 3.0] {
        let drv = MomentDriver::bessel(delta);
        let traj = run(&cfg, &obs, &drv, &BaselineDynamics::zero()).unwrap();
        let last = traj.m2_series.last().unwrap();
        match traj.explosion_time {
            Some(t) => println!(
                "delta = {delta}: EXPLODED at t = {t:.4} ({:?}), last m2 = {last:.3e}",
                traj.explosion_cause.unwrap()
            ),
            None => println!("delta = {delta}: survived to t = 2, final m2 = {last:.4}"),
        }
    }
}
