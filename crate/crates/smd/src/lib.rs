//! Stochastic moment dynamics (SMD): interacting particle systems driven by a
//! shared common noise, built so that prescribed observables of the empirical
//! measure follow a chosen SDE.
//!
//! Given an observable family `f: R^d -> R^p`, a target SDE `dZ = a(Z) dt +
//! s(Z) dW` and an empirical measure `pi`, the coefficient pipeline produces
//! per-particle drift and diffusion
//!
//! ```text
//! sigma_mu(x) = grad_f(x) (eta I + G)^-1 s(mu(f))
//! b_mu(x)     = grad_f(x) (eta I + G)^-1 [ a(mu(f)) - 1/2 mu(sigma sigma^T : hess f) ]
//! ```
//!
//! with `G = mu(grad_f^T grad_f)` the Gram matrix, so that `pi(f)` tracks the
//! target SDE (exactly at `eta = 0`, approximately under regularization
//! `eta > 0`). The construction can blow up in finite time; the simulator
//! monitors moment growth, the driver's singularity margin and the Gram
//! determinant, and reports the first exit as an explosion.
//!
//! Modules:
//! - [`rng`]: counter-based splittable random streams (reproducibility).
//! - [`observables`]: the family `f`, its derivatives and growth class.
//! - [`measures`]: empirical measures, moments, Gram matrices, 1-d Wasserstein.
//! - [`drivers`]: target SDEs `(a, s)` with singularity margins.
//! - [`coefficients`]: the per-particle field pipeline and closed forms.
//! - [`dynamics`]: the baseline interacting-particle drift and diffusion.
//! - [`simulator`]: Euler-Maruyama integration with explosion monitoring.
//! - [`diagnostics`]: Lyapunov generator checks, transition and distance tracking.
//! - [`cli`]: config files, experiment orchestration and file output.

pub mod cli;
pub mod coefficients;
pub mod diagnostics;
pub mod drivers;
pub mod dynamics;
pub mod measures;
pub mod observables;
pub mod rng;
pub mod simulator;
