//! Calibration engine for dynamic origin-destination (OD) travel demand.
//!
//! The crate bundles everything needed to pose OD-matrix estimation as a
//! sequential decision problem and to solve it three ways on a common
//! microscopic traffic simulator:
//!
//! - [`network`]: directed road graph, the built-in Nguyen-Dupuis instance,
//!   detector placement, and time-dependent shortest-path routing.
//! - [`microsim`]: discrete-time single-lane simulator with Krauss
//!   car-following, entry queues, rerouting, and detector counting.
//! - [`env`]: the simulator wrapped as an episodic environment with binary
//!   per-OD dispatch actions and sparse squared-error rewards.
//! - [`neural`] and [`ppo`]: a small hand-rolled actor-critic network with
//!   analytic gradients, Adam, and a clipped-surrogate PPO trainer.
//! - [`baselines`]: true-demand replication and Gaussian-process Bayesian
//!   optimization in simultaneous and sequential modes.
//! - [`experiments`]: ground-truth generation and the multi-method
//!   comparison protocol.
//! - [`metrics`] and [`stats`]: the error-metric suite and the
//!   normality-gated significance pipeline.
//! - [`config`]: the run configuration file shared by the CLI subcommands.

pub mod baselines;
pub mod config;
pub mod env;
pub mod experiments;
pub mod metrics;
pub mod microsim;
pub mod network;
pub mod neural;
pub mod ppo;
pub mod rng;
pub mod stats;
