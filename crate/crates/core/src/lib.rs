//! Stochastic mechanics laboratory.
//!
//! Simulates Nelson diffusions, their colored-noise and phase-space variants
//! and a mode-decomposed scalar field, estimates stochastic derivatives from
//! the resulting ensembles, and compares everything against Schrödinger
//! oracles.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ensemble;
pub mod error;
pub mod estimators;
pub mod field;
pub mod grid;
pub mod harness;
pub mod io;
pub mod process;
pub mod quantum;
pub mod rng;
pub mod sde;
pub mod stats;

pub use ensemble::{run_ensemble, with_threads, TrajStatus, TrajectoryEnsemble, TrajectoryRecord};
pub use error::{Error, Result};
pub use grid::{Grid1, ScalarFieldGrid, ScalarFieldGrid2};
pub use rng::{wiener_increments, NoiseStream};
pub use sde::{euler_maruyama, simulate_ou, IntegratorConfig, OuScheme};
