//! Kernel generator regression and kernel Hamilton-Jacobi-Bellman solver for
//! control-affine diffusions, with benchmark systems and an evaluation harness.
//!
//! The pipeline is [`dynamics::generate_dataset`] -> [`generator::fit`] ->
//! [`hjb::solve_fvp`]; [`evaluation`] scores the resulting feedback policies.

// Validation uses `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod archive;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod hjb;
pub mod kernels;
pub mod lqr;
pub mod penalty;
pub mod points;

pub use error::{Error, Result};
pub use config::ExperimentConfig;
pub use dynamics::{ControlAffineSystem, GeneratorDataset, StageCost, StateGridSpec};
pub use generator::GeneratorModel;
pub use hjb::{HjbConfig, HjbSolution};
pub use kernels::KernelSpec;
pub use penalty::{ControlPenalty, Penalty};
pub use points::PointSet;

/// Dense linear algebra types used in the public API.
pub use faer;
