//! Training harness for the dynamic-inference engine: synthetic datasets,
//! the toy network, the stage-wise trainer, evaluation, and the policy
//! comparison, all driven by the `pag` command-line tool.

pub mod compare;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod model;
pub mod train;

pub use config::{MultiPoolKind, RunConfig, StageKind, TaskKind};
pub use error::{HarnessError, Result};
