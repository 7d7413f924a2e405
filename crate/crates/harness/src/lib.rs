//! Operator-side tooling for the desk-scale HMR-Mamba model: configuration,
//! training, evaluation, verification suites, ablations, and benchmarks.

pub mod ablate;
pub mod bench;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod optim;
pub mod report;
pub mod train;
pub mod verify;

pub use config::{RunConfig, Stage};
pub use error::{HarnessError, Result};
