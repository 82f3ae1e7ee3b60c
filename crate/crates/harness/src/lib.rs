//! Experiment orchestration: configuration files, the framework sweep and
//! its CSV/SVG reports.

pub mod config;
pub mod error;
pub mod experiment;
pub mod report;

pub use config::{ExperimentConfig, Framework, TaskKind};
pub use error::{HarnessError, Result};
pub use experiment::{run_sweep, Experiment, RunRecord, SweepResult};
