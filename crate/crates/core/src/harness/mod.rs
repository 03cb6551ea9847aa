//! Experiment orchestration: configuration, trials, batches, metrics and output files.

pub mod batch;
pub mod config;
pub mod io;
pub mod metrics;
pub mod selfcheck;
pub mod trial;

pub use batch::{run_batch, BatchReport, GroupSummary};
pub use config::{BatchMode, BenchConfig, EstimatorKind};
pub use trial::{run_trial, EstimateTrace, TrialRecord};
