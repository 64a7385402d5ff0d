//! Configuration-driven experiments with reproducible seeds and
//! machine-readable reports.

pub mod config;
pub mod experiments;
pub mod report;

pub use config::{Channels, ExperimentConfig, Steps};
pub use experiments::run;
pub use report::{emit_report, read_report, Aggregates, Experiment, Format, RunReport, TrialRecord};
