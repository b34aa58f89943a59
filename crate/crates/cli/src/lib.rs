//! Experiment driver: config files in, checkpointed batch logs and derived
//! tables out.

pub mod config;
pub mod error;
pub mod fits;
pub mod report;
pub mod run;
pub mod store;

pub use config::{ExperimentConfig, Job, PiBudget};
pub use error::{CliError, CliResult};
pub use report::{build_report, report, Report};
pub use run::{read_estimates, resume, run, EstimateRow, RunOptions, RunOutcome};
