//! Experiment harness for the budding ensemble detector: configuration,
//! training runs, detection dumps, metrics and figures.

pub mod config;
pub mod dump;
pub mod error;
pub mod evaluate;
pub mod experiment;
pub mod plots;
pub mod report;

pub use config::{DataConfig, EvalConfig, ExperimentConfig, Split};
pub use error::{HarnessError, Result};
pub use evaluate::{Evaluation, MetricsRow};
pub use experiment::{ablate, eval_from_dumps, run_experiment, HeadAccuracy, RunArtifacts};
pub use report::{emit_report, ReportSummary};
