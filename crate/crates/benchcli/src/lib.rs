//! Experiment runner: config parsing, timed training runs and comparison reports.

pub mod config;
pub mod report;
pub mod runner;
mod svg;

pub use config::{parse_config, parse_config_with_overrides, ConfigError, ExperimentConfig, Task};
pub use report::{emit_report, ReportRow};
pub use runner::{read_metrics, run_experiment, MetricsRecord, RunError, RunOutput};
