//! Configuration, dataset dumps, reports and experiment drivers.

pub mod config;
pub mod dataset;
pub mod experiments;
pub mod report;

pub use config::{Config, ExperimentKind};
pub use dataset::Dataset;
pub use experiments::run_experiment;
pub use report::{emit_report, render_report, ReportFormat, ReportTable};
