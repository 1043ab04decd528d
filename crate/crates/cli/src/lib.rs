//! Library backing the `ijack` binary: configuration parsing, experiment
//! orchestration, and report emission.

pub mod config;
pub mod experiment;
pub mod report;

pub use config::{parse_config_text, DataSource, ExperimentConfig, FamilyConfig};
pub use experiment::{
    build_certificate, configure_threads, load_training, run_accuracy_experiment,
    run_timing_experiment, CvMode, THREADS_ENV,
};
pub use report::{
    emit_report, report_to_csv, report_to_json, Aggregates, ExperimentReport, FitSummary,
    ReportFormat, Timings, WeightRecord,
};
