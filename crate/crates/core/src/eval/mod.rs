//! Accuracy metrics, experiment harnesses and report files.

pub mod harness;
pub mod metrics;
pub mod report;

pub use harness::{
    logit_dump, similarity_report, Harness, Method, SimilarityReport, StabilityReport,
};
pub use metrics::{accuracy_report, population_std, topk_accuracy, AccuracyReport};
pub use report::{emit_report, load_json_report, Cell, ReportFormat, Table};
