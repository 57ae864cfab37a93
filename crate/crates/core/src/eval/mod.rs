//! Scoring detectors on dataset splits, dataset statistics, and training exports.

mod export;
mod harness;
mod metrics;
mod stats;
mod subsample;

pub use export::{export_training_set, write_training_set, Strategy, TrainingExportConfig, TrainingRecord, ViewPolicy};
pub use harness::{
    accuracy_from_audit, build_query, evaluate_split, report_from_audit, AuditRecord, Averaging, ChatDetector,
    Detector, ErrorStage, EvalOptions, EvalOutcome, MetricsReport, UNPARSED,
};
pub use metrics::{binary_accuracy, confusion_matrix, ConfusionMatrix};
pub use stats::{dataset_stats, stats_row, DatasetStats, StatsRow};
pub use subsample::subsample_corpus;
