//! Focal loss, Adam, early-stopped training and patient-level cross-validation.

mod cv;
mod fit;
mod loss;
mod metrics;
mod optim;

pub use cv::{derive_seed, fit_fold, run_cv, CvOptions, CvOutcome, FittedFold, FoldRecord, HistoryRow, MaskReport, NamedMask, Preprocessor};
pub use fit::{
    evaluate_loss, predict_dataset, train, train_with_validation, EarlyStopping, EpochRecord, StopDecision, TrainConfig,
    TrainHistory,
};
pub use loss::{class_weights, focal_loss, focal_loss_batch};
pub use metrics::{
    argmax, binary_metrics, fold_metrics, metrics, task_name, BinaryFoldMetrics, BinarySummary, ClassMetrics, FoldMetrics,
    MetricSummaries, MetricsReport, Summary, BINARY_TASKS,
};
pub use optim::{adam_step, AdamState, ADAM_EPS, BETA1, BETA2};
