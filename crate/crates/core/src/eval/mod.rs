//! Cascade inference, metrics, heatmap aggregation and report files.

pub mod cascade;
pub mod heatmap;
pub mod metrics;
pub mod records;

pub use cascade::{
    cascade_predict, cascade_predict_batch, gate, network_prediction, CascadeModel, CascadeOutput, DEFAULT_THRESHOLD,
};
pub use heatmap::{aggregate_heatmap, mask_to_tensor, mean_inside_outside, threshold_heatmap, write_pgm};
pub use metrics::{
    class_rocs, evaluate_predictions, roc_curve, ClassMetrics, EvalReport, RocCurve, RocPoint, F1_AVERAGE_CLASSES,
};
pub use records::{read_predictions, report_kv, report_text, write_predictions, write_report, PredictionRecord};
