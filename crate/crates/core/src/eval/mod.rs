//! Evaluation: AUC, confusion matrices, wheel-bias panels, heatmap export and
//! streaming explanations.

mod heatmap;
mod metrics;
mod stream;

pub use heatmap::{export_heatmap, matrix_csv, matrix_svg, read_matrix_csv, shade};
pub use metrics::{auc, bias_report, confusion, AucResult, BiasPanel, ConfusionMatrix, WheelOutcome};
pub use stream::{explain_stream, stream_figure, write_stream_report, FlaggedRegion, StreamTrace, TraceRow};
