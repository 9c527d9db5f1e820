//! Saliency evaluation: PR sweep, F-measure, MAE, S-measure and E-measure.
//!
//! Predictions are continuous maps in `[0, 1]`, ground truths are boolean
//! masks. A prediction is binarised at level `t` as `s * 255 >= t`.

mod alignment;
mod pr;
mod report;
mod structure;

pub use alignment::{e_curve, e_measure, e_measure_at, EMode, ALIGN_EPS};
pub use pr::{adaptive_threshold, f_measure, level_of, mae, pr_curve, precision_recall, PrCurve, THRESHOLDS};
pub use report::{
    evaluate_directory, evaluate_manifest, evaluate_maps, fit_to, load_map, load_mask, ImageMetrics, MetricConfig, MetricsReport,
    SkippedItem,
};
pub use structure::s_measure;

pub(crate) use report::csv_finish;
