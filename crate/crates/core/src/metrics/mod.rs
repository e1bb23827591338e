//! Compactness measures, task metrics, the metrics log and parameter/FLOPs
//! accounting.

pub mod cluster;
pub mod compactness;
pub mod efficiency;
pub mod log;
pub mod task;

pub use cluster::{dunn_index, dunn_index_with, silhouette, silhouette_with, Distance};
pub use compactness::{inter_diversity, intra_homogeneity, CompactnessSnapshot};
pub use efficiency::{
    attention_projection_weights, closed_form_params, count_params, estimate_flops, flops_for, EfficiencyReport,
};
pub use log::{read_metrics, MetricsLog, MetricsRow, METRICS_HEADER};
pub use task::{task_metrics, TaskMetrics, TaskTally};
