//! Segmentation metrics, multi-scale inference and cost accounting.

mod cost;
mod metrics;
mod tta;

pub use cost::{
    attention_apply_macs, attention_score_macs, conv_macs, count_cost, linear_macs, reduced_attention_macs,
    CostReport,
};
pub use metrics::{ConfusionMatrix, IoUReport};
pub use tta::multi_scale_predict;
