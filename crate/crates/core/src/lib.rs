//! Long-video editing core: adaptive clip partitioning, per-timestep keyframe sampling,
//! slimmed extended self-attention and correspondence-based propagation.

pub mod attention;
pub mod error;
pub mod keyframes;
pub mod partition;
pub mod pipeline;
pub mod propagation;
pub mod similarity;
pub mod tensor_store;

pub use attention::{
    attention_cost, extended_self_attention, select_kv_tokens, slimmed_attention, CostReport,
    KvMeter, ProjectionWeights, TokenSelection, DEFAULT_BUDGET_FRAMES,
};
pub use error::{Error, Result};
pub use keyframes::{select_keyframes, KeyframeMode, KeyframeSchedule};
pub use partition::{
    adaptive_partition, yt_diagnostic, BoundaryMode, ClipPartition, PartitionParams,
};
pub use pipeline::{run_pipeline, PipelineConfig, PipelineOutput};
pub use propagation::{precompute_correspondences, propagate, CorrespondenceSet};
pub use similarity::{
    correspondence_map, heatmap, FeatureVolume, Heatmap, HeatmapCache, PositionMap,
};
pub use tensor_store::{tensor_read, tensor_write, Tensor};
