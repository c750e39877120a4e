//! Embedding-table compression for click-through-rate models: field importance
//! scoring and pruning, and frequency-tiered row-wise quantization.

pub mod dataset;
pub mod error;
pub mod metrics;
pub mod model;
pub mod priority;
pub mod quantizer;
pub mod selection;
pub mod store;
pub mod train;

pub use dataset::{Dataset, DatasetMeta, EmpiricalDistribution, Sample};
pub use error::{Error, Result};
pub use metrics::Metrics;
pub use model::{Model, ModelConfig};
pub use priority::{PriorityConfig, PriorityTracker, Thresholds, TierHistogram};
pub use quantizer::{Payload, PrecisionTier, Rounding, RoundingMode, ScalePolicy};
pub use selection::{
    permutation_error_exact, permutation_error_shuffle, prune_loop, prune_loop_with, taylor_scores, FieldModel,
    PruneConfig, PruneOutcome, TableScoreList,
};
pub use store::{EmbeddingStore, ExtraWord, MemoryReport, MixedTable};
pub use train::{train, TrainConfig, TrainMode, TrainSummary};
