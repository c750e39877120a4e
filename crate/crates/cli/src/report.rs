use std::path::Path;

use serde::Serialize;

use rowtier::selection::{FieldScore, PassStats};
use rowtier::store::MemoryReport;
use rowtier::{Error, Metrics, Model, PruneOutcome, TierHistogram, TrainMode, TrainSummary};

use crate::config::RunConfig;

/// Embedding memory of a model, against the store's own tables and against
/// the FP32 size of every original field (pruned ones included).
#[derive(Debug, Serialize)]
pub struct ModelMemory {
    pub store: MemoryReport,
    pub histogram: TierHistogram,
    pub unpruned_baseline_bytes: usize,
    pub total_ratio_vs_unpruned: f64,
    pub payload_ratio_vs_unpruned: f64,
    pub active_fields: Vec<usize>,
}

impl ModelMemory {
    pub fn of(model: &Model) -> Self {
        let store = model.store().memory_report();
        let base = model.baseline_embedding_bytes() as f64;
        ModelMemory {
            histogram: store.histogram(),
            unpruned_baseline_bytes: model.baseline_embedding_bytes(),
            total_ratio_vs_unpruned: store.total_bytes as f64 / base,
            payload_ratio_vs_unpruned: store.payload_bytes as f64 / base,
            active_fields: model.active_fields(),
            store,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ScoreReport {
    /// Active fields, most important first.
    pub ranked: Vec<FieldScore>,
    pub passes: PassStats,
    pub oracle: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_scores: Option<Vec<FieldScore>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_std_errors: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spearman: Option<f64>,
}

#[derive(Debug, Default, Serialize)]
pub struct PassCounts {
    pub forward_samples: u64,
    pub backward_samples: u64,
}

impl PassCounts {
    pub fn of(model: &Model) -> Self {
        PassCounts {
            forward_samples: model.counters().forward_samples(),
            backward_samples: model.counters().backward_samples(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub command: String,
    pub config: RunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<TrainMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub memory: Option<ModelMemory>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub store: Option<MemoryReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scores: Option<ScoreReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prune: Option<PruneOutcome>,
    pub passes: PassCounts,
    pub wall_time_s: f64,
}

impl RunReport {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        RunReport {
            command: command.to_owned(),
            config: config.clone(),
            mode: None,
            metrics: None,
            memory: None,
            store: None,
            train: None,
            scores: None,
            prune: None,
            passes: PassCounts::default(),
            wall_time_s: 0.0,
        }
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::Io {
            path: path.to_owned(),
            source: e,
        })?;
        Ok(())
    }
}
