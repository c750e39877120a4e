//! Training loop for FP32 and mixed-precision runs.
//!
//! Mixed mode tracks row priorities every batch and re-tiers the store every
//! `retier_every` batches and once more at the end. FP32 mode pins every row
//! to FP32, so a mixed run with `t8 = t16 = 0` follows the same trajectory.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::priority::{AccessCounts, BatchAccess, PriorityConfig, Thresholds, TierHistogram};
use crate::quantizer::{Rounding, RoundingMode, ScalePolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Fp32,
    Mixed,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp32" => Ok(TrainMode::Fp32),
            "mixed" => Ok(TrainMode::Mixed),
            other => Err(Error::Config(format!("unknown train mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantConfig {
    pub thresholds: Thresholds,
    pub priority: PriorityConfig,
    pub retier_every: usize,
    pub rounding: Rounding,
    pub scale_policy: ScalePolicy,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            thresholds: Thresholds::DEFAULT,
            priority: PriorityConfig::default(),
            retier_every: 100,
            rounding: Rounding::Stochastic,
            scale_policy: ScalePolicy::Symmetric,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub quant: QuantConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 512,
            learning_rate: 0.01,
            seed: 0,
            mode: TrainMode::Fp32,
            quant: QuantConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.quant.retier_every == 0 {
            return Err(Error::Config("retier_every must be >= 1".into()));
        }
        self.quant.thresholds.validate()?;
        self.quant.priority.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub batches: usize,
    pub migrations: usize,
    /// Mean batch loss over the last epoch.
    pub last_epoch_loss: f64,
    pub int8_rows: usize,
    pub fp16_rows: usize,
    pub fp32_rows: usize,
}

impl TrainSummary {
    pub fn histogram(&self) -> TierHistogram {
        TierHistogram {
            int8: self.int8_rows,
            fp16: self.fp16_rows,
            fp32: self.fp32_rows,
        }
    }
}

/// Shuffle seed of one epoch.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch as u64
}

/// Positive/negative occurrence counts of every active row in a batch.
pub fn batch_access(model: &Model, data: &Dataset, indices: &[usize]) -> BatchAccess {
    let mut access = BatchAccess::new();
    for f in model.active_fields() {
        let rows = access.entry(f as u32).or_default();
        for &i in indices {
            let c: &mut AccessCounts = rows.entry(data.value(i, f)).or_default();
            if data.label(i) == 1 {
                c.positive += 1;
            } else {
                c.negative += 1;
            }
        }
    }
    access
}

pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let mixed = cfg.mode == TrainMode::Mixed;
    let store = model.store_mut();
    store.set_scale_policy(cfg.quant.scale_policy);
    let thresholds = if mixed {
        cfg.quant.thresholds
    } else {
        Thresholds::ALL_FP32
    };
    store.set_thresholds(thresholds)?;
    store.set_rounding(cfg.quant.rounding.into_mode(cfg.seed ^ 0x5E_ED0F_5EED));
    store.ensure_priority(cfg.quant.priority)?;
    let mut migrations = store.retier()?;

    let mut batches = 0usize;
    let mut last_epoch_loss = 0.0;
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for batch in data.batches(cfg.batch_size, epoch_seed(cfg.seed, epoch)) {
            let cache = model.forward(data, &batch)?;
            let labels: Vec<u8> = batch.iter().map(|&i| data.label(i)).collect();
            let (grads, loss) = model.backward(&cache, &labels)?;
            model.sgd_step(data, &batch, &grads, cfg.learning_rate)?;
            if mixed {
                let access = batch_access(model, data, &batch);
                model
                    .store_mut()
                    .priority_mut()
                    .expect("ensured above")
                    .update_batch(&access)?;
            }
            batches += 1;
            if mixed && batches.is_multiple_of(cfg.quant.retier_every) {
                migrations += model.store_mut().retier()?;
            }
            loss_sum += loss;
            n_batches += 1;
        }
        if n_batches > 0 {
            last_epoch_loss = loss_sum / n_batches as f64;
        }
    }
    migrations += model.store_mut().retier()?;
    // Snapshots and later evaluation read deterministic values.
    model.store_mut().set_rounding(RoundingMode::Nearest);
    let h = model.store().tier_histogram();
    Ok(TrainSummary {
        batches,
        migrations,
        last_epoch_loss,
        int8_rows: h.int8,
        fp16_rows: h.fp16,
        fp32_rows: h.fp32,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetMeta;
    use crate::model::ModelConfig;

    fn setup() -> (Model, Dataset) {
        let meta = DatasetMeta::uniform(4, 20, vec![0, 1], 1.0, 3);
        let data = Dataset::generate_synthetic(meta.clone(), 2000).unwrap();
        let cfg = ModelConfig {
            embedding_dim: 4,
            hidden_dims: vec![8],
            ..ModelConfig::desk()
        };
        (Model::new(cfg, &meta.cardinalities).unwrap(), data)
    }

    #[test]
    fn mixed_with_zero_thresholds_matches_fp32() {
        let (m0, data) = setup();
        let base = TrainConfig {
            epochs: 2,
            batch_size: 64,
            learning_rate: 0.1,
            seed: 9,
            ..Default::default()
        };
        let mut a = m0.clone();
        train(&mut a, &data, &base).unwrap();
        let mut b = m0;
        let mut cfg = base.clone();
        cfg.mode = TrainMode::Mixed;
        cfg.quant.thresholds = Thresholds::ALL_FP32;
        cfg.quant.retier_every = 3;
        train(&mut b, &data, &cfg).unwrap();
        assert_eq!(a.layers(), b.layers());
        assert_eq!(a.predict_logits(&data).unwrap(), b.predict_logits(&data).unwrap());
    }

    #[test]
    fn mixed_default_thresholds_quantize_everything() {
        let (mut m, data) = setup();
        let cfg = TrainConfig {
            mode: TrainMode::Mixed,
            batch_size: 64,
            ..Default::default()
        };
        let s = train(&mut m, &data, &cfg).unwrap();
        assert_eq!(s.fp32_rows, 0);
        assert!(m.embedding_memory_ratio() <= 0.5);
        assert!(m.store().priority().is_some());
    }

    #[test]
    fn training_is_deterministic() {
        let (m0, data) = setup();
        let cfg = TrainConfig {
            mode: TrainMode::Mixed,
            batch_size: 32,
            quant: QuantConfig {
                thresholds: Thresholds::new(5.0, 20.0).unwrap(),
                retier_every: 5,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut a = m0.clone();
        let mut b = m0;
        let sa = train(&mut a, &data, &cfg).unwrap();
        let sb = train(&mut b, &data, &cfg).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(a.store().to_bytes(), b.store().to_bytes());
    }

    #[test]
    fn bad_config_rejected() {
        let (mut m, data) = setup();
        let cfg = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(matches!(train(&mut m, &data, &cfg), Err(Error::Config(_))));
    }
}
