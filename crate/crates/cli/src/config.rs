//! Run configuration: built-in defaults, then an optional TOML file, then
//! command-line flags (each flag also reads a `ROWTIER_*` environment variable).

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use rowtier::train::QuantConfig;
use rowtier::{DatasetMeta, Error, ModelConfig, PruneConfig, TrainConfig, TrainMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_fields: usize,
    /// Cardinality of every field unless `cardinalities` is given.
    pub cardinality: u32,
    pub cardinalities: Option<Vec<u32>>,
    /// The first `informative` fields drive the label.
    pub informative: usize,
    pub zipf_exponent: f64,
    pub n_samples: usize,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_fields: 20,
            cardinality: 1000,
            cardinalities: None,
            informative: 10,
            zipf_exponent: 1.0,
            n_samples: 200_000,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 1,
            batch_size: 256,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds data generation, initialization, batch order, rounding and support sampling.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub quant: QuantConfig,
    pub prune: PruneConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io { path: path.to_owned(), source: e })?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Copies the global seed into every section and checks the result.
    pub fn finish(mut self) -> anyhow::Result<Self> {
        self.model.seed = self.seed;
        self.prune.seed = self.seed;
        self.model.validate()?;
        self.prune.validate()?;
        self.train_config(TrainMode::Fp32).validate()?;
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction must be in (0, 1), got {}",
                self.data.test_fraction
            ))
            .into());
        }
        Ok(self)
    }

    pub fn dataset_meta(&self) -> anyhow::Result<DatasetMeta> {
        let d = &self.data;
        let cardinalities = d
            .cardinalities
            .clone()
            .unwrap_or_else(|| vec![d.cardinality; d.n_fields]);
        if d.informative > d.n_fields {
            return Err(Error::Config(format!(
                "{} informative fields requested of {}",
                d.informative, d.n_fields
            ))
            .into());
        }
        let meta = DatasetMeta {
            n_fields: d.n_fields,
            cardinalities,
            informative_fields: (0..d.informative).collect(),
            zipf_exponent: d.zipf_exponent,
            seed: self.seed,
        };
        meta.validate().context("invalid data section")?;
        Ok(meta)
    }

    pub fn train_config(&self, mode: TrainMode) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.model.learning_rate,
            seed: self.seed,
            mode,
            quant: self.quant.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: RunConfig = toml::from_str(
            "seed = 4\n[quant.thresholds]\nt8 = 5.0\n[model]\nhidden_dims = [8]\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.quant.thresholds.t8, 5.0);
        assert_eq!(cfg.quant.thresholds.t16, 1e5);
        assert_eq!(cfg.model.hidden_dims, vec![8]);
        assert_eq!(cfg.model.embedding_dim, 16);
        assert_eq!(cfg.quant.priority.alpha, 2.0);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("[data]\nfields = 3\n").is_err());
    }

    #[test]
    fn seed_reaches_every_section() {
        let cfg = RunConfig { seed: 9, ..Default::default() }.finish().unwrap();
        assert_eq!(cfg.model.seed, 9);
        assert_eq!(cfg.prune.seed, 9);
        assert_eq!(cfg.train_config(TrainMode::Mixed).seed, 9);
        assert_eq!(cfg.dataset_meta().unwrap().seed, 9);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = RunConfig::default().finish().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), cfg);
    }
}
