//! CTR model: concatenated field embeddings feeding a ReLU MLP with a single
//! sigmoid output, trained on mean log loss with plain SGD.
//!
//! Embeddings live in an [`EmbeddingStore`], one table per field with the
//! field index as table id. Reads dequantize, SGD writes re-quantize at the
//! row's tier. A pruned field has no table; its slice of the input is zero
//! and the matching first-layer columns are held at zero.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{self, Metrics};
use crate::priority::Thresholds;
use crate::quantizer::{RoundingMode, ScalePolicy};
use crate::store::{EmbeddingStore, MixedTable};

mod checkpoint;

pub use checkpoint::{store_path_for, CHECKPOINT_MAGIC};

/// Batch size used by evaluation and scoring sweeps.
pub const EVAL_BATCH: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub learning_rate: f64,
    /// Half-width of the uniform init for MLP weights; `None` uses `1/sqrt(fan_in)`.
    pub init_scale: Option<f64>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding_dim: 16,
            hidden_dims: vec![256, 128],
            learning_rate: 0.01,
            init_scale: None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small network for quick runs: dim 16, hidden [64, 32].
    pub fn desk() -> Self {
        ModelConfig {
            hidden_dims: vec![64, 32],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.embedding_dim > usize::from(u16::MAX) {
            return Err(Error::Config(format!(
                "embedding_dim must be in 1..=65535, got {}",
                self.embedding_dim
            )));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden dims must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if let Some(s) = self.init_scale {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("init_scale must be >= 0, got {s}")));
            }
        }
        Ok(())
    }
}

/// One fully connected layer, `z = W a + b` with `W` shaped `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn init(n_in: usize, n_out: usize, scale: Option<f64>, rng: &mut ChaCha8Rng) -> Self {
        let a = scale.unwrap_or(1.0 / (n_in as f64).sqrt());
        let weights = Array2::from_shape_fn((n_out, n_in), |_| {
            if a > 0.0 {
                rng.random_range(-a..a)
            } else {
                0.0
            }
        });
        Dense {
            weights,
            bias: Array1::zeros(n_out),
        }
    }

    pub fn n_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.weights.nrows()
    }
}

/// Activations retained by [`Model::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub inputs: Array2<f64>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
    logits: Array1<f64>,
}

impl ForwardCache {
    pub fn batch_len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn logits(&self) -> &[f64] {
        self.logits.as_slice().expect("contiguous logits")
    }

    pub fn predictions(&self) -> Vec<f64> {
        self.logits.iter().map(|&z| metrics::sigmoid(z)).collect()
    }

    /// Pre-activation of every layer, output layer last.
    pub fn pre_activations(&self) -> &[Array2<f64>] {
        &self.pre
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Gradients of a batch loss. `embeddings` holds one row per sample with the
/// concatenated per-field gradients `dloss/de_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub embeddings: Array2<f64>,
    pub layers: Vec<LayerGrad>,
    dim: usize,
}

impl GradientBundle {
    pub fn embedding(&self, sample: usize, field: usize) -> ArrayView1<'_, f64> {
        self.embeddings
            .slice(s![sample, field * self.dim..(field + 1) * self.dim])
    }
}

/// Running totals of samples pushed through forward and backward.
#[derive(Debug, Default)]
pub struct PassCounters {
    forward: AtomicU64,
    backward: AtomicU64,
}

impl PassCounters {
    pub fn forward_samples(&self) -> u64 {
        self.forward.load(Ordering::Relaxed)
    }

    pub fn backward_samples(&self) -> u64 {
        self.backward.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.forward.store(0, Ordering::Relaxed);
        self.backward.store(0, Ordering::Relaxed);
    }
}

impl Clone for PassCounters {
    fn clone(&self) -> Self {
        PassCounters {
            forward: AtomicU64::new(self.forward_samples()),
            backward: AtomicU64::new(self.backward_samples()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    cardinalities: Vec<u32>,
    active: Vec<bool>,
    store: EmbeddingStore,
    layers: Vec<Dense>,
    counters: PassCounters,
}

impl Model {
    /// Random init: embeddings uniform in `±1/sqrt(dim)` stored at FP32,
    /// MLP weights uniform in `±init_scale`, biases zero.
    pub fn new(config: ModelConfig, cardinalities: &[u32]) -> Result<Self> {
        config.validate()?;
        if cardinalities.is_empty() {
            return Err(Error::Config("model needs at least one field".into()));
        }
        let dim = config.embedding_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = EmbeddingStore::new(ScalePolicy::Symmetric, RoundingMode::Nearest);
        let a = 1.0 / (dim as f64).sqrt();
        let mut row = vec![0.0; dim];
        for (field, &card) in cardinalities.iter().enumerate() {
            let mut table = MixedTable::new(field as u32, card as usize, dim, Thresholds::ALL_FP32)?;
            for r in 0..card as usize {
                row.iter_mut().for_each(|x| *x = rng.random_range(-a..a));
                table.write(r, &row, ScalePolicy::Symmetric, &mut RoundingMode::Nearest)?;
            }
            store.add_table(table)?;
        }
        let mut widths = vec![cardinalities.len() * dim];
        widths.extend(&config.hidden_dims);
        widths.push(1);
        let layers = widths
            .windows(2)
            .map(|w| Dense::init(w[0], w[1], config.init_scale, &mut rng))
            .collect();
        Ok(Model {
            config,
            cardinalities: cardinalities.to_vec(),
            active: vec![true; cardinalities.len()],
            store,
            layers,
            counters: PassCounters::default(),
        })
    }

    /// Assembles a model from parts; used by checkpoint loading and tests.
    pub fn from_parts(
        config: ModelConfig,
        cardinalities: Vec<u32>,
        active: Vec<bool>,
        store: EmbeddingStore,
        layers: Vec<Dense>,
    ) -> Result<Self> {
        config.validate()?;
        let n = cardinalities.len();
        let dim = config.embedding_dim;
        if active.len() != n {
            return Err(Error::Shape(format!("{} active flags for {n} fields", active.len())));
        }
        let mut expected_in = n * dim;
        for (i, l) in layers.iter().enumerate() {
            if l.n_in() != expected_in || l.bias.len() != l.n_out() {
                return Err(Error::Shape(format!(
                    "layer {i} is {}x{} with bias {}, expected input width {expected_in}",
                    l.n_out(),
                    l.n_in(),
                    l.bias.len()
                )));
            }
            expected_in = l.n_out();
        }
        if expected_in != 1 || layers.is_empty() {
            return Err(Error::Shape("last layer must have a single output".into()));
        }
        for (f, &card) in cardinalities.iter().enumerate() {
            match (active[f], store.table(f as u32)) {
                (true, Ok(t)) if t.n_rows() == card as usize && t.dim() == dim => {}
                (false, Err(_)) => {}
                (true, _) => {
                    return Err(Error::Shape(format!(
                        "field {f}: store table missing or not {card}x{dim}"
                    )))
                }
                (false, Ok(_)) => {
                    return Err(Error::Shape(format!("pruned field {f} still has a table")))
                }
            }
        }
        Ok(Model {
            config,
            cardinalities,
            active,
            store,
            layers,
            counters: PassCounters::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_fields(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn dim(&self) -> usize {
        self.config.embedding_dim
    }

    pub fn input_width(&self) -> usize {
        self.n_fields() * self.dim()
    }

    pub fn cardinalities(&self) -> &[u32] {
        &self.cardinalities
    }

    pub fn is_active(&self, field: usize) -> bool {
        self.active.get(field).copied().unwrap_or(false)
    }

    pub fn active_mask(&self) -> &[bool] {
        &self.active
    }

    pub fn active_fields(&self) -> Vec<usize> {
        (0..self.n_fields()).filter(|&f| self.active[f]).collect()
    }

    pub fn store(&self) -> &EmbeddingStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut EmbeddingStore {
        &mut self.store
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn counters(&self) -> &PassCounters {
        &self.counters
    }

    /// Number of trainable scalars, embeddings included.
    pub fn parameter_count(&self) -> usize {
        let emb: usize = self.store.tables().iter().map(|t| t.n_rows() * t.dim()).sum();
        emb + self
            .layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum::<usize>()
    }

    /// FP32 payload bytes of every field's table, pruned ones included.
    pub fn baseline_embedding_bytes(&self) -> usize {
        self.cardinalities
            .iter()
            .map(|&c| 4 * c as usize * self.dim())
            .sum()
    }

    /// Current embedding payload bytes over [`Self::baseline_embedding_bytes`].
    pub fn embedding_memory_ratio(&self) -> f64 {
        self.store.memory_report().payload_bytes as f64 / self.baseline_embedding_bytes() as f64
    }

    /// Copies the embedding of `value` in `field` into `out`; zeros for a pruned field.
    pub fn embedding_into(&self, field: usize, value: u32, out: &mut [f64]) -> Result<()> {
        if field >= self.n_fields() {
            return Err(Error::Lookup(format!("field {field} of {}", self.n_fields())));
        }
        if !self.active[field] {
            if value >= self.cardinalities[field] {
                return Err(Error::Lookup(format!(
                    "value {value} out of range for field {field}"
                )));
            }
            out.iter_mut().for_each(|x| *x = 0.0);
            return Ok(());
        }
        self.store.lookup_into(field as u32, value as usize, out)
    }

    /// Input matrix (one row per sample) for the given dataset rows.
    pub fn embed(&self, data: &Dataset, indices: &[usize]) -> Result<Array2<f64>> {
        if data.n_fields() != self.n_fields() {
            return Err(Error::Shape(format!(
                "dataset has {} fields, model {}",
                data.n_fields(),
                self.n_fields()
            )));
        }
        let dim = self.dim();
        let mut x = Array2::zeros((indices.len(), self.input_width()));
        for (b, &i) in indices.iter().enumerate() {
            let row = data.row(i);
            let mut xb = x.row_mut(b);
            let out = xb.as_slice_mut().expect("standard layout");
            for (f, &v) in row.iter().enumerate() {
                self.embedding_into(f, v, &mut out[f * dim..(f + 1) * dim])?;
            }
        }
        Ok(x)
    }

    pub fn forward(&self, data: &Dataset, indices: &[usize]) -> Result<ForwardCache> {
        let x = self.embed(data, indices)?;
        self.forward_inputs(x)
    }

    /// Forward pass on already-assembled inputs.
    pub fn forward_inputs(&self, inputs: Array2<f64>) -> Result<ForwardCache> {
        if inputs.ncols() != self.input_width() {
            return Err(Error::Shape(format!(
                "input width {} for model width {}",
                inputs.ncols(),
                self.input_width()
            )));
        }
        self.counters
            .forward
            .fetch_add(inputs.nrows() as u64, Ordering::Relaxed);
        let n_layers = self.layers.len();
        let mut pre = Vec::with_capacity(n_layers);
        let mut post: Vec<Array2<f64>> = Vec::with_capacity(n_layers - 1);
        for (l, layer) in self.layers.iter().enumerate() {
            let a = if l == 0 { &inputs } else { &post[l - 1] };
            let z = a.dot(&layer.weights.t()) + &layer.bias;
            if l + 1 < n_layers {
                post.push(z.mapv(|v| v.max(0.0)));
            }
            pre.push(z);
        }
        let logits = pre
            .last()
            .expect("at least one layer")
            .column(0)
            .to_owned();
        Ok(ForwardCache {
            inputs,
            pre,
            post,
            logits,
        })
    }

    /// Exact gradients of the batch-mean log loss. Returns the gradients and the mean loss.
    pub fn backward(&self, cache: &ForwardCache, labels: &[u8]) -> Result<(GradientBundle, f64)> {
        let targets: Vec<f64> = labels.iter().map(|&y| f64::from(y)).collect();
        let n = cache.batch_len().max(1) as f64;
        let grads = self.backward_targets(cache, &targets, 1.0 / n)?;
        Ok((grads, metrics::mean_logloss(cache.logits(), labels)))
    }

    /// Per-sample (unaveraged) loss gradients, as used by importance scoring.
    pub fn backward_per_sample(&self, cache: &ForwardCache, labels: &[u8]) -> Result<GradientBundle> {
        let targets: Vec<f64> = labels.iter().map(|&y| f64::from(y)).collect();
        self.backward_targets(cache, &targets, 1.0)
    }

    /// Backward pass against real-valued targets, with the output error
    /// `(p - target)` multiplied by `scale`.
    pub fn backward_targets(
        &self,
        cache: &ForwardCache,
        targets: &[f64],
        scale: f64,
    ) -> Result<GradientBundle> {
        let b = cache.batch_len();
        if targets.len() != b || cache.pre.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "{} targets for cached batch of {b}",
                targets.len()
            )));
        }
        self.counters.backward.fetch_add(b as u64, Ordering::Relaxed);

        let mut delta = Array2::from_shape_fn((b, 1), |(i, _)| {
            (metrics::sigmoid(cache.logits[i]) - targets[i]) * scale
        });
        let mut layer_grads = Vec::with_capacity(self.layers.len());
        let mut input_grad = None;
        for l in (0..self.layers.len()).rev() {
            let a_prev = if l == 0 { &cache.inputs } else { &cache.post[l - 1] };
            let w = delta.t().dot(a_prev);
            let bias = delta.sum_axis(Axis(0));
            let mut d_prev = delta.dot(&self.layers[l].weights);
            layer_grads.push(LayerGrad { weights: w, bias });
            if l > 0 {
                ndarray::Zip::from(&mut d_prev)
                    .and(&cache.pre[l - 1])
                    .for_each(|d, &z| {
                        if z <= 0.0 {
                            *d = 0.0;
                        }
                    });
                delta = d_prev;
            } else {
                input_grad = Some(d_prev);
            }
        }
        layer_grads.reverse();

        let dim = self.dim();
        for f in (0..self.n_fields()).filter(|&f| !self.active[f]) {
            layer_grads[0]
                .weights
                .slice_mut(s![.., f * dim..(f + 1) * dim])
                .fill(0.0);
        }
        Ok(GradientBundle {
            embeddings: input_grad.expect("layer 0 visited"),
            layers: layer_grads,
            dim,
        })
    }

    /// `w <- w - lr * g` for every parameter. Embedding rows touched by the
    /// batch are read, updated in f64 and written back through the store.
    pub fn sgd_step(
        &mut self,
        data: &Dataset,
        indices: &[usize],
        grads: &GradientBundle,
        lr: f64,
    ) -> Result<()> {
        if grads.embeddings.nrows() != indices.len() || grads.layers.len() != self.layers.len() {
            return Err(Error::Shape("gradients do not match batch or model".into()));
        }
        if lr == 0.0 {
            return Ok(());
        }
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            layer.weights.scaled_add(-lr, &g.weights);
            layer.bias.scaled_add(-lr, &g.bias);
        }

        let dim = self.dim();
        let mut pairs: Vec<(u32, usize)> = Vec::with_capacity(indices.len());
        let mut acc = vec![0.0; dim];
        let mut row = vec![0.0; dim];
        for f in 0..self.n_fields() {
            if !self.active[f] {
                continue;
            }
            pairs.clear();
            pairs.extend(indices.iter().enumerate().map(|(b, &i)| (data.value(i, f), b)));
            pairs.sort_unstable();
            let mut start = 0;
            while start < pairs.len() {
                let value = pairs[start].0;
                let mut end = start;
                acc.iter_mut().for_each(|a| *a = 0.0);
                while end < pairs.len() && pairs[end].0 == value {
                    let g = grads.embedding(pairs[end].1, f);
                    acc.iter_mut().zip(g.iter()).for_each(|(a, &x)| *a += x);
                    end += 1;
                }
                self.store.lookup_into(f as u32, value as usize, &mut row)?;
                row.iter_mut().zip(&acc).for_each(|(r, a)| *r -= lr * a);
                self.store.write(f as u32, value as usize, &row)?;
                start = end;
            }
        }
        Ok(())
    }

    /// Logits for every sample, in dataset order.
    pub fn predict_logits(&self, data: &Dataset) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(data.len());
        for batch in data.sequential_batches(EVAL_BATCH) {
            out.extend_from_slice(self.forward(data, &batch)?.logits());
        }
        Ok(out)
    }

    /// Pooled AUC and mean log loss over the whole dataset.
    pub fn evaluate(&self, data: &Dataset) -> Result<Metrics> {
        let logits = self.predict_logits(data)?;
        let logloss = metrics::mean_logloss(&logits, data.labels());
        let auc = match metrics::auc(&logits, data.labels()) {
            Ok(a) => Some(a),
            Err(Error::UndefinedAuc) => None,
            Err(e) => return Err(e),
        };
        Ok(Metrics { auc, logloss })
    }

    /// Drops the fields' tables and zeroes their first-layer columns.
    pub fn delete_fields(&mut self, fields: &[usize]) -> Result<()> {
        let dim = self.dim();
        for &f in fields {
            if !self.is_active(f) {
                return Err(Error::Validation(format!("field {f} is not active")));
            }
        }
        for &f in fields {
            self.store.remove_table(f as u32);
            self.active[f] = false;
            self.layers[0]
                .weights
                .slice_mut(s![.., f * dim..(f + 1) * dim])
                .fill(0.0);
        }
        Ok(())
    }
}
