//! Field importance and iterative field pruning.
//!
//! The importance of field `i` is the expected loss increase when its value
//! in a sample is replaced by a value drawn from the field's empirical
//! distribution. [`taylor_scores`] estimates it for every field at once from
//! a first-order expansion around the observed embedding:
//!
//! ```text
//! w_i = 1/|D| * sum_x  dloss(x)/de_i . (E[e_i] - e_i(x))
//! ```
//!
//! which needs one sweep to compute `E[e_i]` and one forward/backward sweep,
//! whatever the number of fields. [`permutation_error_exact`] and
//! [`permutation_error_shuffle`] compute the quantity being approximated and
//! serve as oracles.

use std::collections::BTreeSet;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{Model, EVAL_BATCH};
use crate::train::{train, TrainConfig};

/// Largest field cardinality [`permutation_error_exact`] will enumerate.
pub const EXACT_CARDINALITY_GUARD: usize = 256;

/// What importance scoring needs from a model: per-field embeddings and
/// per-sample losses and input gradients over concatenated embeddings.
pub trait FieldModel {
    fn n_fields(&self) -> usize;
    fn embedding_dim(&self) -> usize;
    fn is_field_active(&self, field: usize) -> bool;
    fn field_cardinality(&self, field: usize) -> usize;
    fn embedding_into(&self, field: usize, value: u32, out: &mut [f64]) -> Result<()>;
    /// Loss of each row of `inputs` (`batch x n_fields*dim`).
    fn sample_losses(&self, inputs: Array2<f64>, labels: &[u8]) -> Result<Vec<f64>>;
    /// Per-sample losses and `dloss(x)/d inputs(x)` for each row.
    fn losses_and_input_grads(
        &self,
        inputs: Array2<f64>,
        labels: &[u8],
    ) -> Result<(Vec<f64>, Array2<f64>)>;
}

impl FieldModel for Model {
    fn n_fields(&self) -> usize {
        Model::n_fields(self)
    }

    fn embedding_dim(&self) -> usize {
        self.dim()
    }

    fn is_field_active(&self, field: usize) -> bool {
        self.is_active(field)
    }

    fn field_cardinality(&self, field: usize) -> usize {
        self.cardinalities()[field] as usize
    }

    fn embedding_into(&self, field: usize, value: u32, out: &mut [f64]) -> Result<()> {
        Model::embedding_into(self, field, value, out)
    }

    fn sample_losses(&self, inputs: Array2<f64>, labels: &[u8]) -> Result<Vec<f64>> {
        let cache = self.forward_inputs(inputs)?;
        Ok(cache
            .logits()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| metrics::logloss_from_logit(z, y))
            .collect())
    }

    fn losses_and_input_grads(
        &self,
        inputs: Array2<f64>,
        labels: &[u8],
    ) -> Result<(Vec<f64>, Array2<f64>)> {
        let cache = self.forward_inputs(inputs)?;
        let grads = self.backward_per_sample(&cache, labels)?;
        let losses = cache
            .logits()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| metrics::logloss_from_logit(z, y))
            .collect();
        Ok((losses, grads.embeddings))
    }
}

/// Concatenated embeddings of the given samples.
pub fn assemble<M: FieldModel + ?Sized>(
    model: &M,
    data: &Dataset,
    indices: &[usize],
) -> Result<Array2<f64>> {
    let n = model.n_fields();
    if data.n_fields() != n {
        return Err(Error::Shape(format!(
            "dataset has {} fields, model {n}",
            data.n_fields()
        )));
    }
    let dim = model.embedding_dim();
    let mut x = Array2::zeros((indices.len(), n * dim));
    for (b, &i) in indices.iter().enumerate() {
        let mut row = x.row_mut(b);
        let out = row.as_slice_mut().expect("standard layout");
        for (f, &v) in data.row(i).iter().enumerate() {
            model.embedding_into(f, v, &mut out[f * dim..(f + 1) * dim])?;
        }
    }
    Ok(x)
}

fn labels_of(data: &Dataset, indices: &[usize]) -> Vec<u8> {
    indices.iter().map(|&i| data.label(i)).collect()
}

/// Samples visited by each kind of sweep during scoring.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassStats {
    pub dataset_len: u64,
    pub expectation_samples: u64,
    pub forward_samples: u64,
    pub backward_samples: u64,
}

impl PassStats {
    fn passes(&self, samples: u64) -> f64 {
        if self.dataset_len == 0 {
            0.0
        } else {
            samples as f64 / self.dataset_len as f64
        }
    }

    pub fn expectation_passes(&self) -> f64 {
        self.passes(self.expectation_samples)
    }

    pub fn forward_passes(&self) -> f64 {
        self.passes(self.forward_samples)
    }

    pub fn backward_passes(&self) -> f64 {
        self.passes(self.backward_samples)
    }

    /// Total sample visits over dataset size; 3 for one scoring run.
    pub fn total_passes(&self) -> f64 {
        self.passes(self.expectation_samples + self.forward_samples + self.backward_samples)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldScore {
    pub field: usize,
    pub score: f64,
}

/// Importance score per active field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableScoreList {
    pub scores: Vec<FieldScore>,
    pub passes: PassStats,
}

impl TableScoreList {
    pub fn active_fields(&self) -> BTreeSet<usize> {
        self.scores.iter().map(|s| s.field).collect()
    }

    pub fn score(&self, field: usize) -> Option<f64> {
        self.scores.iter().find(|s| s.field == field).map(|s| s.score)
    }

    pub fn values(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s.score).collect()
    }

    /// Fields ordered from least to most important; ties broken by lower index.
    pub fn ascending(&self) -> Vec<usize> {
        let mut v = self.scores.clone();
        v.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.field.cmp(&b.field)));
        v.into_iter().map(|s| s.field).collect()
    }

    pub fn lowest(&self, k: usize) -> Vec<usize> {
        self.ascending().into_iter().take(k).collect()
    }
}

/// Mean embedding of each active field over the dataset (`None` for pruned fields).
pub fn field_expectations<M: FieldModel + ?Sized>(
    model: &M,
    data: &Dataset,
    stats: &mut PassStats,
) -> Result<Vec<Option<Vec<f64>>>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = model.embedding_dim();
    let n = model.n_fields();
    let mut sums: Vec<Option<Vec<f64>>> = (0..n)
        .map(|f| model.is_field_active(f).then(|| vec![0.0; dim]))
        .collect();
    let mut buf = vec![0.0; dim];
    for i in 0..data.len() {
        for (f, &v) in data.row(i).iter().enumerate() {
            if let Some(sum) = &mut sums[f] {
                model.embedding_into(f, v, &mut buf)?;
                sum.iter_mut().zip(&buf).for_each(|(s, x)| *s += x);
            }
        }
        stats.expectation_samples += 1;
    }
    let total = data.len() as f64;
    for s in sums.iter_mut().flatten() {
        s.iter_mut().for_each(|x| *x /= total);
    }
    Ok(sums)
}

/// First-order importance score of every active field.
pub fn taylor_scores<M: FieldModel + ?Sized>(model: &M, data: &Dataset) -> Result<TableScoreList> {
    let mut stats = PassStats {
        dataset_len: data.len() as u64,
        ..Default::default()
    };
    let expectations = field_expectations(model, data, &mut stats)?;
    let dim = model.embedding_dim();
    let mut sums = vec![0.0; model.n_fields()];

    for batch in data.sequential_batches(EVAL_BATCH) {
        let inputs = assemble(model, data, &batch)?;
        let labels = labels_of(data, &batch);
        let (_, grads) = model.losses_and_input_grads(inputs.clone(), &labels)?;
        stats.forward_samples += batch.len() as u64;
        stats.backward_samples += batch.len() as u64;
        for (f, expectation) in expectations.iter().enumerate() {
            let Some(mean) = expectation else { continue };
            let cols = s![.., f * dim..(f + 1) * dim];
            let g = grads.slice(cols);
            let e = inputs.slice(cols);
            let mut acc = 0.0;
            for (g_row, e_row) in g.outer_iter().zip(e.outer_iter()) {
                for k in 0..dim {
                    acc += g_row[k] * (mean[k] - e_row[k]);
                }
            }
            sums[f] += acc;
        }
    }
    let total = data.len() as f64;
    let scores = expectations
        .iter()
        .enumerate()
        .filter(|(_, e)| e.is_some())
        .map(|(field, _)| FieldScore {
            field,
            score: sums[field] / total,
        })
        .collect();
    Ok(TableScoreList {
        scores,
        passes: stats,
    })
}

/// Expected loss increase from substituting field `field`'s embedding with
/// that of every value in its empirical distribution, enumerated exactly.
pub fn permutation_error_exact<M: FieldModel + ?Sized>(
    model: &M,
    data: &Dataset,
    field: usize,
) -> Result<f64> {
    if field >= model.n_fields() {
        return Err(Error::Lookup(format!("field {field} of {}", model.n_fields())));
    }
    let card = model.field_cardinality(field);
    if card > EXACT_CARDINALITY_GUARD {
        return Err(Error::Refused(format!(
            "field {field} has cardinality {card} > {EXACT_CARDINALITY_GUARD}; use the shuffle estimate"
        )));
    }
    let dist = data.empirical_distribution()?;
    let probs = dist.field(field);
    let dim = model.embedding_dim();
    let candidates: Vec<(f64, Vec<f64>)> = probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(v, &p)| {
            let mut e = vec![0.0; dim];
            model.embedding_into(field, v as u32, &mut e).map(|_| (p, e))
        })
        .collect::<Result<_>>()?;

    let mut total = 0.0;
    for batch in data.sequential_batches(EVAL_BATCH) {
        let inputs = assemble(model, data, &batch)?;
        let labels = labels_of(data, &batch);
        let base = model.sample_losses(inputs.clone(), &labels)?;
        let mut expected = vec![0.0; batch.len()];
        for (p, e) in &candidates {
            let mut x = inputs.clone();
            for mut row in x.slice_mut(s![.., field * dim..(field + 1) * dim]).outer_iter_mut() {
                row.iter_mut().zip(e).for_each(|(r, &v)| *r = v);
            }
            let losses = model.sample_losses(x, &labels)?;
            expected.iter_mut().zip(&losses).for_each(|(a, l)| *a += p * l);
        }
        total += expected.iter().zip(&base).map(|(a, b)| a - b).sum::<f64>();
    }
    Ok(total / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShuffleOptions {
    /// Number of shuffles `T`.
    pub rounds: usize,
    pub seed: u64,
    /// Shuffle within batches of this size; `None` shuffles across the whole dataset.
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShuffleEstimate {
    pub mean: f64,
    /// Standard deviation of the per-round values over `sqrt(rounds)`.
    pub std_error: f64,
    pub rounds: usize,
}

/// Monte-Carlo permutation importance: mean loss increase after permuting
/// field `field` across samples, averaged over `rounds` shuffles.
pub fn permutation_error_shuffle<M: FieldModel + ?Sized>(
    model: &M,
    data: &Dataset,
    field: usize,
    opts: ShuffleOptions,
) -> Result<ShuffleEstimate> {
    if opts.rounds == 0 {
        return Err(Error::Config("shuffle rounds must be >= 1".into()));
    }
    if field >= model.n_fields() {
        return Err(Error::Lookup(format!("field {field} of {}", model.n_fields())));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = model.embedding_dim();
    let bs = opts.batch_size.unwrap_or(data.len()).max(1);
    let cols = s![.., field * dim..(field + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut round_values = Vec::with_capacity(opts.rounds);
    for _ in 0..opts.rounds {
        let mut total = 0.0;
        for batch in data.sequential_batches(bs) {
            let inputs = assemble(model, data, &batch)?;
            let labels = labels_of(data, &batch);
            let mut perm: Vec<usize> = (0..batch.len()).collect();
            perm.shuffle(&mut rng);
            let mut x = inputs.clone();
            let src = inputs.slice(cols);
            for (b, &p) in perm.iter().enumerate() {
                x.slice_mut(s![b, field * dim..(field + 1) * dim])
                    .assign(&src.row(p));
            }
            let base = model.sample_losses(inputs, &labels)?;
            let shuffled = model.sample_losses(x, &labels)?;
            total += shuffled.iter().zip(&base).map(|(a, b)| a - b).sum::<f64>();
        }
        round_values.push(total / data.len() as f64);
    }
    let t = round_values.len() as f64;
    let mean = round_values.iter().sum::<f64>() / t;
    let std_error = if round_values.len() > 1 {
        let var = round_values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (t - 1.0);
        (var / t).sqrt()
    } else {
        0.0
    };
    Ok(ShuffleEstimate {
        mean,
        std_error,
        rounds: opts.rounds,
    })
}

/// Data used for the expectation and gradient sweep of each pruning iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpectationSource {
    #[default]
    Test,
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    /// Tables removed per iteration (`f`).
    pub fields_per_iteration: usize,
    /// Stop once the embedding memory ratio is at or below this.
    pub rate_c: f64,
    /// Stop when AUC falls below this fraction of the baseline AUC.
    pub t_accuracy: f64,
    pub support_fraction: f64,
    pub finetune_epochs: usize,
    pub expectation_source: ExpectationSource,
    pub seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            fields_per_iteration: 1,
            rate_c: 0.6,
            t_accuracy: 0.9985,
            support_fraction: 0.1,
            finetune_epochs: 1,
            expectation_source: ExpectationSource::Test,
            seed: 0,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fields_per_iteration == 0 {
            return Err(Error::Config("fields_per_iteration must be >= 1".into()));
        }
        if !(self.rate_c > 0.0 && self.rate_c <= 1.0) {
            return Err(Error::Config(format!("rate_c must be in (0, 1], got {}", self.rate_c)));
        }
        if !(self.t_accuracy > 0.0 && self.t_accuracy <= 1.0) {
            return Err(Error::Config(format!(
                "t_accuracy must be in (0, 1], got {}",
                self.t_accuracy
            )));
        }
        if !(self.support_fraction > 0.0 && self.support_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "support_fraction must be in (0, 1], got {}",
                self.support_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub scores: Vec<FieldScore>,
    pub deleted_fields: Vec<usize>,
    pub auc: f64,
    pub logloss: f64,
    pub memory_ratio: f64,
    /// False when this iteration broke the metric floor and was rolled back.
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Memory ratio reached `rate_c`.
    TargetReached,
    /// An iteration fell below the metric floor; its deletion was undone.
    MetricFloor,
    /// Fewer active fields than `fields_per_iteration`.
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneOutcome {
    pub baseline_auc: f64,
    pub baseline_logloss: f64,
    pub final_auc: f64,
    pub final_memory_ratio: f64,
    pub stop: StopReason,
    pub log: Vec<IterationRecord>,
}

impl PruneOutcome {
    /// Deleted fields of accepted iterations, in deletion order.
    pub fn deleted_fields(&self) -> Vec<usize> {
        self.log
            .iter()
            .filter(|r| r.accepted)
            .flat_map(|r| r.deleted_fields.iter().copied())
            .collect()
    }
}

/// Score, delete the `f` lowest-scoring tables, fine-tune on a support
/// sample of `train`, evaluate on `test`; repeat while the memory ratio is
/// above `rate_c` and AUC stays at or above `t_accuracy * baseline`.
pub fn prune_loop(
    model: &mut Model,
    train_data: &Dataset,
    test_data: &Dataset,
    cfg: &PruneConfig,
    finetune: &TrainConfig,
) -> Result<PruneOutcome> {
    prune_loop_with(model, train_data, test_data, cfg, finetune, |_, _| Ok(()))
}

/// [`prune_loop`], calling `on_accept` with each accepted iteration and the
/// model it produced (e.g. to checkpoint it).
pub fn prune_loop_with(
    model: &mut Model,
    train_data: &Dataset,
    test_data: &Dataset,
    cfg: &PruneConfig,
    finetune: &TrainConfig,
    mut on_accept: impl FnMut(&IterationRecord, &Model) -> Result<()>,
) -> Result<PruneOutcome> {
    cfg.validate()?;
    let baseline = model.evaluate(test_data)?;
    let baseline_auc = baseline.auc()?;
    let floor = cfg.t_accuracy * baseline_auc;
    let mut auc = baseline_auc;
    let mut ratio = model.embedding_memory_ratio();
    let mut log = Vec::new();
    let scoring_data = match cfg.expectation_source {
        ExpectationSource::Test => test_data,
        ExpectationSource::Train => train_data,
    };

    let stop = loop {
        if ratio <= cfg.rate_c {
            break StopReason::TargetReached;
        }
        if model.active_fields().len() < cfg.fields_per_iteration {
            break StopReason::Exhausted;
        }
        let iteration = log.len();
        let scores = taylor_scores(model, scoring_data)?;
        let deleted = scores.lowest(cfg.fields_per_iteration);

        let snapshot = model.clone();
        model.delete_fields(&deleted)?;
        let support = train_data.sample_fraction(
            cfg.support_fraction,
            cfg.seed.wrapping_add(iteration as u64),
        );
        let ft = TrainConfig {
            epochs: cfg.finetune_epochs,
            seed: finetune.seed.wrapping_add(1 + iteration as u64),
            ..finetune.clone()
        };
        train(model, &support, &ft)?;
        let m = model.evaluate(test_data)?;
        let new_auc = m.auc()?;
        let new_ratio = model.embedding_memory_ratio();
        let accepted = new_auc >= floor;
        log.push(IterationRecord {
            iteration,
            scores: scores.scores,
            deleted_fields: deleted,
            auc: new_auc,
            logloss: m.logloss,
            memory_ratio: new_ratio,
            accepted,
        });
        if !accepted {
            *model = snapshot;
            break StopReason::MetricFloor;
        }
        on_accept(log.last().expect("just pushed"), model)?;
        auc = new_auc;
        ratio = new_ratio;
    };

    Ok(PruneOutcome {
        baseline_auc,
        baseline_logloss: baseline.logloss,
        final_auc: auc,
        final_memory_ratio: ratio,
        stop,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DatasetMeta, Sample};

    /// Scalar embeddings with loss `(2y - 1) * sum_i c_i * e_i`, so the
    /// first-order score is exact.
    struct Linear {
        coef: Vec<f64>,
        tables: Vec<Vec<f64>>,
    }

    impl FieldModel for Linear {
        fn n_fields(&self) -> usize {
            self.coef.len()
        }
        fn embedding_dim(&self) -> usize {
            1
        }
        fn is_field_active(&self, _: usize) -> bool {
            true
        }
        fn field_cardinality(&self, f: usize) -> usize {
            self.tables[f].len()
        }
        fn embedding_into(&self, f: usize, v: u32, out: &mut [f64]) -> Result<()> {
            out[0] = self.tables[f][v as usize];
            Ok(())
        }
        fn sample_losses(&self, x: Array2<f64>, y: &[u8]) -> Result<Vec<f64>> {
            Ok(x.outer_iter()
                .zip(y)
                .map(|(r, &y)| sign(y) * r.iter().zip(&self.coef).map(|(a, c)| a * c).sum::<f64>())
                .collect())
        }
        fn losses_and_input_grads(&self, x: Array2<f64>, y: &[u8]) -> Result<(Vec<f64>, Array2<f64>)> {
            let g = Array2::from_shape_fn(x.raw_dim(), |(i, j)| sign(y[i]) * self.coef[j]);
            Ok((self.sample_losses(x, y)?, g))
        }
    }

    fn sign(y: u8) -> f64 {
        2.0 * f64::from(y) - 1.0
    }

    fn data(samples: &[(Vec<u32>, u8)], card: u32) -> Dataset {
        let n = samples[0].0.len();
        let meta = DatasetMeta::uniform(n, card, vec![], 0.0, 0);
        let s: Vec<Sample> = samples.iter().map(|(v, y)| Sample::new(v.clone(), *y)).collect();
        Dataset::from_samples(meta, &s).unwrap()
    }

    #[test]
    fn identical_rows_score_zero() {
        let m = Linear {
            coef: vec![1.0, -2.0],
            tables: vec![vec![0.7; 3], vec![0.1, 0.5, -0.4]],
        };
        let d = data(&[(vec![0, 1], 1), (vec![2, 2], 0), (vec![1, 0], 1)], 3);
        let s = taylor_scores(&m, &d).unwrap();
        assert!(s.score(0).unwrap().abs() < 1e-12);
        assert!(s.score(1).unwrap() > 1e-3);
        assert_eq!(s.lowest(1), vec![0]);
    }

    #[test]
    fn single_observed_value_has_zero_exact_error() {
        let m = Linear {
            coef: vec![3.0, 1.0],
            tables: vec![vec![0.2, 0.9], vec![1.0, -1.0]],
        };
        let d = data(&[(vec![1, 0], 1), (vec![1, 1], 0)], 2);
        assert_eq!(permutation_error_exact(&m, &d, 0).unwrap(), 0.0);
    }

    #[test]
    fn exact_error_matches_hand_enumeration() {
        // N=2, card 3, 5 samples, loss = (2y - 1)(2 e_0 - e_1).
        let m = Linear {
            coef: vec![2.0, -1.0],
            tables: vec![vec![0.5, -1.0, 2.0], vec![0.3, 0.0, -0.6]],
        };
        let rows = [vec![0, 1], vec![1, 1], vec![2, 0], vec![0, 2], vec![0, 0]];
        let labels = [1u8, 0, 1, 1, 0];
        let d = data(&rows.iter().cloned().zip(labels).collect::<Vec<_>>(), 3);
        // field 0 values {0,1,2} occur {3,1,1} times.
        let p = [0.6, 0.2, 0.2];
        let t = &m.tables[0];
        let mut oracle = 0.0;
        for (r, &y) in rows.iter().zip(&labels) {
            let base = sign(y) * 2.0 * t[r[0] as usize];
            let subst: f64 = (0..3).map(|v| p[v] * sign(y) * 2.0 * t[v]).sum();
            oracle += subst - base;
        }
        assert!(oracle.abs() > 0.1);
        oracle /= 5.0;
        let exact = permutation_error_exact(&m, &d, 0).unwrap();
        assert!((exact - oracle).abs() < 1e-12);
        let taylor = taylor_scores(&m, &d).unwrap();
        assert!((taylor.score(0).unwrap() - exact).abs() < 1e-12);
    }

    #[test]
    fn shuffle_ignored_field_is_zero_and_seeded() {
        let m = Linear {
            coef: vec![0.0, 1.0],
            tables: vec![vec![0.5, -1.0, 2.0], vec![0.3, 0.0, -0.6]],
        };
        let d = data(&[(vec![0, 1], 0), (vec![2, 2], 0), (vec![1, 0], 1), (vec![1, 2], 1)], 3);
        let o = ShuffleOptions { rounds: 5, seed: 3, batch_size: Some(2) };
        assert_eq!(permutation_error_shuffle(&m, &d, 0, o).unwrap().mean, 0.0);
        let a = permutation_error_shuffle(&m, &d, 1, o).unwrap();
        let b = permutation_error_shuffle(&m, &d, 1, o).unwrap();
        assert_eq!(a, b);
        assert!(permutation_error_shuffle(&m, &d, 1, ShuffleOptions { rounds: 0, ..o }).is_err());
    }

    #[test]
    fn exact_refuses_large_cardinality() {
        let m = Linear {
            coef: vec![1.0],
            tables: vec![vec![0.0; 300]],
        };
        let d = data(&[(vec![299], 0)], 300);
        assert!(matches!(permutation_error_exact(&m, &d, 0), Err(Error::Refused(_))));
    }

    #[test]
    fn empty_dataset_rejected() {
        let m = Linear {
            coef: vec![1.0],
            tables: vec![vec![0.0; 2]],
        };
        let d = Dataset::from_samples(DatasetMeta::uniform(1, 2, vec![], 0.0, 0), &[]).unwrap();
        assert!(matches!(taylor_scores(&m, &d), Err(Error::EmptyDataset)));
    }

    #[test]
    fn ties_break_on_lower_index() {
        let list = TableScoreList {
            scores: vec![
                FieldScore { field: 3, score: 0.0 },
                FieldScore { field: 1, score: 0.0 },
                FieldScore { field: 2, score: -1.0 },
            ],
            passes: PassStats::default(),
        };
        assert_eq!(list.ascending(), vec![2, 1, 3]);
    }

    #[test]
    fn prune_config_validation() {
        assert!(PruneConfig::default().validate().is_ok());
        for bad in [
            PruneConfig { fields_per_iteration: 0, ..Default::default() },
            PruneConfig { rate_c: 0.0, ..Default::default() },
            PruneConfig { t_accuracy: 1.5, ..Default::default() },
            PruneConfig { support_fraction: 0.0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }
}
