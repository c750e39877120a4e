//! Categorical CTR datasets: synthetic generation, CSV loading and mini-batching.
//!
//! Every field is single-valued and categorical. Samples are stored flat
//! (`n_samples * n_fields` category indices) so batches can be served as
//! index lists without copying.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and generation parameters of a dataset. Also the on-disk sidecar
/// that accompanies a CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n_fields: usize,
    pub cardinalities: Vec<u32>,
    #[serde(default)]
    pub informative_fields: Vec<usize>,
    #[serde(default)]
    pub zipf_exponent: f64,
    #[serde(default)]
    pub seed: u64,
}

impl DatasetMeta {
    /// Meta with the same cardinality for every field.
    pub fn uniform(
        n_fields: usize,
        cardinality: u32,
        informative_fields: Vec<usize>,
        zipf_exponent: f64,
        seed: u64,
    ) -> Self {
        DatasetMeta {
            n_fields,
            cardinalities: vec![cardinality; n_fields],
            informative_fields,
            zipf_exponent,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_fields == 0 {
            return Err(Error::Config("n_fields must be at least 1".into()));
        }
        if self.cardinalities.len() != self.n_fields {
            return Err(Error::Config(format!(
                "{} cardinalities given for {} fields",
                self.cardinalities.len(),
                self.n_fields
            )));
        }
        if let Some((i, c)) = self
            .cardinalities
            .iter()
            .enumerate()
            .find(|(_, &c)| c < 2)
        {
            return Err(Error::Config(format!(
                "field {i} has cardinality {c}, need at least 2"
            )));
        }
        if let Some(&f) = self.informative_fields.iter().find(|&&f| f >= self.n_fields) {
            return Err(Error::Config(format!(
                "informative field {f} out of range for {} fields",
                self.n_fields
            )));
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            return Err(Error::Config(format!(
                "zipf_exponent must be finite and >= 0, got {}",
                self.zipf_exponent
            )));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        meta.validate()?;
        Ok(meta)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("meta serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// One record: a category index per field plus a binary label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub field_values: Vec<u32>,
    pub label: u8,
}

impl Sample {
    pub fn new(field_values: Vec<u32>, label: u8) -> Self {
        Sample {
            field_values,
            label,
        }
    }
}

/// Per-field probability of each category value, as observed in a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalDistribution {
    pub probabilities: Vec<Vec<f64>>,
}

impl EmpiricalDistribution {
    pub fn field(&self, field: usize) -> &[f64] {
        &self.probabilities[field]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    meta: DatasetMeta,
    values: Vec<u32>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn from_samples(meta: DatasetMeta, samples: &[Sample]) -> Result<Self> {
        meta.validate()?;
        let mut values = Vec::with_capacity(samples.len() * meta.n_fields);
        let mut labels = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            check_sample(&meta, &s.field_values, s.label)
                .map_err(|m| Error::Validation(format!("sample {i}: {m}")))?;
            values.extend_from_slice(&s.field_values);
            labels.push(s.label);
        }
        Ok(Dataset {
            meta,
            values,
            labels,
        })
    }

    /// Draws `n_samples` records. Field values follow a Zipf law over each
    /// field's categories (rank 0 most frequent); the label is
    /// Bernoulli(sigmoid(sum of per-category weights over informative fields)),
    /// with the weights drawn once from N(0, 1).
    pub fn generate_synthetic(meta: DatasetMeta, n_samples: usize) -> Result<Self> {
        meta.validate()?;
        if n_samples == 0 {
            return Err(Error::Config("n_samples must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(meta.seed);
        let informative: BTreeSet<usize> = meta.informative_fields.iter().copied().collect();

        let category_weights: Vec<Vec<f64>> = (0..meta.n_fields)
            .map(|f| {
                if informative.contains(&f) {
                    (0..meta.cardinalities[f])
                        .map(|_| rng.sample::<f64, _>(StandardNormal))
                        .collect()
                } else {
                    Vec::new()
                }
            })
            .collect();
        let samplers: Vec<WeightedIndex<f64>> = meta
            .cardinalities
            .iter()
            .map(|&c| {
                WeightedIndex::new((0..c).map(|k| zipf_weight(k, meta.zipf_exponent)))
                    .expect("positive zipf weights")
            })
            .collect();

        let mut values = Vec::with_capacity(n_samples * meta.n_fields);
        let mut labels = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let mut logit = 0.0;
            for (f, sampler) in samplers.iter().enumerate() {
                let v = sampler.sample(&mut rng);
                if let Some(w) = category_weights[f].get(v) {
                    logit += w;
                }
                values.push(v as u32);
            }
            let p = 1.0 / (1.0 + (-logit).exp());
            labels.push(u8::from(rng.random::<f64>() < p));
        }
        Ok(Dataset {
            meta,
            values,
            labels,
        })
    }

    /// Reads `field_0,...,field_{N-1},label` rows validated against a JSON meta sidecar.
    pub fn load_csv(path: impl AsRef<Path>, meta_path: impl AsRef<Path>) -> Result<Self> {
        let meta = DatasetMeta::load(meta_path)?;
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(meta, BufReader::new(file)).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    }

    pub fn read_csv(meta: DatasetMeta, reader: impl BufRead) -> Result<Self> {
        meta.validate()?;
        let n = meta.n_fields;
        let mut values = Vec::new();
        let mut labels = Vec::new();
        let mut lines = reader.lines().enumerate();

        match lines.next() {
            None => {
                return Err(Error::Parse {
                    line: 1,
                    message: "missing header".into(),
                })
            }
            Some((_, line)) => {
                let line = line.map_err(|e| Error::io("<csv>", e))?;
                let expected = csv_header(n);
                if line.trim_end() != expected {
                    return Err(Error::Parse {
                        line: 1,
                        message: format!("expected header `{expected}`"),
                    });
                }
            }
        }

        let mut row = Vec::with_capacity(n);
        for (idx, line) in lines {
            let line_no = idx + 1;
            let line = line.map_err(|e| Error::io("<csv>", e))?;
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            row.clear();
            for cell in line.split(',') {
                let v: u64 = cell.trim().parse().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("`{cell}` is not a non-negative integer"),
                })?;
                row.push(v);
            }
            if row.len() != n + 1 {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected {} columns, found {}", n + 1, row.len()),
                });
            }
            let label = row[n];
            if label > 1 {
                return Err(Error::Validation(format!(
                    "line {line_no}: label {label} is not 0 or 1"
                )));
            }
            for (f, &v) in row[..n].iter().enumerate() {
                if v >= u64::from(meta.cardinalities[f]) {
                    return Err(Error::Validation(format!(
                        "line {line_no}: field {f} value {v} >= cardinality {}",
                        meta.cardinalities[f]
                    )));
                }
                values.push(v as u32);
            }
            labels.push(label as u8);
        }
        Ok(Dataset {
            meta,
            values,
            labels,
        })
    }

    /// Writes the CSV and its meta sidecar.
    pub fn save_csv(&self, path: impl AsRef<Path>, meta_path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "{}", csv_header(self.n_fields())).map_err(io)?;
        for i in 0..self.len() {
            let row = self.row(i);
            for v in row {
                write!(w, "{v},").map_err(io)?;
            }
            writeln!(w, "{}", self.labels[i]).map_err(io)?;
        }
        w.flush().map_err(io)?;
        self.meta.save(meta_path)
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn n_fields(&self) -> usize {
        self.meta.n_fields
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Category indices of sample `i`, one per field.
    pub fn row(&self, i: usize) -> &[u32] {
        let n = self.meta.n_fields;
        &self.values[i * n..(i + 1) * n]
    }

    pub fn value(&self, i: usize, field: usize) -> u32 {
        self.values[i * self.meta.n_fields + field]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> Sample {
        Sample::new(self.row(i).to_vec(), self.labels[i])
    }

    pub fn samples(&self) -> impl Iterator<Item = Sample> + '_ {
        (0..self.len()).map(|i| self.sample(i))
    }

    /// New dataset holding the given samples in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut values = Vec::with_capacity(indices.len() * self.n_fields());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            values.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            meta: self.meta.clone(),
            values,
            labels,
        }
    }

    /// Seeded random split into (train, test).
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Config(format!(
                "test_fraction must be in [0, 1), got {test_fraction}"
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        let (test, train) = order.split_at(n_test);
        Ok((self.subset(train), self.subset(test)))
    }

    /// Uniform sample without replacement of `fraction` of the data (at least one record).
    pub fn sample_fraction(&self, fraction: f64, seed: u64) -> Dataset {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let k = ((self.len() as f64 * fraction).round() as usize).clamp(1.min(self.len()), self.len());
        order.truncate(k);
        self.subset(&order)
    }

    pub fn empirical_distribution(&self) -> Result<EmpiricalDistribution> {
        if self.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut counts: Vec<Vec<u64>> = self
            .meta
            .cardinalities
            .iter()
            .map(|&c| vec![0; c as usize])
            .collect();
        for i in 0..self.len() {
            for (f, &v) in self.row(i).iter().enumerate() {
                counts[f][v as usize] += 1;
            }
        }
        let total = self.len() as f64;
        Ok(EmpiricalDistribution {
            probabilities: counts
                .into_iter()
                .map(|c| c.into_iter().map(|k| k as f64 / total).collect())
                .collect(),
        })
    }

    /// One epoch of mini-batches over a seeded permutation of the samples.
    pub fn batches(&self, batch_size: usize, seed: u64) -> Batches {
        let batch_size = batch_size.max(1);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Batches {
            order,
            batch_size,
            pos: 0,
        }
    }

    /// Sequential batches in storage order, used by evaluation passes.
    pub fn sequential_batches(&self, batch_size: usize) -> Batches {
        Batches {
            order: (0..self.len()).collect(),
            batch_size: batch_size.max(1),
            pos: 0,
        }
    }
}

/// Iterator over batches of sample indices.
#[derive(Debug, Clone)]
pub struct Batches {
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(batch)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (n, Some(n))
    }
}

impl ExactSizeIterator for Batches {}

fn zipf_weight(rank: u32, exponent: f64) -> f64 {
    (f64::from(rank) + 1.0).powf(-exponent)
}

fn csv_header(n_fields: usize) -> String {
    let mut h: Vec<String> = (0..n_fields).map(|i| format!("field_{i}")).collect();
    h.push("label".into());
    h.join(",")
}

fn check_sample(meta: &DatasetMeta, values: &[u32], label: u8) -> std::result::Result<(), String> {
    if values.len() != meta.n_fields {
        return Err(format!(
            "{} field values for {} fields",
            values.len(),
            meta.n_fields
        ));
    }
    if label > 1 {
        return Err(format!("label {label} is not 0 or 1"));
    }
    for (f, (&v, &c)) in values.iter().zip(&meta.cardinalities).enumerate() {
        if v >= c {
            return Err(format!("field {f} value {v} >= cardinality {c}"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta2() -> DatasetMeta {
        DatasetMeta {
            n_fields: 2,
            cardinalities: vec![5, 2],
            informative_fields: vec![],
            zipf_exponent: 0.0,
            seed: 0,
        }
    }

    #[test]
    fn csv_row_parses() {
        let ds = Dataset::read_csv(meta2(), "field_0,field_1,label\n3,1,0\n".as_bytes()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.sample(0), Sample::new(vec![3, 1], 0));
    }

    #[test]
    fn csv_out_of_range_is_validation_error() {
        let err = Dataset::read_csv(meta2(), "field_0,field_1,label\n9,1,0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn csv_header_only_is_empty() {
        let ds = Dataset::read_csv(meta2(), "field_0,field_1,label\n".as_bytes()).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn csv_malformed_row_reports_line() {
        let err = Dataset::read_csv(meta2(), "field_0,field_1,label\n1,1,0\n1,x,0\n".as_bytes())
            .unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
        let err =
            Dataset::read_csv(meta2(), "field_0,field_1,label\n1,1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn invalid_meta_rejected() {
        let mut m = meta2();
        m.cardinalities[1] = 1;
        assert!(matches!(
            Dataset::generate_synthetic(m, 10),
            Err(Error::Config(_))
        ));
        let mut m = meta2();
        m.informative_fields = vec![2];
        assert!(matches!(m.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn empirical_distribution_counts() {
        let meta = DatasetMeta::uniform(1, 2, vec![], 0.0, 0);
        let samples = [Sample::new(vec![0], 0), Sample::new(vec![0], 1), Sample::new(vec![1], 0)];
        let ds = Dataset::from_samples(meta.clone(), &samples).unwrap();
        let p = ds.empirical_distribution().unwrap();
        assert!((p.field(0)[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.field(0)[1] - 1.0 / 3.0).abs() < 1e-15);

        let one = Dataset::from_samples(meta.clone(), &samples[2..]).unwrap();
        assert_eq!(one.empirical_distribution().unwrap().field(0), &[0.0, 1.0]);

        let empty = Dataset::from_samples(meta, &[]).unwrap();
        assert!(matches!(empty.empirical_distribution(), Err(Error::EmptyDataset)));
    }

    #[test]
    fn uniform_generator_frequencies_within_three_sigma() {
        let card = 10u32;
        let n = 100_000usize;
        let ds = Dataset::generate_synthetic(DatasetMeta::uniform(3, card, vec![0], 0.0, 11), n)
            .unwrap();
        let p = ds.empirical_distribution().unwrap();
        let q = 1.0 / f64::from(card);
        let sigma = (q * (1.0 - q) / n as f64).sqrt();
        for f in 0..3 {
            let s: f64 = p.field(f).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            for &pv in p.field(f) {
                assert!((pv - q).abs() <= 3.0 * sigma.max(1e-12) + 1e-3, "{pv}");
                assert!((pv - q).abs() <= 0.02);
            }
        }
    }

    #[test]
    fn zipf_skews_toward_low_ranks() {
        let ds = Dataset::generate_synthetic(DatasetMeta::uniform(1, 50, vec![], 1.2, 3), 20_000)
            .unwrap();
        let p = ds.empirical_distribution().unwrap();
        assert!(p.field(0)[0] > 5.0 * p.field(0)[10]);
    }

    #[test]
    fn generation_is_deterministic() {
        let m = DatasetMeta::uniform(4, 7, vec![0, 2], 1.0, 42);
        let a = Dataset::generate_synthetic(m.clone(), 500).unwrap();
        let b = Dataset::generate_synthetic(m, 500).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batches_sizes_and_partition() {
        let ds = Dataset::generate_synthetic(DatasetMeta::uniform(2, 3, vec![], 0.0, 1), 10).unwrap();
        let batches: Vec<_> = ds.batches(4, 9).collect();
        assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(batches, ds.batches(4, 9).collect::<Vec<_>>());
    }

    #[test]
    fn split_partitions() {
        let ds = Dataset::generate_synthetic(DatasetMeta::uniform(2, 3, vec![0], 0.0, 1), 100).unwrap();
        let (train, test) = ds.split(0.2, 5).unwrap();
        assert_eq!(train.len(), 80);
        assert_eq!(test.len(), 20);
    }
}
