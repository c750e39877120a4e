//! Mixed-precision embedding store.
//!
//! Every row of a [`MixedTable`] sits in one of three tiers chosen from its
//! priority score. Writes quantize at the row's current tier with a freshly
//! computed scale; reads dequantize. Each row carries a 7-byte extra word
//! (precision tag, dimension, scale) both in memory accounting and on disk.

mod format;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::priority::{PriorityConfig, PriorityTracker, Thresholds, TierHistogram};
use crate::quantizer::{
    dequantize_row, encode_row, PrecisionTier, Payload, RoundingMode, ScalePolicy,
};

pub use format::{FORMAT_VERSION, MAGIC};

/// Bytes in a row's extra word: 8-bit precision, 16-bit dimension, 32-bit scale.
pub const EXTRA_WORD_BYTES: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtraWord {
    pub precision: PrecisionTier,
    pub dimension: u16,
    pub scale: f32,
}

impl ExtraWord {
    pub fn to_bytes(self) -> [u8; EXTRA_WORD_BYTES] {
        let mut b = [0u8; EXTRA_WORD_BYTES];
        b[0] = self.precision.tag();
        b[1..3].copy_from_slice(&self.dimension.to_le_bytes());
        b[3..7].copy_from_slice(&self.scale.to_le_bytes());
        b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredRow {
    pub scale: f32,
    pub payload: Payload,
}

impl StoredRow {
    pub fn tier(&self) -> PrecisionTier {
        self.payload.tier()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedTable {
    table_id: u32,
    dim: u16,
    thresholds: Thresholds,
    rows: Vec<StoredRow>,
}

impl MixedTable {
    /// All-zero table; every row starts in the tier a score of 0 maps to.
    pub fn new(table_id: u32, n_rows: usize, dim: usize, thresholds: Thresholds) -> Result<Self> {
        thresholds.validate()?;
        let dim16 = u16::try_from(dim)
            .ok()
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::Config(format!("dimension {dim} outside 1..=65535")))?;
        let tier = thresholds.tier(0.0);
        Ok(MixedTable {
            table_id,
            dim: dim16,
            thresholds,
            rows: vec![
                StoredRow {
                    scale: 0.0,
                    payload: Payload::zeros(tier, dim),
                };
                n_rows
            ],
        })
    }

    pub(crate) fn from_rows(
        table_id: u32,
        dim: u16,
        thresholds: Thresholds,
        rows: Vec<StoredRow>,
    ) -> Self {
        MixedTable {
            table_id,
            dim,
            thresholds,
            rows,
        }
    }

    pub fn table_id(&self) -> u32 {
        self.table_id
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        usize::from(self.dim)
    }

    pub fn thresholds(&self) -> Thresholds {
        self.thresholds
    }

    pub fn set_thresholds(&mut self, thresholds: Thresholds) -> Result<()> {
        thresholds.validate()?;
        self.thresholds = thresholds;
        Ok(())
    }

    pub fn rows(&self) -> &[StoredRow] {
        &self.rows
    }

    fn row(&self, row_id: usize) -> Result<&StoredRow> {
        self.rows.get(row_id).ok_or_else(|| {
            Error::Lookup(format!(
                "row {row_id} out of range for table {} ({} rows)",
                self.table_id,
                self.rows.len()
            ))
        })
    }

    pub fn tier(&self, row_id: usize) -> Result<PrecisionTier> {
        Ok(self.row(row_id)?.tier())
    }

    pub fn extra_word(&self, row_id: usize) -> Result<ExtraWord> {
        let r = self.row(row_id)?;
        Ok(ExtraWord {
            precision: r.tier(),
            dimension: self.dim,
            scale: r.scale,
        })
    }

    /// Dequantized row.
    pub fn lookup(&self, row_id: usize) -> Result<Vec<f64>> {
        let r = self.row(row_id)?;
        dequantize_row(&r.payload, r.tier(), r.scale)
    }

    /// Dequantizes into `out` without allocating.
    pub fn lookup_into(&self, row_id: usize, out: &mut [f64]) -> Result<()> {
        let r = self.row(row_id)?;
        if out.len() != self.dim() {
            return Err(Error::Shape(format!(
                "output buffer of {} for dim {}",
                out.len(),
                self.dim
            )));
        }
        let s = f64::from(r.scale);
        match &r.payload {
            Payload::Fp32(v) => out.iter_mut().zip(v).for_each(|(o, &x)| *o = f64::from(x)),
            Payload::Fp16(v) => out.iter_mut().zip(v).for_each(|(o, x)| *o = s * x.to_f64()),
            Payload::Int8(v) => out.iter_mut().zip(v).for_each(|(o, &q)| *o = s * f64::from(q)),
        }
        Ok(())
    }

    /// Quantizes `values` at the row's current tier.
    pub fn write(
        &mut self,
        row_id: usize,
        values: &[f64],
        policy: ScalePolicy,
        mode: &mut RoundingMode,
    ) -> Result<()> {
        if values.len() != self.dim() {
            return Err(Error::Shape(format!(
                "row of length {} written to table {} with dim {}",
                values.len(),
                self.table_id,
                self.dim
            )));
        }
        let tier = self.row(row_id)?.tier();
        self.store_at(row_id, values, tier, policy, mode)
    }

    fn store_at(
        &mut self,
        row_id: usize,
        values: &[f64],
        tier: PrecisionTier,
        policy: ScalePolicy,
        mode: &mut RoundingMode,
    ) -> Result<()> {
        let (scale, payload) = encode_row(values, tier, policy, mode)?;
        self.rows[row_id] = StoredRow { scale, payload };
        Ok(())
    }

    /// Moves each row to the tier its score selects; returns how many rows moved.
    pub fn retier(
        &mut self,
        scores: &[f64],
        policy: ScalePolicy,
        mode: &mut RoundingMode,
    ) -> Result<usize> {
        self.thresholds.validate()?;
        if scores.len() != self.rows.len() {
            return Err(Error::Shape(format!(
                "{} scores for table {} with {} rows",
                scores.len(),
                self.table_id,
                self.rows.len()
            )));
        }
        let mut moved = 0;
        for (row_id, &score) in scores.iter().enumerate() {
            let target = self.thresholds.tier(score);
            if target != self.rows[row_id].tier() {
                let values = self.lookup(row_id)?;
                self.store_at(row_id, &values, target, policy, mode)?;
                moved += 1;
            }
        }
        Ok(moved)
    }

    pub fn tier_histogram(&self) -> TierHistogram {
        let mut h = TierHistogram::default();
        self.rows.iter().for_each(|r| h.add(r.tier()));
        h
    }

    pub fn payload_bytes(&self) -> usize {
        self.rows.iter().map(|r| r.payload.byte_len()).sum()
    }

    pub fn extra_word_bytes(&self) -> usize {
        EXTRA_WORD_BYTES * self.rows.len()
    }

    /// Size of the same table held uncompressed in FP32, without extra words.
    pub fn baseline_bytes(&self) -> usize {
        4 * self.dim() * self.rows.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableMemory {
    pub table_id: u32,
    pub n_rows: usize,
    pub dim: usize,
    pub int8_rows: usize,
    pub fp16_rows: usize,
    pub fp32_rows: usize,
    pub payload_bytes: usize,
    pub extra_word_bytes: usize,
    pub baseline_bytes: usize,
    /// `(payload + extra words) / baseline`, 0 for an empty table.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub tables: Vec<TableMemory>,
    pub payload_bytes: usize,
    pub extra_word_bytes: usize,
    pub total_bytes: usize,
    pub baseline_bytes: usize,
    pub ratio: f64,
    pub payload_ratio: f64,
}

impl MemoryReport {
    pub fn histogram(&self) -> TierHistogram {
        self.tables.iter().fold(TierHistogram::default(), |mut h, t| {
            h.int8 += t.int8_rows;
            h.fp16 += t.fp16_rows;
            h.fp32 += t.fp32_rows;
            h
        })
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// A set of mixed-precision tables keyed by table id, with optional row priorities.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    tables: Vec<MixedTable>,
    priority: Option<PriorityTracker>,
    policy: ScalePolicy,
    rounding: RoundingMode,
}

impl Default for EmbeddingStore {
    fn default() -> Self {
        EmbeddingStore::new(ScalePolicy::Symmetric, RoundingMode::Nearest)
    }
}

impl EmbeddingStore {
    pub fn new(policy: ScalePolicy, rounding: RoundingMode) -> Self {
        EmbeddingStore {
            tables: Vec::new(),
            priority: None,
            policy,
            rounding,
        }
    }

    pub fn scale_policy(&self) -> ScalePolicy {
        self.policy
    }

    pub fn set_scale_policy(&mut self, policy: ScalePolicy) {
        self.policy = policy;
    }

    pub fn rounding(&self) -> &RoundingMode {
        &self.rounding
    }

    pub fn set_rounding(&mut self, rounding: RoundingMode) {
        self.rounding = rounding;
    }

    pub fn add_table(&mut self, table: MixedTable) -> Result<()> {
        match self.position(table.table_id) {
            Ok(_) => Err(Error::Config(format!("duplicate table id {}", table.table_id))),
            Err(pos) => {
                if let Some(p) = &mut self.priority {
                    p.add_table(table.table_id, table.n_rows());
                }
                self.tables.insert(pos, table);
                Ok(())
            }
        }
    }

    pub fn remove_table(&mut self, table_id: u32) -> Option<MixedTable> {
        let pos = self.position(table_id).ok()?;
        if let Some(p) = &mut self.priority {
            p.remove_table(table_id);
        }
        Some(self.tables.remove(pos))
    }

    fn position(&self, table_id: u32) -> std::result::Result<usize, usize> {
        self.tables.binary_search_by_key(&table_id, |t| t.table_id)
    }

    pub fn tables(&self) -> &[MixedTable] {
        &self.tables
    }

    pub fn contains(&self, table_id: u32) -> bool {
        self.position(table_id).is_ok()
    }

    pub fn table(&self, table_id: u32) -> Result<&MixedTable> {
        self.position(table_id)
            .map(|i| &self.tables[i])
            .map_err(|_| Error::Lookup(format!("no table {table_id}")))
    }

    pub fn table_mut(&mut self, table_id: u32) -> Result<&mut MixedTable> {
        match self.position(table_id) {
            Ok(i) => Ok(&mut self.tables[i]),
            Err(_) => Err(Error::Lookup(format!("no table {table_id}"))),
        }
    }

    pub fn lookup(&self, table_id: u32, row_id: usize) -> Result<Vec<f64>> {
        self.table(table_id)?.lookup(row_id)
    }

    pub fn lookup_into(&self, table_id: u32, row_id: usize, out: &mut [f64]) -> Result<()> {
        self.table(table_id)?.lookup_into(row_id, out)
    }

    pub fn write(&mut self, table_id: u32, row_id: usize, values: &[f64]) -> Result<()> {
        let i = self
            .position(table_id)
            .map_err(|_| Error::Lookup(format!("no table {table_id}")))?;
        self.tables[i].write(row_id, values, self.policy, &mut self.rounding)
    }

    pub fn priority(&self) -> Option<&PriorityTracker> {
        self.priority.as_ref()
    }

    pub fn priority_mut(&mut self) -> Option<&mut PriorityTracker> {
        self.priority.as_mut()
    }

    /// Installs a tracker; it must cover exactly this store's tables.
    pub fn set_priority(&mut self, tracker: PriorityTracker) -> Result<()> {
        for t in &self.tables {
            match tracker.table_scores(t.table_id) {
                Some(s) if s.len() == t.n_rows() => {}
                _ => {
                    return Err(Error::Validation(format!(
                        "priority tracker does not cover table {}",
                        t.table_id
                    )))
                }
            }
        }
        if tracker.table_ids().count() != self.tables.len() {
            return Err(Error::Validation(
                "priority tracker has tables missing from the store".into(),
            ));
        }
        self.priority = Some(tracker);
        Ok(())
    }

    /// Keeps an existing tracker (warm priorities) or starts a fresh one at 0.
    pub fn ensure_priority(&mut self, config: PriorityConfig) -> Result<&mut PriorityTracker> {
        if self.priority.is_none() {
            let mut t = PriorityTracker::new(config)?;
            for table in &self.tables {
                t.add_table(table.table_id, table.n_rows());
            }
            self.priority = Some(t);
        }
        Ok(self.priority.as_mut().expect("just set"))
    }

    pub fn clear_priority(&mut self) {
        self.priority = None;
    }

    pub fn set_thresholds(&mut self, thresholds: Thresholds) -> Result<()> {
        thresholds.validate()?;
        for t in &mut self.tables {
            t.thresholds = thresholds;
        }
        Ok(())
    }

    /// Re-tiers every table from the tracker's scores; returns total migrations.
    pub fn retier(&mut self) -> Result<usize> {
        let tracker = self
            .priority
            .as_ref()
            .ok_or_else(|| Error::Config("retier requires a priority tracker".into()))?;
        let mut moved = 0;
        for t in &mut self.tables {
            let scores = tracker.table_scores(t.table_id).ok_or_else(|| {
                Error::Validation(format!("priority tracker does not cover table {}", t.table_id))
            })?;
            moved += t.retier(scores, self.policy, &mut self.rounding)?;
        }
        Ok(moved)
    }

    pub fn tier_histogram(&self) -> TierHistogram {
        self.tables.iter().fold(TierHistogram::default(), |mut h, t| {
            let th = t.tier_histogram();
            h.int8 += th.int8;
            h.fp16 += th.fp16;
            h.fp32 += th.fp32;
            h
        })
    }

    pub fn memory_report(&self) -> MemoryReport {
        let tables: Vec<TableMemory> = self
            .tables
            .iter()
            .map(|t| {
                let h = t.tier_histogram();
                let payload_bytes = t.payload_bytes();
                let extra_word_bytes = t.extra_word_bytes();
                let baseline_bytes = t.baseline_bytes();
                TableMemory {
                    table_id: t.table_id,
                    n_rows: t.n_rows(),
                    dim: t.dim(),
                    int8_rows: h.int8,
                    fp16_rows: h.fp16,
                    fp32_rows: h.fp32,
                    payload_bytes,
                    extra_word_bytes,
                    baseline_bytes,
                    ratio: ratio(payload_bytes + extra_word_bytes, baseline_bytes),
                }
            })
            .collect();
        let payload_bytes = tables.iter().map(|t| t.payload_bytes).sum();
        let extra_word_bytes = tables.iter().map(|t| t.extra_word_bytes).sum();
        let baseline_bytes = tables.iter().map(|t| t.baseline_bytes).sum();
        let total_bytes = payload_bytes + extra_word_bytes;
        MemoryReport {
            tables,
            payload_bytes,
            extra_word_bytes,
            total_bytes,
            baseline_bytes,
            ratio: ratio(total_bytes, baseline_bytes),
            payload_ratio: ratio(payload_bytes, baseline_bytes),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        format::encode(self)
    }

    /// Decodes a store. The scale policy and rounding mode are not part of the
    /// file; the result uses symmetric scales and nearest rounding.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        format::decode(bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn int8_table(rows: usize, dim: usize) -> MixedTable {
        MixedTable::new(0, rows, dim, Thresholds::DEFAULT).unwrap()
    }

    #[test]
    fn fresh_rows_are_int8_when_t8_positive() {
        let t = int8_table(3, 4);
        assert_eq!(t.tier(0).unwrap(), PrecisionTier::Int8);
        assert_eq!(t.lookup(2).unwrap(), vec![0.0; 4]);
        let t = MixedTable::new(0, 3, 4, Thresholds::ALL_FP32).unwrap();
        assert_eq!(t.tier(0).unwrap(), PrecisionTier::Fp32);
    }

    #[test]
    fn fp32_write_lookup_exact() {
        let mut t = MixedTable::new(0, 2, 3, Thresholds::ALL_FP32).unwrap();
        let v = [0.125, -3.5, 1e-3f32 as f64];
        t.write(1, &v, ScalePolicy::Symmetric, &mut RoundingMode::stochastic(0)).unwrap();
        assert_eq!(t.lookup(1).unwrap(), v.to_vec());
    }

    #[test]
    fn int8_write_lookup_within_half_scale() {
        let mut t = int8_table(1, 3);
        let v = [1.0, -2.0, 0.5];
        t.write(0, &v, ScalePolicy::Symmetric, &mut RoundingMode::Nearest).unwrap();
        let s = f64::from(t.extra_word(0).unwrap().scale);
        for (a, b) in v.iter().zip(t.lookup(0).unwrap()) {
            assert!((a - b).abs() <= s / 2.0 + 1e-12);
        }
    }

    #[test]
    fn zero_write_reads_zero_at_every_tier() {
        for th in [Thresholds::DEFAULT, Thresholds::new(0.0, 1.0).unwrap(), Thresholds::ALL_FP32] {
            let mut t = MixedTable::new(0, 1, 4, th).unwrap();
            t.write(0, &[0.0; 4], ScalePolicy::Symmetric, &mut RoundingMode::Nearest).unwrap();
            assert_eq!(t.lookup(0).unwrap(), vec![0.0; 4]);
            assert_eq!(t.extra_word(0).unwrap().scale, 0.0);
        }
    }

    #[test]
    fn random_int8_cycles_within_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut t = int8_table(10, 8);
        for _ in 0..1000 {
            let row = rng.random_range(0..10);
            let v: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            t.write(row, &v, ScalePolicy::Symmetric, &mut RoundingMode::Nearest).unwrap();
            let s = f64::from(t.extra_word(row).unwrap().scale);
            for (a, b) in v.iter().zip(t.lookup(row).unwrap()) {
                assert!((a - b).abs() <= s / 2.0 + 1e-12);
            }
        }
    }

    #[test]
    fn shape_and_range_errors() {
        let mut t = int8_table(2, 3);
        assert!(matches!(
            t.write(0, &[1.0], ScalePolicy::Symmetric, &mut RoundingMode::Nearest),
            Err(Error::Shape(_))
        ));
        assert!(matches!(t.lookup(2), Err(Error::Lookup(_))));
        assert!(MixedTable::new(0, 1, 70_000, Thresholds::DEFAULT).is_err());
    }

    #[test]
    fn retier_is_idempotent_and_targets_crossers() {
        let mut t = int8_table(4, 2);
        let mut mode = RoundingMode::Nearest;
        for r in 0..4 {
            t.write(r, &[0.3, -0.7], ScalePolicy::Symmetric, &mut mode).unwrap();
        }
        let zeros = [0.0; 4];
        assert_eq!(t.retier(&zeros, ScalePolicy::Symmetric, &mut mode).unwrap(), 0);
        let scores = [0.0, 2e5, 0.0, 5e3];
        assert_eq!(t.retier(&scores, ScalePolicy::Symmetric, &mut mode).unwrap(), 2);
        assert_eq!(t.tier(1).unwrap(), PrecisionTier::Fp32);
        assert_eq!(t.tier(3).unwrap(), PrecisionTier::Fp16);
        assert_eq!(t.retier(&scores, ScalePolicy::Symmetric, &mut mode).unwrap(), 0);
        t.set_thresholds(Thresholds { t8: 1e3, t16: 1e5 }).unwrap();
        assert!(t.set_thresholds(Thresholds { t8: 2.0, t16: 1.0 }).is_err());
    }

    #[test]
    fn promotion_keeps_the_dequantized_value() {
        let mut t = int8_table(1, 3);
        let mut mode = RoundingMode::Nearest;
        t.write(0, &[0.9, -0.11, 0.4], ScalePolicy::Symmetric, &mut mode).unwrap();
        let before = t.lookup(0).unwrap();
        t.retier(&[1e6], ScalePolicy::Symmetric, &mut mode).unwrap();
        let after = t.lookup(0).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() <= a.abs() * f64::from(f32::EPSILON));
        }
    }

    #[test]
    fn memory_report_arithmetic() {
        let mut store = EmbeddingStore::default();
        store.add_table(MixedTable::new(0, 100, 16, Thresholds::ALL_FP32).unwrap()).unwrap();
        let r = store.memory_report();
        assert_eq!((r.payload_bytes, r.extra_word_bytes), (6400, 700));
        assert!((r.ratio - 7100.0 / 6400.0).abs() < 1e-12);
        assert!((r.ratio - 1.109).abs() < 1e-3);

        let mut store = EmbeddingStore::default();
        store.add_table(int8_table(100, 16)).unwrap();
        let r = store.memory_report();
        assert_eq!(r.total_bytes, 2300);
        assert!((r.ratio - 0.359).abs() < 1e-3);

        let mut store = EmbeddingStore::default();
        store.add_table(int8_table(0, 16)).unwrap();
        let r = store.memory_report();
        assert_eq!((r.total_bytes, r.ratio), (0, 0.0));
        assert_eq!(EmbeddingStore::default().memory_report().ratio, 0.0);
    }

    #[test]
    fn store_tables_and_priority() {
        let mut store = EmbeddingStore::default();
        store.add_table(int8_table(3, 2)).unwrap();
        assert!(store.add_table(int8_table(3, 2)).is_err());
        store.add_table(MixedTable::new(5, 2, 2, Thresholds::DEFAULT).unwrap()).unwrap();
        assert!(store.retier().is_err());
        store.ensure_priority(PriorityConfig::default()).unwrap();
        assert_eq!(store.retier().unwrap(), 0);
        assert!(store.remove_table(0).is_some());
        assert!(!store.contains(0));
        assert_eq!(store.priority().unwrap().table_ids().collect::<Vec<_>>(), vec![5]);
        assert!(matches!(store.lookup(0, 0), Err(Error::Lookup(_))));
    }
}
