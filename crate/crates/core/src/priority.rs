//! Frequency-based row priorities.
//!
//! Each row carries a score `w` updated once per batch from the number of
//! positive (`c+`) and negative (`c-`) samples that touched it:
//!
//! ```text
//! w <- (1 - beta) * w + beta * (alpha * c+ + c-)
//! ```
//!
//! Under constant counts `w` converges geometrically to `alpha * c+ + c-`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::PrecisionTier;

pub const DEFAULT_ALPHA: f64 = 2.0;
pub const DEFAULT_BETA: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorityConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Also decay rows that were not accessed in a batch (`c+ = c- = 0`).
    /// Off by default: only accessed rows are updated.
    #[serde(default)]
    pub decay_untouched: bool,
}

impl Default for PriorityConfig {
    fn default() -> Self {
        PriorityConfig {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            decay_untouched: false,
        }
    }
}

impl PriorityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Config(format!("beta must be in (0, 1), got {}", self.beta)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Tier thresholds: `w < t8` is INT8, `t8 <= w < t16` is FP16, `w >= t16` is FP32.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub t8: f64,
    pub t16: f64,
}

impl Thresholds {
    pub const DEFAULT: Thresholds = Thresholds { t8: 1e3, t16: 1e5 };
    /// Every row lands in FP32.
    pub const ALL_FP32: Thresholds = Thresholds { t8: 0.0, t16: 0.0 };

    pub fn new(t8: f64, t16: f64) -> Result<Self> {
        let t = Thresholds { t8, t16 };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t8.is_nan() || self.t16.is_nan() || self.t8 > self.t16 {
            return Err(Error::Config(format!(
                "thresholds require t8 <= t16, got t8={} t16={}",
                self.t8, self.t16
            )));
        }
        Ok(())
    }

    pub fn tier(&self, score: f64) -> PrecisionTier {
        if score < self.t8 {
            PrecisionTier::Int8
        } else if score < self.t16 {
            PrecisionTier::Fp16
        } else {
            PrecisionTier::Fp32
        }
    }
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds::DEFAULT
    }
}

/// Positive/negative access counts of one row within a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AccessCounts {
    pub positive: u64,
    pub negative: u64,
}

/// Per-table, per-row access counts for one batch, keyed by table id then row.
pub type BatchAccess = BTreeMap<u32, BTreeMap<u32, AccessCounts>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TierHistogram {
    pub int8: usize,
    pub fp16: usize,
    pub fp32: usize,
}

impl TierHistogram {
    pub fn total(&self) -> usize {
        self.int8 + self.fp16 + self.fp32
    }

    pub fn add(&mut self, tier: PrecisionTier) {
        match tier {
            PrecisionTier::Int8 => self.int8 += 1,
            PrecisionTier::Fp16 => self.fp16 += 1,
            PrecisionTier::Fp32 => self.fp32 += 1,
        }
    }

    pub fn get(&self, tier: PrecisionTier) -> usize {
        match tier {
            PrecisionTier::Int8 => self.int8,
            PrecisionTier::Fp16 => self.fp16,
            PrecisionTier::Fp32 => self.fp32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorityTracker {
    config: PriorityConfig,
    tables: BTreeMap<u32, Vec<f64>>,
}

impl PriorityTracker {
    pub fn new(config: PriorityConfig) -> Result<Self> {
        config.validate()?;
        Ok(PriorityTracker {
            config,
            tables: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &PriorityConfig {
        &self.config
    }

    /// Registers a table with every row at score 0.
    pub fn add_table(&mut self, table_id: u32, n_rows: usize) {
        self.tables.insert(table_id, vec![0.0; n_rows]);
    }

    pub fn insert_scores(&mut self, table_id: u32, scores: Vec<f64>) -> Result<()> {
        if let Some(s) = scores.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(Error::Validation(format!("invalid priority score {s}")));
        }
        self.tables.insert(table_id, scores);
        Ok(())
    }

    pub fn remove_table(&mut self, table_id: u32) -> Option<Vec<f64>> {
        self.tables.remove(&table_id)
    }

    pub fn table_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.tables.keys().copied()
    }

    pub fn table_scores(&self, table_id: u32) -> Option<&[f64]> {
        self.tables.get(&table_id).map(Vec::as_slice)
    }

    pub fn score(&self, table_id: u32, row_id: u32) -> Result<f64> {
        let t = self
            .tables
            .get(&table_id)
            .ok_or_else(|| Error::Lookup(format!("no priority table {table_id}")))?;
        t.get(row_id as usize).copied().ok_or_else(|| {
            Error::Lookup(format!("row {row_id} out of range for table {table_id} ({} rows)", t.len()))
        })
    }

    /// Applies one batch of access counts.
    pub fn update_batch(&mut self, access: &BatchAccess) -> Result<()> {
        for (&table_id, rows) in access {
            let n = self
                .tables
                .get(&table_id)
                .map(Vec::len)
                .ok_or_else(|| Error::Lookup(format!("no priority table {table_id}")))?;
            if let Some(&row) = rows.keys().find(|&&r| r as usize >= n) {
                return Err(Error::Lookup(format!(
                    "row {row} out of range for table {table_id} ({n} rows)"
                )));
            }
        }
        let PriorityConfig {
            alpha,
            beta,
            decay_untouched,
        } = self.config;
        if decay_untouched {
            for w in self.tables.values_mut().flatten() {
                *w *= 1.0 - beta;
            }
        }
        for (table_id, rows) in access {
            let scores = self.tables.get_mut(table_id).expect("checked above");
            for (&row, c) in rows {
                let w = &mut scores[row as usize];
                let target = alpha * c.positive as f64 + c.negative as f64;
                if decay_untouched {
                    // Already decayed above.
                    *w += beta * target;
                } else {
                    *w = (1.0 - beta) * *w + beta * target;
                }
            }
        }
        Ok(())
    }

    /// Update with signed counts, rejecting negatives. Convenience for callers
    /// that count with integer arithmetic that may go below zero.
    pub fn update_signed(&mut self, table_id: u32, counts: &[(u32, i64, i64)]) -> Result<()> {
        let mut rows = BTreeMap::new();
        for &(row, pos, neg) in counts {
            if pos < 0 || neg < 0 {
                return Err(Error::Validation(format!(
                    "negative access count for row {row}: c+={pos} c-={neg}"
                )));
            }
            rows.insert(
                row,
                AccessCounts {
                    positive: pos as u64,
                    negative: neg as u64,
                },
            );
        }
        let mut access = BatchAccess::new();
        access.insert(table_id, rows);
        self.update_batch(&access)
    }

    pub fn tier_histogram(&self, thresholds: Thresholds) -> Result<TierHistogram> {
        thresholds.validate()?;
        let mut h = TierHistogram::default();
        for &w in self.tables.values().flatten() {
            h.add(thresholds.tier(w));
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tracker(rows: usize) -> PriorityTracker {
        let mut t = PriorityTracker::new(PriorityConfig::default()).unwrap();
        t.add_table(0, rows);
        t
    }

    fn one(row: u32, positive: u64, negative: u64) -> BatchAccess {
        let mut a = BatchAccess::new();
        a.entry(0).or_default().insert(row, AccessCounts { positive, negative });
        a
    }

    #[test]
    fn single_positive_access() {
        let mut t = tracker(3);
        assert_eq!(t.score(0, 1).unwrap(), 0.0);
        t.update_batch(&one(1, 1, 0)).unwrap();
        assert!((t.score(0, 1).unwrap() - 1.98).abs() < 1e-12);
        assert_eq!(t.score(0, 0).unwrap(), 0.0);
    }

    #[test]
    fn zero_counts_decay() {
        let mut t = tracker(1);
        t.update_batch(&one(0, 3, 4)).unwrap();
        let w = t.score(0, 0).unwrap();
        t.update_batch(&one(0, 0, 0)).unwrap();
        assert!((t.score(0, 0).unwrap() - 0.01 * w).abs() < 1e-12);
    }

    #[test]
    fn untouched_rows_kept_unless_configured() {
        let mut t = tracker(2);
        t.update_batch(&one(0, 1, 0)).unwrap();
        t.update_batch(&one(1, 1, 0)).unwrap();
        assert!((t.score(0, 0).unwrap() - 1.98).abs() < 1e-12);

        let mut d = PriorityTracker::new(PriorityConfig {
            decay_untouched: true,
            ..Default::default()
        })
        .unwrap();
        d.add_table(0, 2);
        d.update_batch(&one(0, 1, 0)).unwrap();
        d.update_batch(&one(1, 1, 0)).unwrap();
        assert!((d.score(0, 0).unwrap() - 1.98 * 0.01).abs() < 1e-12);
        assert!((d.score(0, 1).unwrap() - 1.98).abs() < 1e-12);
    }

    #[test]
    fn closed_form_under_constant_counts() {
        let (cp, cn) = (3u64, 5u64);
        let (alpha, beta) = (DEFAULT_ALPHA, DEFAULT_BETA);
        let fixed = cp as f64 * alpha + cn as f64;
        let mut t = tracker(1);
        for k in 1..=50 {
            t.update_batch(&one(0, cp, cn)).unwrap();
            if [1, 5, 50].contains(&k) {
                let expected = (1.0 - (1.0 - beta).powi(k)) * fixed;
                assert!((t.score(0, 0).unwrap() - expected).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn negative_counts_rejected() {
        let mut t = tracker(2);
        assert!(matches!(
            t.update_signed(0, &[(0, -1, 0)]),
            Err(Error::Validation(_))
        ));
        t.update_signed(0, &[(1, 1, 0)]).unwrap();
        assert!((t.score(0, 1).unwrap() - 1.98).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_lookup() {
        let mut t = tracker(2);
        assert!(matches!(t.score(0, 2), Err(Error::Lookup(_))));
        assert!(matches!(t.score(1, 0), Err(Error::Lookup(_))));
        assert!(matches!(t.update_batch(&one(5, 1, 1)), Err(Error::Lookup(_))));
    }

    #[test]
    fn degenerate_thresholds() {
        let mut t = tracker(4);
        t.update_batch(&one(2, 10, 0)).unwrap();
        let inf = Thresholds::new(f64::INFINITY, f64::INFINITY).unwrap();
        assert_eq!(t.tier_histogram(inf).unwrap(), TierHistogram { int8: 4, fp16: 0, fp32: 0 });
        assert_eq!(
            t.tier_histogram(Thresholds::ALL_FP32).unwrap(),
            TierHistogram { int8: 0, fp16: 0, fp32: 4 }
        );
        assert!(matches!(
            t.tier_histogram(Thresholds { t8: 2.0, t16: 1.0 }),
            Err(Error::Config(_))
        ));
    }

    proptest! {
        #[test]
        fn distance_to_fixed_point_shrinks_geometrically(
            w0 in 0.0f64..1e4, cp in 0u64..1000, cn in 0u64..1000, k in 1i32..40, beta in 0.01f64..0.99,
        ) {
            let cfg = PriorityConfig { alpha: 2.0, beta, decay_untouched: false };
            let mut t = PriorityTracker::new(cfg).unwrap();
            t.insert_scores(0, vec![w0]).unwrap();
            for _ in 0..k {
                t.update_batch(&one(0, cp, cn)).unwrap();
            }
            let fixed = 2.0 * cp as f64 + cn as f64;
            let expected = (1.0 - beta).powi(k) * (w0 - fixed).abs();
            let got = (t.score(0, 0).unwrap() - fixed).abs();
            prop_assert!((got - expected).abs() <= 1e-9 * (1.0 + fixed + w0));
        }

        #[test]
        fn positive_access_outranks_negative(w0 in 0.0f64..1e3, cp in 0u64..100, cn in 1u64..100) {
            let mut a = PriorityTracker::new(PriorityConfig::default()).unwrap();
            a.insert_scores(0, vec![w0]).unwrap();
            let mut b = a.clone();
            a.update_batch(&one(0, cp, cn)).unwrap();
            b.update_batch(&one(0, cp + 1, cn - 1)).unwrap();
            prop_assert!(b.score(0, 0).unwrap() > a.score(0, 0).unwrap());
        }

        #[test]
        fn histogram_partitions_and_is_monotone(
            scores in prop::collection::vec(0.0f64..1e6, 1..200),
            t8a in 0.0f64..1e6, dt in 0.0f64..1e6, t16 in 0.0f64..3e6,
        ) {
            let mut t = PriorityTracker::new(PriorityConfig::default()).unwrap();
            t.insert_scores(0, scores.clone()).unwrap();
            let t8b = t8a + dt;
            let t16 = t16.max(t8b);
            let lo = t.tier_histogram(Thresholds::new(t8a, t16).unwrap()).unwrap();
            let hi = t.tier_histogram(Thresholds::new(t8b, t16).unwrap()).unwrap();
            prop_assert_eq!(lo.total(), scores.len());
            prop_assert_eq!(hi.total(), scores.len());
            prop_assert!(hi.int8 >= lo.int8);
        }
    }
}
