//! `SHRK` store files. Little-endian throughout:
//!
//! ```text
//! magic        4   b"SHRK"
//! version      2   u16
//! table_count  4   u32
//! per table:
//!   table_id   4   u32
//!   n_rows     4   u32
//!   dim        2   u16
//!   t8         8   f64
//!   t16        8   f64
//!   per row:   7 + payload
//!     precision 1  u8   0 = FP32, 1 = FP16, 2 = INT8
//!     dimension 2  u16  equals the table dim
//!     scale     4  f32
//!     payload   dim * {4, 2, 1}
//! has_scores   1   u8   0 or 1
//! if has_scores:
//!   alpha      8   f64
//!   beta       8   f64
//!   decay_all  1   u8
//!   per table, in file order: n_rows * f64
//! ```

use std::collections::BTreeSet;

use super::{EmbeddingStore, MixedTable, StoredRow, EXTRA_WORD_BYTES};
use crate::error::{Error, Result};
use crate::priority::{PriorityConfig, PriorityTracker, Thresholds};
use crate::quantizer::{Payload, PrecisionTier, RoundingMode, ScalePolicy};

pub const MAGIC: [u8; 4] = *b"SHRK";
pub const FORMAT_VERSION: u16 = 1;

pub(super) fn encode(store: &EmbeddingStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.tables.len() as u32).to_le_bytes());
    for t in &store.tables {
        out.extend_from_slice(&t.table_id.to_le_bytes());
        out.extend_from_slice(&(t.rows.len() as u32).to_le_bytes());
        out.extend_from_slice(&t.dim.to_le_bytes());
        out.extend_from_slice(&t.thresholds.t8.to_le_bytes());
        out.extend_from_slice(&t.thresholds.t16.to_le_bytes());
        for r in &t.rows {
            out.push(r.tier().tag());
            out.extend_from_slice(&t.dim.to_le_bytes());
            out.extend_from_slice(&r.scale.to_le_bytes());
            r.payload.write_le(&mut out);
        }
    }
    match &store.priority {
        None => out.push(0),
        Some(p) => {
            out.push(1);
            let cfg = p.config();
            out.extend_from_slice(&cfg.alpha.to_le_bytes());
            out.extend_from_slice(&cfg.beta.to_le_bytes());
            out.push(u8::from(cfg.decay_untouched));
            for t in &store.tables {
                let scores = p.table_scores(t.table_id).expect("tracker covers store");
                scores.iter().for_each(|s| out.extend_from_slice(&s.to_le_bytes()));
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn offset(&self) -> u64 {
        self.pos as u64
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.offset(),
                format!(
                    "truncated: need {n} bytes for {what}, {} left",
                    self.buf.len() - self.pos
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub(super) fn decode(bytes: &[u8]) -> Result<EmbeddingStore> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"SHRK\""));
    }
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let table_count = r.u32("table count")?;

    let mut store = EmbeddingStore::new(ScalePolicy::Symmetric, RoundingMode::Nearest);
    let mut seen = BTreeSet::new();
    let mut order = Vec::with_capacity(table_count as usize);
    for _ in 0..table_count {
        let header_at = r.offset();
        let table_id = r.u32("table id")?;
        if !seen.insert(table_id) {
            return Err(Error::format(header_at, format!("duplicate table id {table_id}")));
        }
        let n_rows = r.u32("row count")? as usize;
        let dim_at = r.offset();
        let dim = r.u16("dimension")?;
        if dim == 0 {
            return Err(Error::format(dim_at, "table dimension is 0"));
        }
        let thresholds_at = r.offset();
        let thresholds = Thresholds {
            t8: r.f64("t8")?,
            t16: r.f64("t16")?,
        };
        thresholds
            .validate()
            .map_err(|e| Error::format(thresholds_at, e.to_string()))?;

        let mut rows = Vec::with_capacity(n_rows.min(r.buf.len() / EXTRA_WORD_BYTES));
        for row in 0..n_rows {
            let tag_at = r.offset();
            let tag = r.u8("precision tag")?;
            let tier = PrecisionTier::from_tag(tag).ok_or_else(|| {
                Error::format(
                    tag_at,
                    format!("invalid precision tag {tag} in table {table_id} row {row}"),
                )
            })?;
            let word_dim = r.u16("row dimension")?;
            if word_dim != dim {
                return Err(Error::format(
                    tag_at + 1,
                    format!("row dimension {word_dim} differs from table dimension {dim}"),
                ));
            }
            let scale_at = r.offset();
            let scale = r.f32("scale")?;
            if !(scale.is_finite() && scale >= 0.0) {
                return Err(Error::format(scale_at, format!("invalid scale {scale}")));
            }
            let len = tier.payload_len(usize::from(dim));
            let payload = Payload::read_le(tier, usize::from(dim), r.take(len, "payload")?)
                .expect("length checked by take");
            rows.push(StoredRow { scale, payload });
        }
        order.push((table_id, n_rows));
        store
            .add_table(MixedTable::from_rows(table_id, dim, thresholds, rows))
            .expect("ids checked unique");
    }

    let flag_at = r.offset();
    match r.u8("score section flag")? {
        0 => {}
        1 => {
            let cfg_at = r.offset();
            let alpha = r.f64("alpha")?;
            let beta = r.f64("beta")?;
            let decay_untouched = match r.u8("decay flag")? {
                0 => false,
                1 => true,
                other => {
                    return Err(Error::format(cfg_at + 16, format!("invalid decay flag {other}")))
                }
            };
            let mut tracker = PriorityTracker::new(PriorityConfig {
                alpha,
                beta,
                decay_untouched,
            })
            .map_err(|e| Error::format(cfg_at, e.to_string()))?;
            for (table_id, n_rows) in order {
                let at = r.offset();
                let mut scores = Vec::with_capacity(n_rows);
                for _ in 0..n_rows {
                    scores.push(r.f64("priority score")?);
                }
                tracker
                    .insert_scores(table_id, scores)
                    .map_err(|e| Error::format(at, e.to_string()))?;
            }
            store.priority = Some(tracker);
        }
        other => return Err(Error::format(flag_at, format!("invalid score flag {other}"))),
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            r.offset(),
            format!("{} trailing bytes", bytes.len() - r.pos),
        ));
    }
    Ok(store)
}
