use std::path::PathBuf;

use rowtier::quantizer::PrecisionTier;
use rowtier::store::{MixedTable, EXTRA_WORD_BYTES};
use rowtier::{EmbeddingStore, Error, PriorityConfig, PriorityTracker, RoundingMode, ScalePolicy, Thresholds};

fn fixture() -> Vec<u8> {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/two_rows.shrk");
    std::fs::read(p).unwrap()
}

/// A store with rows in every tier and a priority section.
fn mixed_store() -> EmbeddingStore {
    let mut store = EmbeddingStore::new(ScalePolicy::Symmetric, RoundingMode::Nearest);
    let thresholds = Thresholds::new(2.0, 10.0).unwrap();
    store.add_table(MixedTable::new(3, 4, 5, thresholds).unwrap()).unwrap();
    store.add_table(MixedTable::new(1, 3, 2, thresholds).unwrap()).unwrap();
    let mut tracker = PriorityTracker::new(PriorityConfig::default()).unwrap();
    tracker.insert_scores(3, vec![0.0, 5.0, 50.0, 1.0]).unwrap();
    tracker.insert_scores(1, vec![100.0, 0.5, 3.0]).unwrap();
    store.set_priority(tracker).unwrap();
    store.retier().unwrap();
    for row in 0..4 {
        let v: Vec<f64> = (0..5).map(|k| (row * 5 + k) as f64 * 0.37 - 3.0).collect();
        store.write(3, row, &v).unwrap();
    }
    for row in 0..3 {
        store.write(1, row, &[row as f64 - 1.5, 0.25]).unwrap();
    }
    store
}

#[test]
fn fixture_decodes_to_expected_rows() {
    let store = EmbeddingStore::from_bytes(&fixture()).unwrap();
    let t = store.table(0).unwrap();
    assert_eq!((t.n_rows(), t.dim()), (2, 2));
    assert_eq!(t.tier(0).unwrap(), PrecisionTier::Fp32);
    assert_eq!(t.tier(1).unwrap(), PrecisionTier::Int8);
    assert_eq!(store.lookup(0, 0).unwrap(), vec![0.5, -1.25]);
    let s = f64::from(2.0f32 / 127.0);
    assert_eq!(store.lookup(0, 1).unwrap(), vec![64.0 * s, -127.0 * s]);
    assert!(store.priority().is_none());
    let w = t.extra_word(1).unwrap();
    assert_eq!(w.to_bytes()[0], 2);
    assert_eq!(&w.to_bytes()[1..3], &2u16.to_le_bytes());
    assert_eq!(&w.to_bytes()[3..], &(2.0f32 / 127.0).to_le_bytes());
}

#[test]
fn save_load_save_is_identical() {
    let store = mixed_store();
    let h = store.tier_histogram();
    assert!(h.int8 > 0 && h.fp16 > 0 && h.fp32 > 0);
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.shrk");
    let b = dir.path().join("b.shrk");
    store.save(&a).unwrap();
    let loaded = EmbeddingStore::load(&a).unwrap();
    loaded.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    for (id, rows) in [(3u32, 4usize), (1, 3)] {
        for r in 0..rows {
            assert_eq!(loaded.lookup(id, r).unwrap(), store.lookup(id, r).unwrap());
        }
    }
    assert_eq!(loaded.priority(), store.priority());
}

/// Walks the file by the documented layout and totals extra-word and payload bytes.
fn scan(bytes: &[u8]) -> (usize, usize) {
    let u16_at = |p: usize| u16::from_le_bytes([bytes[p], bytes[p + 1]]) as usize;
    let u32_at = |p: usize| u32::from_le_bytes(bytes[p..p + 4].try_into().unwrap()) as usize;
    let n_tables = u32_at(6);
    let mut pos = 10;
    let (mut extra, mut payload) = (0, 0);
    for _ in 0..n_tables {
        let n_rows = u32_at(pos + 4);
        let dim = u16_at(pos + 8);
        pos += 26;
        for _ in 0..n_rows {
            let width = match bytes[pos] {
                0 => 4,
                1 => 2,
                2 => 1,
                t => panic!("tag {t}"),
            };
            assert_eq!(u16_at(pos + 1), dim);
            extra += 7;
            payload += width * dim;
            pos += 7 + width * dim;
        }
    }
    (extra, payload)
}

#[test]
fn memory_report_matches_file_scan() {
    let store = mixed_store();
    let bytes = store.to_bytes();
    let (extra, payload) = scan(&bytes);
    let report = store.memory_report();
    assert_eq!(report.extra_word_bytes, extra);
    assert_eq!(report.payload_bytes, payload);
    assert_eq!(report.baseline_bytes, 4 * (4 * 5 + 3 * 2));
    assert_eq!(extra, EXTRA_WORD_BYTES * 7);
}

#[test]
fn corrupt_tag_reports_its_offset() {
    let mut bytes = fixture();
    let at = 10 + 26;
    bytes[at] = 3;
    match EmbeddingStore::from_bytes(&bytes) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, at as u64),
        other => panic!("expected format error, got {other:?}"),
    }
}

#[test]
fn every_truncation_is_rejected() {
    let bytes = mixed_store().to_bytes();
    for len in 0..bytes.len() {
        assert!(
            matches!(EmbeddingStore::from_bytes(&bytes[..len]), Err(Error::Format { .. })),
            "prefix of {len} bytes accepted"
        );
    }
}

#[test]
fn header_and_trailer_corruptions_are_rejected() {
    let good = fixture();
    let cases: [(usize, u8, u64); 4] = [
        (0, b'X', 0),   // magic
        (4, 9, 4),      // version
        (37, 3, 37),    // row dimension disagrees with the table
        (60, 2, 60),    // score flag
    ];
    for (at, value, expected) in cases {
        let mut bytes = good.clone();
        bytes[at] = value;
        match EmbeddingStore::from_bytes(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, expected, "byte {at}"),
            other => panic!("byte {at}: expected format error, got {other:?}"),
        }
    }
    let mut trailing = good;
    trailing.push(0);
    assert!(matches!(EmbeddingStore::from_bytes(&trailing), Err(Error::Format { .. })));
}
