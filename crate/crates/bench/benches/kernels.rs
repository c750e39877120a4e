use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use rowtier::quantizer::{dequantize_row, encode_row};
use rowtier::store::MixedTable;
use rowtier::{
    taylor_scores, train, Dataset, DatasetMeta, EmbeddingStore, Model, ModelConfig,
    PrecisionTier, RoundingMode, ScalePolicy, Thresholds, TrainConfig,
};

fn row(dim: usize) -> Vec<f64> {
    (0..dim).map(|k| ((k * 37 % 19) as f64 - 9.0) * 0.013).collect()
}

fn quantize(c: &mut Criterion) {
    let mut g = c.benchmark_group("row_codec");
    for dim in [16, 64] {
        let r = row(dim);
        g.throughput(Throughput::Elements(dim as u64));
        for tier in PrecisionTier::ALL {
            let name = format!("{tier:?}");
            g.bench_with_input(BenchmarkId::new(format!("encode/{name}"), dim), &r, |b, r| {
                let mut mode = RoundingMode::stochastic(1);
                b.iter(|| encode_row(black_box(r), tier, ScalePolicy::Symmetric, &mut mode).unwrap())
            });
            let (scale, payload) = encode_row(&r, tier, ScalePolicy::Symmetric, &mut RoundingMode::Nearest).unwrap();
            g.bench_with_input(BenchmarkId::new(format!("decode/{name}"), dim), &payload, |b, p| {
                b.iter(|| dequantize_row(black_box(p), tier, scale).unwrap())
            });
        }
    }
    g.finish();
}

fn store_bytes(c: &mut Criterion) {
    let mut store = EmbeddingStore::new(ScalePolicy::Symmetric, RoundingMode::Nearest);
    store
        .add_table(MixedTable::new(0, 10_000, 16, Thresholds::default()).unwrap())
        .unwrap();
    for r in 0..10_000 {
        store.write(0, r, &row(16)).unwrap();
    }
    let bytes = store.to_bytes();
    let mut g = c.benchmark_group("store");
    g.throughput(Throughput::Bytes(bytes.len() as u64));
    g.bench_function("serialize/10k_rows", |b| b.iter(|| black_box(&store).to_bytes()));
    g.bench_function("parse/10k_rows", |b| {
        b.iter(|| EmbeddingStore::from_bytes(black_box(&bytes)).unwrap())
    });
    g.finish();
}

fn trained_model() -> (Model, Dataset) {
    let meta = DatasetMeta::uniform(20, 1000, (0..10).collect(), 1.0, 3);
    let data = Dataset::generate_synthetic(meta.clone(), 20_000).unwrap();
    let (train_set, test_set) = data.split(0.2, 3).unwrap();
    let cfg = ModelConfig { embedding_dim: 8, hidden_dims: vec![64, 32], seed: 3, ..ModelConfig::desk() };
    let mut model = Model::new(cfg, &meta.cardinalities).unwrap();
    train(&mut model, &train_set, &TrainConfig { batch_size: 256, learning_rate: 0.1, ..Default::default() })
        .unwrap();
    (model, test_set)
}

fn network(c: &mut Criterion) {
    let (model, test_set) = trained_model();
    let idx: Vec<usize> = (0..256).collect();
    let labels: Vec<u8> = idx.iter().map(|&i| test_set.labels()[i]).collect();
    let mut g = c.benchmark_group("network");
    g.throughput(Throughput::Elements(256));
    g.bench_function("forward/256", |b| b.iter(|| model.forward(&test_set, black_box(&idx)).unwrap()));
    g.bench_function("forward_backward/256", |b| {
        b.iter(|| {
            let cache = model.forward(&test_set, black_box(&idx)).unwrap();
            model.backward(&cache, &labels).unwrap()
        })
    });
    g.finish();

    let mut g = c.benchmark_group("selection");
    g.sample_size(10);
    g.throughput(Throughput::Elements(test_set.len() as u64));
    g.bench_function("taylor_scores/20_fields", |b| {
        b.iter(|| taylor_scores(&model, black_box(&test_set)).unwrap())
    });
    g.finish();
}

criterion_group!(benches, quantize, store_bytes, network);
criterion_main!(benches);
