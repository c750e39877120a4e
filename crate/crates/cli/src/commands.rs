use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use rowtier::metrics::spearman;
use rowtier::selection::{
    permutation_error_shuffle, ExpectationSource, FieldScore, ShuffleOptions,
};
use rowtier::{
    permutation_error_exact, prune_loop_with, taylor_scores, train, Dataset, EmbeddingStore,
    Error, Model, Thresholds, TrainMode,
};

use crate::config::RunConfig;
use crate::report::{ModelMemory, PassCounts, RunReport, ScoreReport};

#[derive(Debug, Parser)]
#[command(name = "rowtier", version, about = "Prune and quantize embedding tables of CTR models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, env = "ROWTIER_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, env = "ROWTIER_SEED")]
    seed: Option<u64>,
    /// Where to write the JSON run report.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn file(self) -> &'static str {
        match self {
            Split::Train => "train.csv",
            Split::Test => "test.csv",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Oracle {
    None,
    Exact,
    Shuffle,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset: <out>/train.csv, <out>/test.csv, <out>/meta.json.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "ROWTIER_N_FIELDS")]
        n_fields: Option<usize>,
        #[arg(long, env = "ROWTIER_CARDINALITY")]
        cardinality: Option<u32>,
        /// Number of label-bearing fields (the first ones).
        #[arg(long, env = "ROWTIER_INFORMATIVE")]
        informative: Option<usize>,
        #[arg(long, env = "ROWTIER_ZIPF")]
        zipf: Option<f64>,
        #[arg(long, env = "ROWTIER_N_SAMPLES")]
        n_samples: Option<usize>,
        #[arg(long, env = "ROWTIER_TEST_FRACTION")]
        test_fraction: Option<f64>,
    },
    /// Train a model (from scratch or from --init) and save a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        hyper: TrainFlags,
        /// Dataset directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "fp32", env = "ROWTIER_MODE")]
        mode: TrainMode,
        /// Continue from this checkpoint instead of a fresh model.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, env = "ROWTIER_DIM")]
        dim: Option<usize>,
        /// Hidden layer widths, e.g. 64,32.
        #[arg(long, value_delimiter = ',', env = "ROWTIER_HIDDEN")]
        hidden: Option<Vec<usize>>,
        #[arg(long, env = "ROWTIER_T8")]
        t8: Option<f64>,
        #[arg(long, env = "ROWTIER_T16")]
        t16: Option<f64>,
        #[arg(long, env = "ROWTIER_RETIER_EVERY")]
        retier_every: Option<usize>,
    },
    /// Score every active field of a checkpoint, optionally against an oracle.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "none")]
        oracle: Oracle,
        /// Number of shuffles for --oracle shuffle.
        #[arg(long, default_value_t = 10)]
        shuffle_rounds: usize,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Iteratively delete the lowest-scoring tables with fine-tuning.
    Prune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        hyper: TrainFlags,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stop once embedding memory is at or below this fraction.
        #[arg(long, env = "ROWTIER_RATE_C")]
        rate_c: Option<f64>,
        /// Stop when AUC drops below this fraction of the starting AUC.
        #[arg(long, env = "ROWTIER_T_ACCURACY")]
        t_accuracy: Option<f64>,
        /// Tables deleted per iteration.
        #[arg(short = 'f', long, env = "ROWTIER_FIELDS_PER_ITERATION")]
        fields_per_iteration: Option<usize>,
        #[arg(long, env = "ROWTIER_SUPPORT_FRACTION")]
        support_fraction: Option<f64>,
        #[arg(long, env = "ROWTIER_FINETUNE_EPOCHS")]
        finetune_epochs: Option<usize>,
        /// Data used to score fields each iteration.
        #[arg(long, value_enum)]
        score_on: Option<Split>,
        /// Save a checkpoint after every accepted iteration into this directory.
        #[arg(long)]
        save_iterations: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Show the tier histogram and memory of a store file.
    Inspect {
        store: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long, env = "ROWTIER_EPOCHS")]
    epochs: Option<usize>,
    #[arg(long, env = "ROWTIER_BATCH_SIZE")]
    batch_size: Option<usize>,
    #[arg(long, env = "ROWTIER_LR")]
    lr: Option<f64>,
}

impl TrainFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.train.epochs, self.epochs);
        set(&mut cfg.train.batch_size, self.batch_size);
        set(&mut cfg.model.learning_rate, self.lr);
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn base_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    set(&mut cfg.seed, common.seed);
    Ok(cfg)
}

fn load_split(dir: &Path, split: Split) -> anyhow::Result<Dataset> {
    Ok(Dataset::load_csv(dir.join(split.file()), dir.join("meta.json"))?)
}

fn check_fits(model: &Model, data: &Dataset) -> anyhow::Result<()> {
    if model.cardinalities() != data.meta().cardinalities.as_slice() {
        return Err(Error::Validation(format!(
            "checkpoint cardinalities {:?} do not match dataset {:?}",
            model.cardinalities(),
            data.meta().cardinalities
        ))
        .into());
    }
    Ok(())
}

/// Report path: `--report` if given, else `default`.
fn finish_report(
    mut report: RunReport,
    start: Instant,
    path: Option<&Path>,
    default: Option<PathBuf>,
) -> anyhow::Result<()> {
    report.wall_time_s = start.elapsed().as_secs_f64();
    if let Some(p) = path.map(Path::to_path_buf).or(default) {
        report.write(&p)?;
        println!("report: {}", p.display());
    }
    Ok(())
}

fn default_report(out: &Path) -> PathBuf {
    out.with_extension("report.json")
}

fn auc_text(m: &rowtier::Metrics) -> String {
    m.auc.map_or("undefined".into(), |a| format!("{a:.5}"))
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let start = Instant::now();
    match cli.command {
        Command::GenData {
            common,
            out,
            n_fields,
            cardinality,
            informative,
            zipf,
            n_samples,
            test_fraction,
        } => {
            let mut cfg = base_config(&common)?;
            set(&mut cfg.data.n_fields, n_fields);
            set(&mut cfg.data.cardinality, cardinality);
            set(&mut cfg.data.informative, informative);
            set(&mut cfg.data.zipf_exponent, zipf);
            set(&mut cfg.data.n_samples, n_samples);
            set(&mut cfg.data.test_fraction, test_fraction);
            if n_fields.is_some() || cardinality.is_some() {
                cfg.data.cardinalities = None;
            }
            let cfg = cfg.finish()?;
            let meta = cfg.dataset_meta()?;
            let data = Dataset::generate_synthetic(meta, cfg.data.n_samples)?;
            let (train_set, test_set) = data.split(cfg.data.test_fraction, cfg.seed)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            let meta_path = out.join("meta.json");
            train_set.save_csv(out.join(Split::Train.file()), &meta_path)?;
            test_set.save_csv(out.join(Split::Test.file()), &meta_path)?;
            let positives = data.labels().iter().filter(|&&y| y == 1).count();
            println!(
                "wrote {} train / {} test samples, {} fields ({} informative), positive rate {:.3} to {}",
                train_set.len(),
                test_set.len(),
                cfg.data.n_fields,
                cfg.data.informative,
                positives as f64 / data.len() as f64,
                out.display()
            );
            finish_report(RunReport::new("gen-data", &cfg), start, common.report.as_deref(), None)
        }

        Command::Train {
            common,
            hyper,
            data,
            out,
            mode,
            init,
            dim,
            hidden,
            t8,
            t16,
            retier_every,
        } => {
            let mut cfg = base_config(&common)?;
            hyper.apply(&mut cfg);
            set(&mut cfg.model.embedding_dim, dim);
            set(&mut cfg.model.hidden_dims, hidden);
            set(&mut cfg.quant.retier_every, retier_every);
            let t = cfg.quant.thresholds;
            cfg.quant.thresholds = Thresholds::new(t8.unwrap_or(t.t8), t16.unwrap_or(t.t16))?;
            let cfg = cfg.finish()?;

            let train_set = load_split(&data, Split::Train)?;
            let test_set = load_split(&data, Split::Test)?;
            let mut model = match &init {
                Some(p) => Model::load(p).with_context(|| format!("loading {}", p.display()))?,
                None => Model::new(cfg.model.clone(), &train_set.meta().cardinalities)?,
            };
            check_fits(&model, &train_set)?;
            let summary = train(&mut model, &train_set, &cfg.train_config(mode))?;
            let metrics = model.evaluate(&test_set)?;
            let store_path = model.save(&out)?;
            let memory = ModelMemory::of(&model);
            println!(
                "trained ({mode:?}, {} epochs, {} batches): test AUC {} logloss {:.5}",
                cfg.train.epochs,
                summary.batches,
                auc_text(&metrics),
                metrics.logloss
            );
            println!(
                "rows int8/fp16/fp32 {}/{}/{}; embedding memory {:.1}% of fp32 ({:.1}% payload, {:.1}% vs all original fields)",
                summary.int8_rows,
                summary.fp16_rows,
                summary.fp32_rows,
                100.0 * memory.store.ratio,
                100.0 * memory.store.payload_ratio,
                100.0 * memory.total_ratio_vs_unpruned
            );
            println!("checkpoint: {} (+ {})", out.display(), store_path.display());
            let mut report = RunReport::new("train", &cfg);
            report.mode = Some(mode);
            report.metrics = Some(metrics);
            report.passes = PassCounts::of(&model);
            report.memory = Some(memory);
            report.train = Some(summary);
            finish_report(report, start, common.report.as_deref(), Some(default_report(&out)))
        }

        Command::Score {
            common,
            data,
            checkpoint,
            oracle,
            shuffle_rounds,
            split,
        } => {
            let cfg = base_config(&common)?.finish()?;
            let dataset = load_split(&data, split)?;
            let model = Model::load(&checkpoint)?;
            check_fits(&model, &dataset)?;
            let scores = taylor_scores(&model, &dataset)?;
            let mut ranked = scores.scores.clone();
            ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.field.cmp(&b.field)));

            let fields: Vec<usize> = scores.scores.iter().map(|s| s.field).collect();
            let (oracle_scores, std_errors) = match oracle {
                Oracle::None => (None, None),
                Oracle::Exact => {
                    let v = fields
                        .iter()
                        .map(|&f| permutation_error_exact(&model, &dataset, f))
                        .collect::<rowtier::Result<Vec<_>>>()?;
                    (Some(v), None)
                }
                Oracle::Shuffle => {
                    let opts = ShuffleOptions {
                        rounds: shuffle_rounds,
                        seed: cfg.seed,
                        batch_size: Some(cfg.train.batch_size),
                    };
                    let est = fields
                        .iter()
                        .map(|&f| permutation_error_shuffle(&model, &dataset, f, opts))
                        .collect::<rowtier::Result<Vec<_>>>()?;
                    (
                        Some(est.iter().map(|e| e.mean).collect::<Vec<_>>()),
                        Some(est.iter().map(|e| e.std_error).collect()),
                    )
                }
            };
            let rho = oracle_scores.as_ref().map(|o| spearman(&scores.values(), o));

            println!("field  score{}", if oracle_scores.is_some() { "        oracle" } else { "" });
            for s in &ranked {
                let pos = fields.iter().position(|&f| f == s.field).expect("scored field");
                match &oracle_scores {
                    Some(o) => println!("{:>5}  {:>+.6e}  {:>+.6e}", s.field, s.score, o[pos]),
                    None => println!("{:>5}  {:>+.6e}", s.field, s.score),
                }
            }
            if let Some(r) = rho {
                println!("spearman(score, oracle) = {r:.4}");
            }
            println!(
                "scoring passes: {} expectation, {} forward, {} backward over {} samples",
                scores.passes.expectation_passes(),
                scores.passes.forward_passes(),
                scores.passes.backward_passes(),
                dataset.len()
            );

            let mut report = RunReport::new("score", &cfg);
            report.passes = PassCounts::of(&model);
            report.scores = Some(ScoreReport {
                ranked,
                passes: scores.passes,
                oracle: format!("{oracle:?}").to_lowercase(),
                oracle_scores: oracle_scores.map(|o| {
                    fields
                        .iter()
                        .zip(o)
                        .map(|(&field, score)| FieldScore { field, score })
                        .collect()
                }),
                oracle_std_errors: std_errors,
                spearman: rho,
            });
            finish_report(report, start, common.report.as_deref(), None)
        }

        Command::Prune {
            common,
            hyper,
            data,
            checkpoint,
            out,
            rate_c,
            t_accuracy,
            fields_per_iteration,
            support_fraction,
            finetune_epochs,
            score_on,
            save_iterations,
        } => {
            let mut cfg = base_config(&common)?;
            hyper.apply(&mut cfg);
            set(&mut cfg.prune.rate_c, rate_c);
            set(&mut cfg.prune.t_accuracy, t_accuracy);
            set(&mut cfg.prune.fields_per_iteration, fields_per_iteration);
            set(&mut cfg.prune.support_fraction, support_fraction);
            set(&mut cfg.prune.finetune_epochs, finetune_epochs);
            if let Some(s) = score_on {
                cfg.prune.expectation_source = match s {
                    Split::Train => ExpectationSource::Train,
                    Split::Test => ExpectationSource::Test,
                };
            }
            let cfg = cfg.finish()?;

            let train_set = load_split(&data, Split::Train)?;
            let test_set = load_split(&data, Split::Test)?;
            let mut model = Model::load(&checkpoint)?;
            check_fits(&model, &train_set)?;
            if let Some(dir) = &save_iterations {
                std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
            }
            let finetune = cfg.train_config(TrainMode::Fp32);
            let outcome = prune_loop_with(
                &mut model,
                &train_set,
                &test_set,
                &cfg.prune,
                &finetune,
                |record, m| {
                    println!(
                        "iteration {}: deleted {:?}, AUC {:.5}, embedding payload {:.1}% of original",
                        record.iteration,
                        record.deleted_fields,
                        record.auc,
                        100.0 * record.memory_ratio
                    );
                    if let Some(dir) = &save_iterations {
                        m.save(dir.join(format!("iter{:03}.ckpt", record.iteration)))?;
                    }
                    Ok(())
                },
            )?;
            if let Some(r) = outcome.log.last().filter(|r| !r.accepted) {
                println!(
                    "iteration {}: deleting {:?} gave AUC {:.5}, below the floor; rolled back",
                    r.iteration, r.deleted_fields, r.auc
                );
            }
            let metrics = model.evaluate(&test_set)?;
            model.save(&out)?;
            println!(
                "stopped ({:?}) after {} iterations: AUC {:.5} -> {}, {} of {} fields kept, embedding payload {:.1}% of original",
                outcome.stop,
                outcome.log.len(),
                outcome.baseline_auc,
                auc_text(&metrics),
                model.active_fields().len(),
                model.n_fields(),
                100.0 * outcome.final_memory_ratio
            );
            println!("checkpoint: {}", out.display());
            let mut report = RunReport::new("prune", &cfg);
            report.metrics = Some(metrics);
            report.passes = PassCounts::of(&model);
            report.memory = Some(ModelMemory::of(&model));
            report.prune = Some(outcome);
            finish_report(report, start, common.report.as_deref(), Some(default_report(&out)))
        }

        Command::Eval {
            common,
            data,
            checkpoint,
            split,
        } => {
            let cfg = base_config(&common)?.finish()?;
            let dataset = load_split(&data, split)?;
            let model = Model::load(&checkpoint)?;
            check_fits(&model, &dataset)?;
            let metrics = model.evaluate(&dataset)?;
            let memory = ModelMemory::of(&model);
            println!(
                "{} samples: AUC {} logloss {:.5}; {} of {} fields active; embedding memory {:.1}% of all original fields",
                dataset.len(),
                auc_text(&metrics),
                metrics.logloss,
                memory.active_fields.len(),
                model.n_fields(),
                100.0 * memory.total_ratio_vs_unpruned
            );
            let mut report = RunReport::new("eval", &cfg);
            report.metrics = Some(metrics);
            report.passes = PassCounts::of(&model);
            report.memory = Some(memory);
            finish_report(report, start, common.report.as_deref(), None)
        }

        Command::Inspect { store, report } => {
            let s = EmbeddingStore::load(&store)?;
            let r = s.memory_report();
            let h = r.histogram();
            println!("table  rows  dim    int8    fp16    fp32  payload  extra");
            for t in &r.tables {
                println!(
                    "{:>5} {:>5} {:>4} {:>7} {:>7} {:>7} {:>8} {:>6}",
                    t.table_id, t.n_rows, t.dim, t.int8_rows, t.fp16_rows, t.fp32_rows, t.payload_bytes, t.extra_word_bytes
                );
            }
            println!(
                "rows int8/fp16/fp32 {}/{}/{}; payload {} + extra words {} = {} bytes, {:.1}% of fp32 ({} bytes)",
                h.int8, h.fp16, h.fp32, r.payload_bytes, r.extra_word_bytes, r.total_bytes,
                100.0 * r.ratio, r.baseline_bytes
            );
            let mut out = RunReport::new("inspect", &RunConfig::default());
            out.store = Some(r);
            finish_report(out, start, report.as_deref(), None)
        }
    }
}
