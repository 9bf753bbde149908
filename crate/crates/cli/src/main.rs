use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use tabroute::analysis::{
    analyze, lambda_sweep, write_alignment_csv, write_outcomes_csv, write_path_distribution_csv, OutcomeRecord,
};
use tabroute::config::{ConfigError, RunConfig, Stack};
use tabroute::corpus::{load_corpus, read_jsonl, write_corpus, write_jsonl, RawRecord};
use tabroute::engine::{
    infer, measure_cost, route, run_efficiency_bench, write_cost_csv, RoutingMode,
};
use tabroute::gate::{load_checkpoint, save_checkpoint, GateParameters};
use tabroute::ingest::{ingest, label_book_from_corpus, label_book_from_raw, IngestError};
use tabroute::synth::generate;
use tabroute::trainer::{split_train_val, train, write_history_csv, RoutingExample};
use tabroute::{DatasetTag, RoutePath};

const CONFIG_SNAPSHOT: &str = "config.toml";

#[derive(Parser)]
#[command(name = "tabroute", version, about = "Cost-aware routing between table-as-text, table-as-image and fusion")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true, env = "TABROUTE_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic raw corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        per_dataset: Option<usize>,
        #[arg(long)]
        per_eval_only: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Embed raw records and label every path.
    Ingest {
        #[arg(long)]
        raw: PathBuf,
        /// Corpus directory to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the gate.
    Train {
        #[command(flatten)]
        io: CorpusRun,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        grad_accum: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Route one example and print its path and probabilities.
    Route {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        id: String,
    },
    /// End-to-end inference with latency accounting.
    Infer {
        #[command(flatten)]
        io: CorpusRun,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Always fuse, skipping the gate.
        #[arg(long)]
        non_adaptive: bool,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
    },
    /// Measure per-path costs on a small stratified testbed.
    ProfileCost {
        #[command(flatten)]
        io: CorpusRun,
        /// Testbed instances per dataset.
        #[arg(long, default_value_t = 10)]
        per_dataset: usize,
    },
    /// Adaptive vs. always-fuse latency and throughput.
    Bench {
        #[command(flatten)]
        io: CorpusRun,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::All)]
        split: Split,
    },
    /// Train one gate per lambda and tabulate the policies.
    SweepLambda {
        #[command(flatten)]
        io: CorpusRun,
        /// Comma-separated lambdas.
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
    },
    /// Policy diagnostics on routed outcomes.
    Analyze {
        #[command(flatten)]
        io: CorpusRun,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
    },
}

#[derive(Args)]
struct CorpusRun {
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory; receives the resolved config snapshot.
    #[arg(long)]
    run_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    All,
}

enum Failure {
    Config(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("{}", json!({"error": "config", "message": msg}));
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("{}", json!({"error": "runtime", "message": format!("{e:#}")}));
            ExitCode::from(1)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, ConfigError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn prepare_run_dir(dir: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_file(&dir.join(CONFIG_SNAPSHOT), cfg.to_toml().as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn write_csv(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> anyhow::Result<()>) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    write_file(path, &buf)
}

fn load(corpus: &Path) -> anyhow::Result<Vec<RoutingExample>> {
    let examples = load_corpus(corpus).with_context(|| format!("loading corpus {}", corpus.display()))?;
    if examples.is_empty() {
        bail!("corpus {} is empty", corpus.display());
    }
    Ok(examples)
}

/// Validation holds trainable tags only; evaluation-only tags never enter
/// either training split.
fn split(examples: &[RoutingExample], cfg: &RunConfig) -> (Vec<RoutingExample>, Vec<RoutingExample>) {
    let trainable: Vec<RoutingExample> = examples.iter().filter(|e| e.dataset.is_trainable()).cloned().collect();
    split_train_val(&trainable, cfg.split.val_fraction, cfg.split.seed)
}

fn select(examples: Vec<RoutingExample>, which: Split, cfg: &RunConfig) -> Vec<RoutingExample> {
    match which {
        Split::All => examples,
        Split::Train => split(&examples, cfg).0,
        Split::Val => split(&examples, cfg).1,
    }
}

fn stack_for(cfg: &RunConfig, examples: &[RoutingExample]) -> anyhow::Result<Stack> {
    Stack::build(cfg, Arc::new(label_book_from_corpus(examples))).context("building backends")
}

fn gate(path: &Path) -> anyhow::Result<GateParameters> {
    Ok(load_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?
        .params)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Synth {
            out,
            per_dataset,
            per_eval_only,
            seed,
        } => {
            if let Some(n) = per_dataset {
                cfg.synth.per_dataset = n;
            }
            if let Some(n) = per_eval_only {
                cfg.synth.per_eval_only = n;
            }
            if let Some(s) = seed {
                cfg.synth.seed = s;
            }
            let raw = generate(&cfg.synth);
            write_jsonl(&out, &raw).context("writing raw corpus")?;
            log::info!("wrote {} raw records to {}", raw.len(), out.display());
        }
        Command::Ingest { raw, out } => {
            let records: Vec<RawRecord> = read_jsonl(&raw).context("reading raw records")?;
            let stack = Stack::build(&cfg, Arc::new(label_book_from_raw(&records))).context("building backends")?;
            let report = match ingest(&records, &stack.backends(), cfg.engine.timing, &cfg.ingest) {
                Ok(r) => r,
                Err(IngestError::SkipRate { report, .. }) => {
                    prepare_run_dir(&out, &cfg)?;
                    write_jsonl(&out.join("skipped.jsonl"), &report.skipped).context("writing skip log")?;
                    return Err(anyhow!(
                        "skipped {} of {} records (limit {})",
                        report.skipped.len(),
                        records.len(),
                        cfg.ingest.max_skip_rate
                    )
                    .into());
                }
                Err(e) => return Err(anyhow!(e).into()),
            };
            prepare_run_dir(&out, &cfg)?;
            write_corpus(&out, &report.examples).context("writing corpus")?;
            write_jsonl(&out.join("skipped.jsonl"), &report.skipped).context("writing skip log")?;
            log::info!("ingested {} records, skipped {}", report.examples.len(), report.skipped.len());
        }
        Command::Train {
            io,
            lambda,
            lr,
            epochs,
            batch_size,
            grad_accum,
            seed,
        } => {
            let t = &mut cfg.train;
            lambda.map(|v| t.lambda = v);
            lr.map(|v| t.lr_max = v);
            epochs.map(|v| t.epochs = v);
            batch_size.map(|v| t.batch_size = v);
            grad_accum.map(|v| t.grad_accum = v);
            seed.map(|v| t.seed = v);
            cfg.validate()?;
            let examples = load(&io.corpus)?;
            prepare_run_dir(&io.run_dir, &cfg)?;
            let (tr, va) = split(&examples, &cfg);
            let outcome = train(&tr, &va, &cfg.train, &cfg.costs).context("training")?;
            save_checkpoint(
                &io.run_dir.join("gate.ckpt"),
                &outcome.best,
                Some(&outcome.optimizer),
                &outcome.checkpoint_metadata(&cfg.train),
            )
            .context("saving checkpoint")?;
            write_csv(&io.run_dir.join("history.csv"), |b| Ok(write_history_csv(&outcome.history, b)?))?;
            write_json(
                &io.run_dir.join("metrics.json"),
                &json!({
                    "best_epoch": outcome.best_epoch,
                    "validation": outcome.best_metrics,
                    "epochs": outcome.epoch_metrics,
                    "n_train": tr.len(),
                    "n_val": va.len(),
                }),
            )?;
            println!("{}", serde_json::to_string(&outcome.best_metrics).map_err(anyhow::Error::from)?);
        }
        Command::Route { corpus, checkpoint, id } => {
            let examples = load(&corpus)?;
            let ex = examples
                .iter()
                .find(|e| e.id == id)
                .ok_or_else(|| anyhow!("no example with id {id:?}"))?;
            let gi = ex.embeddings.as_ref().expect("corpus loader resolves embeddings");
            let decision = route(&gate(&checkpoint)?, gi, &cfg.costs).map_err(anyhow::Error::from)?;
            println!(
                "{}",
                json!({"id": id, "path": decision.path, "probabilities": decision.probabilities})
            );
        }
        Command::Infer {
            io,
            checkpoint,
            non_adaptive,
            split,
        } => {
            if non_adaptive {
                cfg.engine.mode = RoutingMode::NonAdaptive;
            }
            let gate = match (cfg.engine.mode, checkpoint) {
                (_, Some(p)) => Some(gate(&p)?),
                (RoutingMode::Adaptive, None) => return Err(anyhow!("adaptive inference needs --checkpoint").into()),
                (RoutingMode::NonAdaptive, None) => None,
            };
            let examples = load(&io.corpus)?;
            let stack = stack_for(&cfg, &examples)?;
            let examples = select(examples, split, &cfg);
            prepare_run_dir(&io.run_dir, &cfg)?;
            let backends = stack.backends();
            let mut records = Vec::with_capacity(examples.len());
            let mut outcomes = Vec::with_capacity(examples.len());
            for ex in &examples {
                let rec = infer(ex, gate.as_ref(), &backends, &cfg.costs, &cfg.engine).map_err(anyhow::Error::from)?;
                outcomes.push(OutcomeRecord::from_inference(ex, &rec));
                records.push(rec);
            }
            write_jsonl(&io.run_dir.join("records.jsonl"), &records).context("writing records")?;
            let n = records.len().max(1) as f64;
            let summary = json!({
                "n": records.len(),
                "mode": cfg.engine.mode,
                "mean_latency_s": records.iter().map(|r| r.parallel_latency).sum::<f64>() / n,
                "mean_tps": records.iter().map(|r| r.tps()).sum::<f64>() / n,
                "accuracy": outcomes.iter().filter(|o| o.final_correct).count() as f64 / n,
                "degraded": records.iter().filter(|r| r.degraded).count(),
            });
            write_json(&io.run_dir.join("summary.json"), &summary)?;
            println!("{summary}");
        }
        Command::ProfileCost { io, per_dataset } => {
            let examples = load(&io.corpus)?;
            let stack = stack_for(&cfg, &examples)?;
            let mut by_tag: BTreeMap<DatasetTag, Vec<RoutingExample>> = BTreeMap::new();
            for ex in examples {
                let slot = by_tag.entry(ex.dataset).or_default();
                if slot.len() < per_dataset {
                    slot.push(ex);
                }
            }
            let testbed: Vec<RoutingExample> = by_tag.into_values().flatten().collect();
            prepare_run_dir(&io.run_dir, &cfg)?;
            let backends = stack.backends();
            let rows = RoutePath::ALL
                .iter()
                .map(|&p| measure_cost(p, &testbed, &backends.generators, cfg.engine.timing, &cfg.cost))
                .collect::<Result<Vec<_>, _>>()
                .map_err(anyhow::Error::from)?;
            write_csv(&io.run_dir.join("cost.csv"), |b| Ok(write_cost_csv(&rows, b)?))?;
            for r in &rows {
                println!("{}", serde_json::to_string(r).map_err(anyhow::Error::from)?);
            }
        }
        Command::Bench { io, checkpoint, split } => {
            let gate = gate(&checkpoint)?;
            let examples = load(&io.corpus)?;
            let stack = stack_for(&cfg, &examples)?;
            let mut by_tag: BTreeMap<DatasetTag, Vec<RoutingExample>> = BTreeMap::new();
            for ex in select(examples, split, &cfg) {
                by_tag.entry(ex.dataset).or_default().push(ex);
            }
            prepare_run_dir(&io.run_dir, &cfg)?;
            let report = run_efficiency_bench(&by_tag, &gate, &stack.backends(), &cfg.costs, &cfg.engine, &cfg.bench)
                .map_err(anyhow::Error::from)?;
            write_csv(&io.run_dir.join("bench.csv"), |b| Ok(report.write_csv(b)?))?;
            write_json(&io.run_dir.join("bench_warnings.json"), &report.warnings)?;
            for row in &report.summary {
                println!("{}", serde_json::to_string(row).map_err(anyhow::Error::from)?);
            }
        }
        Command::SweepLambda { io, lambdas } => {
            if let Some(l) = lambdas {
                cfg.sweep.lambdas = l;
            }
            cfg.validate()?;
            let examples = load(&io.corpus)?;
            prepare_run_dir(&io.run_dir, &cfg)?;
            let (tr, va) = split(&examples, &cfg);
            let rows = lambda_sweep(&tr, &va, &cfg.sweep.lambdas, &cfg.train, &cfg.costs).context("lambda sweep")?;
            write_csv(&io.run_dir.join("path_distribution.csv"), |b| Ok(write_path_distribution_csv(&rows, b)?))?;
            write_csv(&io.run_dir.join("alignment.csv"), |b| Ok(write_alignment_csv(&rows, b)?))?;
            write_json(&io.run_dir.join("sweep.json"), &rows)?;
        }
        Command::Analyze { io, checkpoint, split } => {
            let gate = gate(&checkpoint)?;
            let examples = select(load(&io.corpus)?, split, &cfg);
            prepare_run_dir(&io.run_dir, &cfg)?;
            let mut outcomes = Vec::with_capacity(examples.len());
            for ex in &examples {
                let gi = ex.embeddings.as_ref().expect("corpus loader resolves embeddings");
                let d = route(&gate, gi, &cfg.costs).map_err(anyhow::Error::from)?;
                outcomes.push(OutcomeRecord::from_routing(ex, d.path));
            }
            let report = analyze(&outcomes).context("analysis")?;
            write_csv(&io.run_dir.join("outcomes.csv"), |b| Ok(write_outcomes_csv(&outcomes, b)?))?;
            write_json(&io.run_dir.join("analysis.json"), &report)?;
            println!("{}", serde_json::to_string(&report).map_err(anyhow::Error::from)?);
        }
    }
    Ok(())
}
