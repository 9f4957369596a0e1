//! Command-line driver: training, evaluation, gate and order inspection and
//! layer sweeps over the desk-scale translation tasks.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use gt_core::checkpoint::Checkpoint;
use gt_core::data::{make_splits, ParallelCorpus, Split, Vocabulary, UNK};
use gt_core::eval::{sweep_layers, translate_corpus, BleuReport, GateReport};
use gt_core::metrics::{MetricsWriter, DEFAULT_BUCKETS};
use gt_core::subgraph::{group_order_intervals, layer_order_interval, propagate_orders};
use gt_core::train::Trainer;
use gt_core::{Error, Execution, ParamStore, RunConfig, Seq2Seq};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "gtlab",
    version,
    about = "Graph-Transformer translation laboratory"
)]
pub struct Cli {
    /// Overrides the configured seed (training) or the seed of the generated
    /// evaluation corpus.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Write the report here instead of standard output.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Run every work item on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; metrics are written as JSON lines.
    Train(TrainArgs),
    /// Decode a corpus with a checkpoint and report BLEU.
    Evaluate(EvaluateArgs),
    /// Mean weight-gate value per layer and source-length bucket.
    InspectGates(GatesArgs),
    /// Subgraph order intervals reached by each encoder layer.
    InspectOrders(OrdersArgs),
    /// Train baseline and graph models for several depths.
    SweepLayers(SweepArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// `key = value` config file; the desk preset when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Tab-separated `source<TAB>target` file; the generated test split of
    /// the checkpoint's task when absent.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Add per source-length bucket BLEU.
    #[arg(long)]
    pub by_length: bool,
    /// Score the references against themselves without decoding.
    #[arg(long)]
    pub bypass: bool,
    /// Number of sample translations to print.
    #[arg(long, default_value_t = 3)]
    pub samples: usize,
}

#[derive(Debug, Args)]
pub struct GatesArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
}

#[derive(Debug, Args)]
pub struct OrdersArgs {
    #[arg(long, default_value_t = 6)]
    pub layers: usize,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    pub layers: Vec<usize>,
    /// Seeds per configuration; the configured seed when absent.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
}

/// Exit code for a failed command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Numeric(_)) => EXIT_NUMERIC,
        Some(Error::Config { .. } | Error::Contract(_)) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let mut out: Box<dyn Write> = match &cli.out {
        Some(path) => Box::new(BufWriter::new(
            File::create(path).with_context(|| format!("creating {}", path.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    };
    match cli.command {
        Command::Train(a) => train(&a, cli.seed, exec, &mut out)?,
        Command::Evaluate(a) => evaluate(&a, cli.seed, exec, &mut out)?,
        Command::InspectGates(a) => inspect_gates(&a, cli.seed, exec, &mut out)?,
        Command::InspectOrders(a) => inspect_orders(&a, &mut out)?,
        Command::SweepLayers(a) => sweep(&a, cli.seed, exec, &mut out)?,
    }
    out.flush()?;
    Ok(())
}

pub fn load_config(args: &ConfigArgs, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::preset("desk")?,
    };
    for kv in &args.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config {
            field: kv.clone(),
            message: "expected KEY=VALUE".into(),
        })?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(args: &TrainArgs, seed: Option<u64>, exec: Execution, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(&args.config, seed)?;
    let [train, valid, _] = make_splits(&cfg.task, cfg.train.seed)?;
    let mut trainer = Trainer::new(cfg, train)?;
    trainer.execution = exec;
    let mut writer = MetricsWriter::new(out);
    let outcome = trainer.run(Some(&valid), &mut |r| writer.write(r))?;
    match outcome.best {
        Some((step, s)) => log::info!(
            "trained {} steps; best valid loss {:.4}, accuracy {:.4} at step {step}",
            outcome.steps,
            s.loss,
            s.accuracy
        ),
        None => log::info!("trained {} steps", outcome.steps),
    }
    Ok(())
}

/// Rebuild the model stored in a checkpoint.
pub fn load_model(path: &Path) -> Result<(RunConfig, Seq2Seq, ParamStore<f32>)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let mut store = ParamStore::new();
    let model = Seq2Seq::new(&mut store, &ck.config.model, ck.config.train.seed)?;
    ck.restore(&mut store)?;
    Ok((ck.config, model, store))
}

/// The corpus file, checked against the model vocabulary, or the generated
/// test split.
fn load_corpus(args: &CorpusArgs, cfg: &RunConfig, seed: Option<u64>) -> Result<ParallelCorpus> {
    let Some(path) = &args.corpus else {
        let [_, _, test] = make_splits(&cfg.task, seed.unwrap_or(cfg.train.seed))?;
        return Ok(test);
    };
    let vocab = Vocabulary::for_task(cfg.task.vocab_size)?;
    let corpus = ParallelCorpus::read(path, Split::Test, &vocab)?;
    for (i, p) in corpus.pairs.iter().enumerate() {
        if p.src.contains(&UNK) || p.tgt.contains(&UNK) {
            return Err(Error::Data(format!(
                "{}: pair {} has symbols outside the model vocabulary",
                path.display(),
                i + 1
            ))
            .into());
        }
    }
    Ok(corpus)
}

fn evaluate(
    args: &EvaluateArgs,
    seed: Option<u64>,
    exec: Execution,
    out: &mut dyn Write,
) -> Result<()> {
    let (cfg, model, store) = load_model(&args.corpus.checkpoint)?;
    let corpus = load_corpus(&args.corpus, &cfg, seed)?;
    let buckets: &[_] = if args.by_length {
        &DEFAULT_BUCKETS
    } else {
        &[]
    };
    if args.bypass {
        write!(out, "{}", BleuReport::bypass(&corpus, buckets)?)?;
        return Ok(());
    }
    let beam = args.beam.unwrap_or(cfg.model.beam);
    let alpha = args.alpha.unwrap_or(cfg.model.alpha);
    let translations = translate_corpus(&model, &store, &corpus, beam, alpha, exec)?;
    write!(out, "{}", BleuReport::new(&translations, buckets)?)?;
    let vocab = Vocabulary::for_task(cfg.task.vocab_size)?;
    for t in translations.iter().take(args.samples) {
        writeln!(out, "src  {}", vocab.decode(&t.src))?;
        writeln!(out, "ref  {}", vocab.decode(&t.reference))?;
        writeln!(out, "hyp  {}", vocab.decode(&t.hypothesis))?;
    }
    Ok(())
}

fn inspect_gates(
    args: &GatesArgs,
    seed: Option<u64>,
    exec: Execution,
    out: &mut dyn Write,
) -> Result<()> {
    let (cfg, model, store) = load_model(&args.corpus.checkpoint)?;
    let corpus = load_corpus(&args.corpus, &cfg, seed)?;
    write!(
        out,
        "{}",
        GateReport::new(&model, &store, &corpus, &DEFAULT_BUCKETS, exec)?
    )?;
    Ok(())
}

fn inspect_orders(args: &OrdersArgs, out: &mut dyn Write) -> Result<()> {
    let n = args.layers;
    let trace = propagate_orders(n)?;
    writeln!(
        out,
        "layers {n}: maximum subgraph order {}",
        layer_order_interval(n)?.hi
    )?;
    let b = group_order_intervals(n)?;
    writeln!(
        out,
        "group bands for n={n}: low {} middle {} high {}",
        b.low, b.middle, b.high
    )?;
    write!(out, "{trace}")?;
    Ok(())
}

fn sweep(args: &SweepArgs, seed: Option<u64>, exec: Execution, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(&args.config, seed)?;
    let seeds = if args.seeds.is_empty() {
        vec![cfg.train.seed]
    } else {
        args.seeds.clone()
    };
    write!(out, "{}", sweep_layers(&cfg, &args.layers, &seeds, exec)?)?;
    Ok(())
}
