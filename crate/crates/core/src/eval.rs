//! Corpus translation, BLEU reports, gate inspection and layer sweeps.

use std::fmt;

use crate::autograd::Tape;
use crate::config::{Architecture, FusionKind, RunConfig};
use crate::data::{make_splits, ParallelCorpus};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{bleu, bleu_by_length, spearman, Bucket, BucketScore, MetricRecord};
use crate::model::Seq2Seq;
use crate::params::{Ctx, ParamStore};
use crate::train::{EvalStats, Trainer};

#[derive(Clone, Debug, PartialEq)]
pub struct Translation {
    pub src: Vec<usize>,
    pub reference: Vec<usize>,
    /// Output tokens without EOS.
    pub hypothesis: Vec<usize>,
    pub finished: bool,
    pub log_prob: f64,
}

/// Translate every source with beam search (`width == 1` is greedy).
pub fn translate_corpus(
    model: &Seq2Seq,
    store: &ParamStore<f32>,
    corpus: &ParallelCorpus,
    width: usize,
    alpha: f64,
    exec: Execution,
) -> Result<Vec<Translation>> {
    exec.map(&corpus.pairs, |p| {
        let h = model.translate(store, &p.src, width, alpha)?;
        Ok(Translation {
            src: p.src.clone(),
            reference: p.tgt.clone(),
            hypothesis: h.output(crate::data::EOS).to_vec(),
            finished: h.finished,
            log_prob: h.log_prob,
        })
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    pub sentences: usize,
    pub bleu: f64,
    pub buckets: Vec<BucketScore>,
}

impl BleuReport {
    pub fn new(translations: &[Translation], buckets: &[Bucket]) -> Result<Self> {
        let hyps: Vec<Vec<usize>> = translations.iter().map(|t| t.hypothesis.clone()).collect();
        let refs: Vec<Vec<usize>> = translations.iter().map(|t| t.reference.clone()).collect();
        let lens: Vec<usize> = translations.iter().map(|t| t.src.len()).collect();
        Ok(Self {
            sentences: translations.len(),
            bleu: bleu(&hyps, &refs, 4)?,
            buckets: bleu_by_length(&lens, &hyps, &refs, buckets)?,
        })
    }

    /// References scored against themselves, without a model.
    pub fn bypass(corpus: &ParallelCorpus, buckets: &[Bucket]) -> Result<Self> {
        let t: Vec<Translation> = corpus
            .pairs
            .iter()
            .map(|p| Translation {
                src: p.src.clone(),
                reference: p.tgt.clone(),
                hypothesis: p.tgt.clone(),
                finished: true,
                log_prob: 0.0,
            })
            .collect();
        Self::new(&t, buckets)
    }

    pub fn records(&self, split: &str, step: u64) -> Vec<MetricRecord> {
        let mut out = vec![MetricRecord::new("bleu", split, self.bleu, step)];
        for b in &self.buckets {
            if let Some(v) = b.bleu {
                out.push(MetricRecord::new("bleu", split, v, step).with_bucket(b.bucket.label()));
            }
        }
        out
    }
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "BLEU {:.2} over {} sentences", self.bleu, self.sentences)?;
        for b in &self.buckets {
            match b.bleu {
                Some(v) => writeln!(
                    f,
                    "  {:<10} n={:<5} BLEU {:.2}",
                    b.bucket.label(),
                    b.count,
                    v
                )?,
                None => writeln!(f, "  {:<10} n=0     absent", b.bucket.label())?,
            }
        }
        Ok(())
    }
}

/// Mean weight-gate activation per encoder layer and source-length bucket.
#[derive(Clone, Debug, PartialEq)]
pub struct GateReport {
    pub buckets: Vec<Bucket>,
    pub counts: Vec<usize>,
    /// `[layer][bucket]`, `None` for empty buckets.
    pub mean: Vec<Vec<Option<f64>>>,
    /// `mean` minus the shortest non-empty bucket of the same layer.
    pub relative: Vec<Vec<Option<f64>>>,
    /// Spearman correlation between sentence length and per-sentence mean
    /// gate value, per layer.
    pub spearman: Vec<Option<f64>>,
}

/// Per-sentence mean gate value of each layer.
pub fn sentence_gates(model: &Seq2Seq, store: &ParamStore<f32>, src: &[usize]) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let cx = Ctx::eval(&tape, store);
    let enc = model.encode(&cx, &[src])?;
    enc.traces
        .iter()
        .map(|t| {
            let w = t
                .gate
                .ok_or_else(|| Error::Contract("layer has no weight gate".into()))?
                .value();
            Ok(w.data().iter().map(|&x| f64::from(x)).sum::<f64>() / w.numel() as f64)
        })
        .collect()
}

impl GateReport {
    pub fn new(
        model: &Seq2Seq,
        store: &ParamStore<f32>,
        corpus: &ParallelCorpus,
        buckets: &[Bucket],
        exec: Execution,
    ) -> Result<Self> {
        if model.cfg.architecture != Architecture::Graph
            || model.cfg.fusion != FusionKind::WeightGate
        {
            return Err(Error::Config {
                field: "fusion".into(),
                message: format!(
                    "gate inspection needs a graph model with weight-gate fusion, this one is {} with {} fusion",
                    model.cfg.architecture, model.cfg.fusion
                ),
            });
        }
        let n_layers = model.cfg.n_layers;
        let per_sentence = exec
            .map(&corpus.pairs, |p| sentence_gates(model, store, &p.src))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let lens: Vec<usize> = corpus.pairs.iter().map(|p| p.src.len()).collect();
        let counts: Vec<usize> = buckets
            .iter()
            .map(|b| lens.iter().filter(|&&l| b.contains(l)).count())
            .collect();
        let mut mean = vec![vec![None; buckets.len()]; n_layers];
        for (layer, row) in mean.iter_mut().enumerate() {
            for (bi, b) in buckets.iter().enumerate() {
                let vals: Vec<f64> = per_sentence
                    .iter()
                    .zip(&lens)
                    .filter(|(_, &l)| b.contains(l))
                    .map(|(g, _)| g[layer])
                    .collect();
                if !vals.is_empty() {
                    row[bi] = Some(vals.iter().sum::<f64>() / vals.len() as f64);
                }
            }
        }
        let relative = mean
            .iter()
            .map(|row| {
                let base = row.iter().flatten().next().copied();
                row.iter().map(|v| Some(v.as_ref()? - base?)).collect()
            })
            .collect();
        let xs: Vec<f64> = lens.iter().map(|&l| l as f64).collect();
        let spearman = (0..n_layers)
            .map(|layer| {
                let ys: Vec<f64> = per_sentence.iter().map(|g| g[layer]).collect();
                spearman(&xs, &ys)
            })
            .collect();
        Ok(Self {
            buckets: buckets.to_vec(),
            counts,
            mean,
            relative,
            spearman,
        })
    }
}

impl fmt::Display for GateReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: &Option<f64>| v.map_or("-".to_string(), |x| format!("{x:+.4}"));
        write!(f, "{:<6}", "layer")?;
        for (b, n) in self.buckets.iter().zip(&self.counts) {
            write!(f, " {:>18}", format!("{} n={n}", b.label()))?;
        }
        writeln!(f, " {:>9}", "spearman")?;
        for (layer, (abs, rel)) in self.mean.iter().zip(&self.relative).enumerate() {
            write!(f, "{:<6}", layer + 1)?;
            for (a, r) in abs.iter().zip(rel) {
                let cell = match a {
                    Some(a) => format!("{a:.4} ({})", opt(r)),
                    None => "absent".into(),
                };
                write!(f, " {cell:>18}")?;
            }
            writeln!(f, " {:>9}", opt(&self.spearman[layer]))?;
        }
        writeln!(
            f,
            "cells: mean gate w (difference from the shortest non-empty bucket)"
        )
    }
}

/// Outcome of one train-then-evaluate run.
#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub architecture: Architecture,
    pub layers: usize,
    pub seed: u64,
    pub steps: u64,
    pub valid: Option<EvalStats>,
    pub test: BleuReport,
    pub test_accuracy: EvalStats,
}

/// Generate the task data, train with `cfg`, keep the best-by-validation
/// parameters and decode the test split with the configured beam.
pub fn run_experiment(
    cfg: &RunConfig,
    exec: Execution,
) -> Result<(ExperimentResult, Seq2Seq, ParamStore<f32>)> {
    let [train, valid, test] = make_splits(&cfg.task, cfg.train.seed)?;
    let mut trainer = Trainer::new(cfg.clone(), train)?;
    trainer.execution = exec;
    let outcome = trainer.run(Some(&valid), &mut |_| Ok(()))?;
    let store = outcome.best_params;
    let model = trainer.model;
    let tr = translate_corpus(&model, &store, &test, cfg.model.beam, cfg.model.alpha, exec)?;
    let test_accuracy =
        crate::train::evaluate_loss(&model, &store, &test, cfg.train.batch_tokens, exec)?;
    let result = ExperimentResult {
        architecture: cfg.model.architecture,
        layers: cfg.model.n_layers,
        seed: cfg.train.seed,
        steps: outcome.steps,
        valid: outcome.best.map(|(_, s)| s),
        test: BleuReport::new(&tr, &crate::metrics::DEFAULT_BUCKETS)?,
        test_accuracy,
    };
    Ok((result, model, store))
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub runs: Vec<ExperimentResult>,
}

impl SweepReport {
    /// Test BLEU of every run with the given architecture and depth.
    pub fn scores(&self, arch: Architecture, layers: usize) -> Vec<f64> {
        self.runs
            .iter()
            .filter(|r| r.architecture == arch && r.layers == layers)
            .map(|r| r.test.bleu)
            .collect()
    }

    pub fn layer_counts(&self) -> Vec<usize> {
        let mut l: Vec<usize> = self.runs.iter().map(|r| r.layers).collect();
        l.sort_unstable();
        l.dedup();
        l
    }
}

impl fmt::Display for SweepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<7} {:>22} {:>22}",
            "layers", "baseline BLEU", "graph BLEU"
        )?;
        for layers in self.layer_counts() {
            let cell = |arch| {
                let s = self.scores(arch, layers);
                if s.is_empty() {
                    "-".to_string()
                } else {
                    let (m, sd) = mean_std(&s);
                    format!("{m:.2} ± {sd:.2} (n={})", s.len())
                }
            };
            writeln!(
                f,
                "{layers:<7} {:>22} {:>22}",
                cell(Architecture::Baseline),
                cell(Architecture::Graph)
            )?;
        }
        writeln!(f, "runs")?;
        for r in &self.runs {
            writeln!(
                f,
                "{:<7} {:<9} seed {:<4} BLEU {:.2}",
                r.layers, r.architecture, r.seed, r.test.bleu
            )?;
        }
        Ok(())
    }
}

/// Train a baseline and a graph model per layer count and seed. The graph
/// variant keeps the fusion and width settings of `base`.
pub fn sweep_layers(
    base: &RunConfig,
    layers: &[usize],
    seeds: &[u64],
    exec: Execution,
) -> Result<SweepReport> {
    if layers.is_empty() || seeds.is_empty() {
        return Err(Error::Contract(
            "sweep needs at least one layer count and seed".into(),
        ));
    }
    let mut runs = Vec::new();
    for &n in layers {
        for arch in [Architecture::Baseline, Architecture::Graph] {
            for &seed in seeds {
                let mut cfg = base.clone();
                cfg.model.n_layers = n;
                cfg.model.architecture = arch;
                cfg.train.seed = seed;
                cfg.train.checkpoint_dir = None;
                let (r, _, _) = run_experiment(&cfg, exec)?;
                log::info!(
                    "sweep layers={n} {arch} seed={seed}: BLEU {:.2}",
                    r.test.bleu
                );
                runs.push(r);
            }
        }
    }
    Ok(SweepReport { runs })
}
