//! Model and run configuration with a flat `key = value` text format.
//!
//! A `preset = <name>` line selects the base values (wherever it appears);
//! every other line overrides one field. Unknown keys and bad values are
//! rejected with an error naming the field.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::TaskKind;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// Vanilla Transformer encoder.
    Baseline,
    /// Encoder with previous/incremental streams and a three-part attention group.
    Graph,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionKind {
    Sum,
    WeightGate,
    SelfGate,
}

impl FromStr for Architecture {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "baseline" | "transformer" => Ok(Self::Baseline),
            "graph" | "graph-transformer" => Ok(Self::Graph),
            _ => Err(format!("expected baseline|graph, got `{s}`")),
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Baseline => "baseline",
            Self::Graph => "graph",
        })
    }
}

impl FromStr for FusionKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sum" => Ok(Self::Sum),
            "weight-gate" | "gate" => Ok(Self::WeightGate),
            "self-gate" => Ok(Self::SelfGate),
            _ => Err(format!("expected sum|weight-gate|self-gate, got `{s}`")),
        }
    }
}

impl std::fmt::Display for FusionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sum => "sum",
            Self::WeightGate => "weight-gate",
            Self::SelfGate => "self-gate",
        })
    }
}

/// Architecture and optimisation hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub fusion: FusionKind,
    pub half_dim: bool,
    pub shared_qkv: bool,
    pub ffn_on_full: bool,
    pub share_embeddings: bool,
    pub label_smoothing: f64,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub warmup: u64,
    pub lr_scale: f64,
    pub beam: usize,
    pub alpha: f64,
    /// Decoding stops after `source length + max_decode_extra` tokens.
    pub max_decode_extra: usize,
}

impl ModelConfig {
    /// Working width of the encoder's attention group.
    pub fn attention_width(&self) -> usize {
        if self.half_dim && self.architecture == Architecture::Graph {
            self.d_model / 2
        } else {
            self.d_model
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::Config {
                field: field.into(),
                message,
            })
        };
        if self.n_heads == 0 {
            return bad("heads", "must be positive".into());
        }
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return bad(
                "d_model",
                format!("{} not divisible by {} heads", self.d_model, self.n_heads),
            );
        }
        if self.half_dim && self.d_model % (2 * self.n_heads) != 0 {
            return bad(
                "half_dim",
                format!(
                    "d_model {} not divisible by 2·{} heads",
                    self.d_model, self.n_heads
                ),
            );
        }
        if self.d_ff == 0 {
            return bad("d_ff", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("{} outside [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(
                "label_smoothing",
                format!("{} outside [0, 1)", self.label_smoothing),
            );
        }
        if self.src_vocab < 5 || self.tgt_vocab < 5 {
            return bad("vocab_size", "vocabulary too small".into());
        }
        if self.share_embeddings && self.src_vocab != self.tgt_vocab {
            return bad(
                "share_embeddings",
                "source and target vocabularies differ".into(),
            );
        }
        if self.warmup == 0 {
            return bad("warmup", "must be positive".into());
        }
        if !(self.lr_scale > 0.0) {
            return bad("lr_scale", "must be positive".into());
        }
        if self.beam == 0 {
            return bad("beam", "must be at least 1".into());
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha", "must be non-negative".into());
        }
        Ok(())
    }
}

/// Synthetic task to train and evaluate on.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_pairs: usize,
    pub valid_pairs: usize,
    pub test_pairs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSpec {
    pub max_steps: u64,
    pub seed: u64,
    pub eval_interval: u64,
    pub batch_tokens: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub train: TrainSpec,
}

pub const PRESETS: [&str; 3] = ["desk", "small-de-en", "base-en-de"];

impl RunConfig {
    /// Named preset. `small-de-en` and `base-en-de` carry the published
    /// hyperparameters; `desk` scales them down for CPU runs.
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        match name {
            "desk" => {}
            "small-de-en" => {
                let m = &mut cfg.model;
                (m.n_layers, m.d_model, m.n_heads, m.d_ff, m.dropout) = (6, 512, 4, 1024, 0.3);
                m.warmup = 4000;
                cfg.train.batch_tokens = 1024;
            }
            "base-en-de" => {
                let m = &mut cfg.model;
                (m.n_layers, m.d_model, m.n_heads, m.d_ff, m.dropout) = (6, 512, 8, 2048, 0.1);
                m.warmup = 4000;
                cfg.train.batch_tokens = 4096;
            }
            other => {
                return Err(Error::Config {
                    field: "preset".into(),
                    message: format!("unknown preset `{other}` (known: {})", PRESETS.join(", ")),
                })
            }
        }
        Ok(cfg)
    }

    fn desk() -> Self {
        let task = TaskSpec {
            kind: TaskKind::Copy,
            vocab_size: 10,
            min_len: 4,
            max_len: 12,
            train_pairs: 4000,
            valid_pairs: 200,
            test_pairs: 200,
        };
        let vocab = task.vocab_size + crate::data::RESERVED;
        Self {
            model: ModelConfig {
                architecture: Architecture::Graph,
                n_layers: 2,
                d_model: 64,
                n_heads: 2,
                d_ff: 128,
                dropout: 0.1,
                fusion: FusionKind::Sum,
                half_dim: false,
                shared_qkv: false,
                ffn_on_full: false,
                share_embeddings: false,
                label_smoothing: 0.0,
                src_vocab: vocab,
                tgt_vocab: vocab,
                warmup: 400,
                lr_scale: 1.0,
                beam: 6,
                alpha: 0.2,
                max_decode_extra: 50,
            },
            task,
            train: TrainSpec {
                max_steps: 3000,
                seed: 1,
                eval_interval: 250,
                batch_tokens: 512,
                checkpoint_dir: None,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.task;
        if t.min_len == 0 || t.min_len > t.max_len || t.max_len > crate::data::MAX_SENTENCE_LEN {
            return Err(Error::Config {
                field: "min_len".into(),
                message: format!(
                    "length range [{}, {}] outside [1, 250]",
                    t.min_len, t.max_len
                ),
            });
        }
        if t.train_pairs == 0 {
            return Err(Error::Config {
                field: "train_pairs".into(),
                message: "must be positive".into(),
            });
        }
        if self.train.batch_tokens == 0 {
            return Err(Error::Config {
                field: "batch_tokens".into(),
                message: "must be positive".into(),
            });
        }
        crate::data::alphabet(t.vocab_size).map_err(|e| Error::Config {
            field: "vocab_size".into(),
            message: e.to_string(),
        })?;
        let expected = t.vocab_size + crate::data::RESERVED;
        if self.model.src_vocab != expected || self.model.tgt_vocab != expected {
            return Err(Error::Config {
                field: "vocab_size".into(),
                message: "model vocabulary does not match the task alphabet".into(),
            });
        }
        Ok(())
    }

    /// Parse the `key = value` format.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                field: format!("line {}", lineno + 1),
                message: format!("expected key = value, got `{line}`"),
            })?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        let preset = entries
            .iter()
            .rev()
            .find(|(k, _)| k == "preset")
            .map_or("desk", |(_, v)| v.as_str());
        let mut cfg = Self::preset(preset)?;
        for (k, v) in &entries {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Set one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<V: FromStr>(key: &str, value: &str) -> Result<V>
        where
            V::Err: std::fmt::Display,
        {
            value.parse().map_err(|e: V::Err| Error::Config {
                field: key.into(),
                message: format!("cannot parse `{value}`: {e}"),
            })
        }
        let m = &mut self.model;
        match key {
            "architecture" => m.architecture = p(key, value)?,
            "layers" => m.n_layers = p(key, value)?,
            "d_model" => m.d_model = p(key, value)?,
            "heads" => m.n_heads = p(key, value)?,
            "d_ff" => m.d_ff = p(key, value)?,
            "dropout" => m.dropout = p(key, value)?,
            "fusion" => m.fusion = p(key, value)?,
            "half_dim" => m.half_dim = p(key, value)?,
            "shared_qkv" => m.shared_qkv = p(key, value)?,
            "ffn_on_full" => m.ffn_on_full = p(key, value)?,
            "share_embeddings" => m.share_embeddings = p(key, value)?,
            "label_smoothing" => m.label_smoothing = p(key, value)?,
            "warmup" => m.warmup = p(key, value)?,
            "lr_scale" => m.lr_scale = p(key, value)?,
            "beam" => m.beam = p(key, value)?,
            "alpha" => m.alpha = p(key, value)?,
            "max_decode_extra" => m.max_decode_extra = p(key, value)?,
            "task" => self.task.kind = p(key, value)?,
            "vocab_size" => {
                self.task.vocab_size = p(key, value)?;
                m.src_vocab = self.task.vocab_size + crate::data::RESERVED;
                m.tgt_vocab = m.src_vocab;
            }
            "min_len" => self.task.min_len = p(key, value)?,
            "max_len" => self.task.max_len = p(key, value)?,
            "train_pairs" => self.task.train_pairs = p(key, value)?,
            "valid_pairs" => self.task.valid_pairs = p(key, value)?,
            "test_pairs" => self.task.test_pairs = p(key, value)?,
            "max_steps" => self.train.max_steps = p(key, value)?,
            "seed" => self.train.seed = p(key, value)?,
            "eval_interval" => self.train.eval_interval = p(key, value)?,
            "batch_tokens" => self.train.batch_tokens = p(key, value)?,
            "checkpoint_dir" => {
                self.train.checkpoint_dir = (!value.is_empty()).then(|| PathBuf::from(value));
            }
            _ => {
                return Err(Error::Config {
                    field: key.into(),
                    message: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    /// Full text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.task;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("architecture", m.architecture.to_string());
        kv("layers", m.n_layers.to_string());
        kv("d_model", m.d_model.to_string());
        kv("heads", m.n_heads.to_string());
        kv("d_ff", m.d_ff.to_string());
        kv("dropout", m.dropout.to_string());
        kv("fusion", m.fusion.to_string());
        kv("half_dim", m.half_dim.to_string());
        kv("shared_qkv", m.shared_qkv.to_string());
        kv("ffn_on_full", m.ffn_on_full.to_string());
        kv("share_embeddings", m.share_embeddings.to_string());
        kv("label_smoothing", m.label_smoothing.to_string());
        kv("warmup", m.warmup.to_string());
        kv("lr_scale", m.lr_scale.to_string());
        kv("beam", m.beam.to_string());
        kv("alpha", m.alpha.to_string());
        kv("max_decode_extra", m.max_decode_extra.to_string());
        kv("task", t.kind.to_string());
        kv("vocab_size", t.vocab_size.to_string());
        kv("min_len", t.min_len.to_string());
        kv("max_len", t.max_len.to_string());
        kv("train_pairs", t.train_pairs.to_string());
        kv("valid_pairs", t.valid_pairs.to_string());
        kv("test_pairs", t.test_pairs.to_string());
        kv("max_steps", self.train.max_steps.to_string());
        kv("seed", self.train.seed.to_string());
        kv("eval_interval", self.train.eval_interval.to_string());
        kv("batch_tokens", self.train.batch_tokens.to_string());
        kv(
            "checkpoint_dir",
            self.train
                .checkpoint_dir
                .as_ref()
                .map_or(String::new(), |p| p.display().to_string()),
        );
        s
    }
}
