//! Synthetic parallel corpora, character vocabulary and token-budget batching.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{contract, Error, Result};
use crate::params::{derive_seed, seeded};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const UNK: usize = 3;
/// Number of reserved ids preceding the first real symbol.
pub const RESERVED: usize = 4;
/// Longer sentences are dropped when reading corpora.
pub const MAX_SENTENCE_LEN: usize = 250;

const SYMBOLS: &str = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

/// The first `vocab_size` symbols of `a-zA-Z0-9`.
pub fn alphabet(vocab_size: usize) -> Result<Vec<char>> {
    if !(8..=SYMBOLS.len()).contains(&vocab_size) {
        return Err(contract(format!(
            "vocab_size {vocab_size} outside [8, {}]",
            SYMBOLS.len()
        )));
    }
    Ok(SYMBOLS.chars().take(vocab_size).collect())
}

/// Character vocabulary with the four reserved ids in front.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocabulary {
    pub fn new(symbols: Vec<char>) -> Result<Self> {
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, &c) in symbols.iter().enumerate() {
            if index.insert(c, i + RESERVED).is_some() {
                return Err(contract(format!("duplicate symbol `{c}`")));
            }
        }
        Ok(Self { symbols, index })
    }

    pub fn for_task(vocab_size: usize) -> Result<Self> {
        Self::new(alphabet(vocab_size)?)
    }

    /// Total size including reserved ids.
    pub fn len(&self) -> usize {
        self.symbols.len() + RESERVED
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(UNK)
    }

    pub fn symbol(&self, id: usize) -> Option<char> {
        id.checked_sub(RESERVED)
            .and_then(|i| self.symbols.get(i).copied())
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.id(c)).collect()
    }

    /// Inverse of [`encode`](Self::encode). Stops at EOS, skips BOS/PAD and
    /// renders UNK as `?`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != BOS && i != PAD)
            .map(|&i| self.symbol(i).unwrap_or('?'))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
    /// Fixed symbol substitution followed by swapping adjacent pairs.
    ToyTranslation,
}

impl FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "copy" => Ok(Self::Copy),
            "reverse" => Ok(Self::Reverse),
            "sort" => Ok(Self::Sort),
            "toy-translation" | "toy_translation" => Ok(Self::ToyTranslation),
            _ => Err(format!(
                "expected copy|reverse|sort|toy-translation, got `{s}`"
            )),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Copy => "copy",
            Self::Reverse => "reverse",
            Self::Sort => "sort",
            Self::ToyTranslation => "toy-translation",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Valid => "valid",
            Self::Test => "test",
        })
    }
}

/// Token ids of one source/target pair, without BOS/EOS.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SentencePair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParallelCorpus {
    pub split: Split,
    pub pairs: Vec<SentencePair>,
}

impl ParallelCorpus {
    pub fn new(split: Split, pairs: Vec<SentencePair>) -> Result<Self> {
        for (i, p) in pairs.iter().enumerate() {
            if p.src.is_empty() || p.tgt.is_empty() {
                return Err(Error::Data(format!("pair {i} has an empty side")));
            }
            if p.src.len() > MAX_SENTENCE_LEN || p.tgt.len() > MAX_SENTENCE_LEN {
                return Err(Error::Data(format!(
                    "pair {i} exceeds {MAX_SENTENCE_LEN} tokens"
                )));
            }
        }
        Ok(Self { split, pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Read `source<TAB>target` lines. Empty and over-long pairs are dropped.
    pub fn read(path: &Path, split: Split, vocab: &Vocabulary) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut pairs = Vec::new();
        for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (s, t) = line
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("{}:{}: missing tab", path.display(), n + 1)))?;
            let (src, tgt) = (vocab.encode(s), vocab.encode(t));
            let keep = |v: &Vec<usize>| !v.is_empty() && v.len() <= MAX_SENTENCE_LEN;
            if keep(&src) && keep(&tgt) {
                pairs.push(SentencePair { src, tgt });
            } else {
                log::debug!(
                    "{}:{}: dropped pair outside length limits",
                    path.display(),
                    n + 1
                );
            }
        }
        if pairs.is_empty() {
            return Err(Error::Data(format!("{}: no usable pairs", path.display())));
        }
        Self::new(split, pairs)
    }

    pub fn write(&self, path: &Path, vocab: &Vocabulary) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for p in &self.pairs {
            writeln!(out, "{}\t{}", vocab.decode(&p.src), vocab.decode(&p.tgt))?;
        }
        out.flush()?;
        Ok(())
    }
}

/// The substitution used by the toy translation task: a permutation of the
/// alphabet ids fixed by the vocabulary size alone.
pub fn toy_substitution(vocab_size: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (RESERVED..RESERVED + vocab_size).collect();
    ids.shuffle(&mut seeded(0x5eed_0000 + vocab_size as u64));
    ids
}

fn apply_task(kind: TaskKind, src: &[usize], substitution: &[usize]) -> Vec<usize> {
    match kind {
        TaskKind::Copy => src.to_vec(),
        TaskKind::Reverse => src.iter().rev().copied().collect(),
        TaskKind::Sort => {
            let mut t = src.to_vec();
            t.sort_unstable();
            t
        }
        TaskKind::ToyTranslation => {
            let mut t: Vec<usize> = src.iter().map(|&i| substitution[i - RESERVED]).collect();
            for pair in t.chunks_mut(2) {
                pair.reverse();
            }
            t
        }
    }
}

/// Deterministic synthetic corpus of `n_pairs` with source lengths drawn
/// uniformly from `len_range` (inclusive).
pub fn make_task(
    kind: TaskKind,
    n_pairs: usize,
    len_range: (usize, usize),
    vocab_size: usize,
    seed: u64,
    split: Split,
) -> Result<ParallelCorpus> {
    alphabet(vocab_size)?;
    let (lo, hi) = len_range;
    if lo == 0 || lo > hi || hi > MAX_SENTENCE_LEN {
        return Err(contract(format!(
            "length range [{lo}, {hi}] outside [1, {MAX_SENTENCE_LEN}]"
        )));
    }
    let substitution = toy_substitution(vocab_size);
    let mut rng = seeded(seed);
    let pairs = (0..n_pairs)
        .map(|_| {
            let len = rng.random_range(lo..=hi);
            let src: Vec<usize> = (0..len)
                .map(|_| rng.random_range(RESERVED..RESERVED + vocab_size))
                .collect();
            let tgt = apply_task(kind, &src, &substitution);
            SentencePair { src, tgt }
        })
        .collect();
    ParallelCorpus::new(split, pairs)
}

/// Train/valid/test corpora for a task spec, each from its own derived seed.
pub fn make_splits(task: &crate::config::TaskSpec, seed: u64) -> Result<[ParallelCorpus; 3]> {
    let gen = |n, split, tag| {
        make_task(
            task.kind,
            n,
            (task.min_len, task.max_len),
            task.vocab_size,
            derive_seed(seed, tag),
            split,
        )
    };
    Ok([
        gen(task.train_pairs, Split::Train, 0xda7a_0001)?,
        gen(task.valid_pairs, Split::Valid, 0xda7a_0002)?,
        gen(task.test_pairs, Split::Test, 0xda7a_0003)?,
    ])
}

/// A group of pairs whose padded size fits the token budget.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub pairs: Vec<SentencePair>,
}

/// Rectangular view of a batch, as a padded-matrix consumer would see it.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    /// `[n × src_width]`, row-major.
    pub src: Vec<usize>,
    pub src_width: usize,
    /// `[n × tgt_width]` decoder inputs: BOS followed by the target.
    pub tgt_in: Vec<usize>,
    /// `[n × tgt_width]` decoder outputs: the target followed by EOS.
    pub tgt_out: Vec<usize>,
    pub tgt_width: usize,
    /// `true` where the source holds a real token.
    pub src_mask: Vec<bool>,
    pub tgt_mask: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> Vec<&[usize]> {
        self.pairs.iter().map(|p| p.src.as_slice()).collect()
    }

    /// Decoder inputs `BOS y₁ … y_T` per pair.
    pub fn decoder_inputs(&self) -> Vec<Vec<usize>> {
        self.pairs
            .iter()
            .map(|p| std::iter::once(BOS).chain(p.tgt.iter().copied()).collect())
            .collect()
    }

    /// Packed decoder targets `y₁ … y_T EOS`, concatenated over pairs.
    pub fn decoder_targets(&self) -> Vec<usize> {
        self.pairs
            .iter()
            .flat_map(|p| p.tgt.iter().copied().chain(std::iter::once(EOS)))
            .collect()
    }

    /// Real target tokens including EOS.
    pub fn target_tokens(&self) -> usize {
        self.pairs.iter().map(|p| p.tgt.len() + 1).sum()
    }

    /// Padded size under the budget rule.
    pub fn padded_tokens(&self) -> usize {
        self.pairs.len() * self.pairs.iter().map(pair_width).max().unwrap_or(0)
    }

    pub fn padded(&self) -> PaddedBatch {
        let n = self.pairs.len();
        let sw = self.pairs.iter().map(|p| p.src.len()).max().unwrap_or(0);
        let tw = self
            .pairs
            .iter()
            .map(|p| p.tgt.len() + 1)
            .max()
            .unwrap_or(0);
        let mut out = PaddedBatch {
            src: vec![PAD; n * sw],
            src_width: sw,
            tgt_in: vec![PAD; n * tw],
            tgt_out: vec![PAD; n * tw],
            tgt_width: tw,
            src_mask: vec![false; n * sw],
            tgt_mask: vec![false; n * tw],
        };
        for (r, p) in self.pairs.iter().enumerate() {
            for (c, &t) in p.src.iter().enumerate() {
                out.src[r * sw + c] = t;
                out.src_mask[r * sw + c] = true;
            }
            for c in 0..=p.tgt.len() {
                out.tgt_in[r * tw + c] = if c == 0 { BOS } else { p.tgt[c - 1] };
                out.tgt_out[r * tw + c] = p.tgt.get(c).copied().unwrap_or(EOS);
                out.tgt_mask[r * tw + c] = true;
            }
        }
        out
    }
}

fn pair_width(p: &SentencePair) -> usize {
    p.src.len().max(p.tgt.len() + 1)
}

/// Split `pairs` into batches of at most `budget` padded tokens. With a
/// seed the order is shuffled first; otherwise it is kept. A pair wider
/// than the budget gets a batch of its own.
pub fn make_batches(
    pairs: &[SentencePair],
    budget: usize,
    shuffle_seed: Option<u64>,
) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut seeded(seed));
    }
    let mut batches = Vec::new();
    let mut current: Vec<SentencePair> = Vec::new();
    let mut width = 0;
    for i in order {
        let w = pair_width(&pairs[i]).max(width);
        if !current.is_empty() && (current.len() + 1) * w > budget {
            batches.push(Batch {
                pairs: std::mem::take(&mut current),
            });
            width = 0;
        }
        width = width.max(pair_width(&pairs[i]));
        current.push(pairs[i].clone());
    }
    if !current.is_empty() {
        batches.push(Batch { pairs: current });
    }
    batches
}
