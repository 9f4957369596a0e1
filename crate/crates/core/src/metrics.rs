//! Corpus BLEU, length-bucketed BLEU, token accuracy and JSON-lines records.
//!
//! BLEU is tokenized and case-sensitive: clipped n-gram precisions up to
//! order 4, geometric mean, brevity penalty `exp(1 - r/c)` when `c < r`.

use std::collections::HashMap;
use std::hash::Hash;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::tensor::{Element, Tensor};

/// Clipped n-gram statistics of a corpus.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<W: Eq + Hash>(tokens: &[W], n: usize) -> HashMap<&[W], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

pub fn bleu_stats<W: Eq + Hash>(
    hyps: &[Vec<W>],
    refs: &[Vec<W>],
    max_n: usize,
) -> Result<BleuStats> {
    if hyps.len() != refs.len() {
        return Err(contract(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(contract("BLEU of an empty corpus"));
    }
    let mut s = BleuStats {
        matches: vec![0; max_n],
        totals: vec![0; max_n],
        ..Default::default()
    };
    for (h, r) in hyps.iter().zip(refs) {
        s.hyp_len += h.len();
        s.ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                s.matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            s.totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    Ok(s)
}

impl BleuStats {
    /// Score in `[0, 100]`. Orders with no hypothesis n-grams at all (every
    /// hypothesis shorter than n) are left out of the geometric mean.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        let mut orders = 0;
        for (&m, &t) in self.matches.iter().zip(&self.totals) {
            if t == 0 {
                continue;
            }
            if m == 0 {
                return 0.0;
            }
            log_sum += (m as f64 / t as f64).ln();
            orders += 1;
        }
        let bp = if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        };
        100.0 * bp * (log_sum / orders as f64).exp()
    }
}

/// Corpus-level BLEU with n-grams up to `max_n`.
pub fn bleu<W: Eq + Hash>(hyps: &[Vec<W>], refs: &[Vec<W>], max_n: usize) -> Result<f64> {
    Ok(bleu_stats(hyps, refs, max_n)?.score())
}

/// Half-open source-length bucket `[lo, hi)`; `hi = None` is unbounded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bucket {
    pub lo: usize,
    pub hi: Option<usize>,
}

impl Bucket {
    pub fn contains(&self, len: usize) -> bool {
        len >= self.lo && self.hi.is_none_or(|h| len < h)
    }

    pub fn label(&self) -> String {
        match self.hi {
            Some(h) => format!("[{},{})", self.lo, h),
            None => format!("[{},inf)", self.lo),
        }
    }
}

pub const DEFAULT_BUCKETS: [Bucket; 4] = [
    Bucket {
        lo: 0,
        hi: Some(10),
    },
    Bucket {
        lo: 10,
        hi: Some(20),
    },
    Bucket {
        lo: 20,
        hi: Some(40),
    },
    Bucket { lo: 40, hi: None },
];

#[derive(Clone, Debug, PartialEq)]
pub struct BucketScore {
    pub bucket: Bucket,
    pub count: usize,
    /// `None` for empty buckets.
    pub bleu: Option<f64>,
}

/// Corpus BLEU per source-length bucket.
pub fn bleu_by_length<W: Eq + Hash + Clone>(
    src_lens: &[usize],
    hyps: &[Vec<W>],
    refs: &[Vec<W>],
    buckets: &[Bucket],
) -> Result<Vec<BucketScore>> {
    if src_lens.len() != hyps.len() || hyps.len() != refs.len() {
        return Err(contract("bleu_by_length needs one source length per pair"));
    }
    if hyps.is_empty() {
        return Err(contract("BLEU of an empty corpus"));
    }
    buckets
        .iter()
        .map(|&bucket| {
            let idx: Vec<usize> = (0..hyps.len())
                .filter(|&i| bucket.contains(src_lens[i]))
                .collect();
            let bleu = if idx.is_empty() {
                None
            } else {
                let h: Vec<Vec<W>> = idx.iter().map(|&i| hyps[i].clone()).collect();
                let r: Vec<Vec<W>> = idx.iter().map(|&i| refs[i].clone()).collect();
                Some(bleu(&h, &r, 4)?)
            };
            Ok(BucketScore {
                bucket,
                count: idx.len(),
                bleu,
            })
        })
        .collect()
}

/// Fraction of non-pad rows whose argmax equals the target.
pub fn token_accuracy<T: Element>(
    logits: &Tensor<T>,
    targets: &[usize],
    pad: usize,
) -> Result<f64> {
    let (n, v) = logits.dims2()?;
    if targets.len() != n {
        return Err(crate::error::shape_err(
            "token_accuracy",
            logits.shape(),
            &[targets.len()],
        ));
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for (i, &t) in targets.iter().enumerate() {
        if t == pad {
            continue;
        }
        total += 1;
        let row = &logits.data()[i * v..(i + 1) * v];
        if argmax(row) == t {
            hit += 1;
        }
    }
    if total == 0 {
        return Err(contract("token accuracy over an all-pad batch"));
    }
    Ok(hit as f64 / total as f64)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// fewer than two points or either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut vx, mut vy) = (0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx).powi(2);
        vy += (b - my).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// One metrics log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub split: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bucket: Option<String>,
    pub value: f64,
    pub step: u64,
}

impl MetricRecord {
    pub fn new(metric: &str, split: &str, value: f64, step: u64) -> Self {
        Self {
            metric: metric.into(),
            split: split.into(),
            bucket: None,
            value,
            step,
        }
    }

    pub fn with_bucket(mut self, bucket: String) -> Self {
        self.bucket = Some(bucket);
        self
    }
}

/// Write each record as one complete line, flushing after every line.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn write(&mut self, rec: &MetricRecord) -> Result<()> {
        let mut line = serde_json::to_string(rec)?;
        line.push('\n');
        self.out.write_all(line.as_bytes())?;
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn identical_corpus_scores_100() {
        let h = vec![words("a b c d e"), words("x y")];
        assert!((bleu(&h, &h, 4).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn no_four_gram_matches_scores_zero() {
        let h = vec![words("a b c d e")];
        let r = vec![words("a b c x d e")];
        assert_eq!(bleu(&h, &r, 4).unwrap(), 0.0);
    }

    #[test]
    fn empty_and_mismatched_corpora_are_errors() {
        let e: Vec<Vec<String>> = vec![];
        assert!(bleu(&e, &e, 4).is_err());
        assert!(bleu(&[words("a")], &e, 4).is_err());
    }

    #[test]
    fn brevity_penalty_applies_to_short_output() {
        let h = vec![words("a b c d")];
        let r = vec![words("a b c d e f")];
        let expected = 100.0 * (1.0 - 6.0 / 4.0f64).exp();
        assert!((bleu(&h, &r, 4).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn bucket_boundaries_are_half_open() {
        let b = DEFAULT_BUCKETS[0];
        assert!(b.contains(9) && !b.contains(10));
        assert!(DEFAULT_BUCKETS[1].contains(10));
        assert!(DEFAULT_BUCKETS[3].contains(10_000));
    }

    #[test]
    fn single_bucket_equals_corpus_score() {
        let h = vec![words("a b c d e"), words("b c d e f g")];
        let r = vec![words("a b c d f"), words("b c d e f g")];
        let s = bleu_by_length(&[3, 7], &h, &r, &DEFAULT_BUCKETS).unwrap();
        assert_eq!(s[0].bleu, Some(bleu(&h, &r, 4).unwrap()));
        assert_eq!(s[0].count, 2);
        assert!(s[1..].iter().all(|b| b.bleu.is_none() && b.count == 0));
    }

    #[test]
    fn accuracy_ignores_pads() {
        let logits = Tensor::<f32>::from_rows(&[
            vec![0.0, 5.0, 0.0],
            vec![3.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        assert_eq!(token_accuracy(&logits, &[1, 0, 2], 9).unwrap(), 1.0);
        assert_eq!(token_accuracy(&logits, &[1, 2, 0], 2).unwrap(), 0.5);
        assert!(token_accuracy(&logits, &[2, 2, 2], 2).is_err());
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0], &[5.0, 5.0]), None);
    }

    #[test]
    fn record_serialization() {
        let mut w = MetricsWriter::new(Vec::new());
        w.write(&MetricRecord::new("loss", "train", 1.5, 3))
            .unwrap();
        w.write(&MetricRecord::new("bleu", "test", 99.0, 7).with_bucket("[0,10)".into()))
            .unwrap();
        let text = String::from_utf8(w.into_inner()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            r#"{"metric":"loss","split":"train","value":1.5,"step":3}"#
        );
        let back: MetricRecord = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(back.bucket.as_deref(), Some("[0,10)"));
    }
}
