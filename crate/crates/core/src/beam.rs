//! Beam search with the `((5 + len) / 6)^α` length penalty.

use crate::error::{contract, Result};

/// Next-token log-probabilities for a batch of generated prefixes (BOS not
/// included in the prefixes).
pub trait StepScorer {
    fn vocab(&self) -> usize;
    fn log_probs(&self, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>>;
}

pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// Generated tokens; ends with EOS when finished.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    pub fn score(&self, alpha: f64) -> f64 {
        self.log_prob / length_penalty(self.tokens.len(), alpha)
    }

    /// Tokens without the trailing EOS.
    pub fn output(&self, eos: usize) -> &[usize] {
        match self.tokens.last() {
            Some(&t) if t == eos => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamConfig {
    pub width: usize,
    pub alpha: f64,
    /// Maximum generated tokens, EOS included.
    pub max_len: usize,
    pub eos: usize,
}

/// Ranked `(log_prob, hyp, token)` candidates, best first. Ties go to the
/// earlier hypothesis, then the lower token id.
fn ranked(active: &[BeamHypothesis], dists: &[Vec<f64>], keep: usize) -> Vec<(f64, usize, usize)> {
    let mut cands: Vec<(f64, usize, usize)> = active
        .iter()
        .zip(dists)
        .enumerate()
        .flat_map(|(h, (hyp, d))| {
            d.iter()
                .enumerate()
                .map(move |(t, &lp)| (hyp.log_prob + lp, h, t))
        })
        .collect();
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    cands.truncate(keep);
    cands
}

/// Beam search. Each step ranks the top `2·width` extensions; EOS
/// extensions ranked within the first `width` finish, the best non-EOS ones
/// refill the beam. Search ends at `max_len`, or once `width` hypotheses
/// have finished and the best of them scores at least as well as the best
/// live hypothesis does now. Stopping on the count alone would let cheap
/// early-EOS candidates end the search before a confident path finishes.
/// Returns the best finished hypothesis by penalized score, or the best
/// unfinished one (with `finished == false`) if none finished.
pub fn beam_search(scorer: &dyn StepScorer, cfg: &BeamConfig) -> Result<BeamHypothesis> {
    if cfg.width == 0 {
        return Err(contract("beam width must be at least 1"));
    }
    if cfg.max_len == 0 {
        return Err(contract("max_len must be at least 1"));
    }
    let mut active = vec![BeamHypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<BeamHypothesis> = Vec::new();
    for _ in 0..cfg.max_len {
        let prefixes: Vec<&[usize]> = active.iter().map(|h| h.tokens.as_slice()).collect();
        let dists = scorer.log_probs(&prefixes)?;
        let mut next = Vec::with_capacity(cfg.width);
        for (rank, (lp, h, t)) in ranked(&active, &dists, 2 * cfg.width)
            .into_iter()
            .enumerate()
        {
            let mut tokens = active[h].tokens.clone();
            tokens.push(t);
            if t == cfg.eos {
                if rank < cfg.width {
                    finished.push(BeamHypothesis {
                        tokens,
                        log_prob: lp,
                        finished: true,
                    });
                }
            } else if next.len() < cfg.width {
                next.push(BeamHypothesis {
                    tokens,
                    log_prob: lp,
                    finished: false,
                });
            }
        }
        active = next;
        if active.is_empty()
            || (finished.len() >= cfg.width
                && best_score(&finished, cfg.alpha) >= best_score(&active, cfg.alpha))
        {
            break;
        }
    }
    let pool = if finished.is_empty() {
        &active
    } else {
        &finished
    };
    let best = pool
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| {
            a.score(cfg.alpha)
                .total_cmp(&b.score(cfg.alpha))
                .then(j.cmp(i))
        })
        .map(|(_, h)| h.clone())
        .ok_or_else(|| contract("beam search produced no hypotheses"))?;
    if !best.finished {
        log::warn!("no hypothesis finished within {} tokens", cfg.max_len);
    }
    Ok(best)
}

fn best_score(hyps: &[BeamHypothesis], alpha: f64) -> f64 {
    hyps.iter()
        .map(|h| h.score(alpha))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Greedy decoding: take the most likely token (lowest id on ties) until EOS
/// or `max_len` tokens.
pub fn greedy(scorer: &dyn StepScorer, max_len: usize, eos: usize) -> Result<BeamHypothesis> {
    let mut hyp = BeamHypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    while hyp.tokens.len() < max_len {
        let d = scorer.log_probs(&[hyp.tokens.as_slice()])?.remove(0);
        let t = crate::metrics::argmax(&d);
        hyp.log_prob += d[t];
        hyp.tokens.push(t);
        if t == eos {
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}
