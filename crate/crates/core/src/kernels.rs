//! Numeric kernels behind the tape operations.
//!
//! Every kernel computes each output row with the same arithmetic order no
//! matter how rows are distributed across threads, so the parallel and
//! sequential paths produce bitwise-identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::tensor::Element;

/// Below this many multiply-adds the sequential path wins.
#[cfg(feature = "parallel")]
const PAR_MATMUL_WORK: usize = 1 << 16;

/// `out[m×n] = a[m×k] · b[k×n]`, overwriting `out`.
pub fn matmul_into<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    #[cfg(feature = "parallel")]
    if m > 1 && m * k * n >= PAR_MATMUL_WORK && rayon::current_num_threads() > 1 {
        return matmul_into_par(a, b, m, k, n, out);
    }
    matmul_into_seq(a, b, m, k, n, out)
}

#[inline]
fn matmul_row<T: Element>(a_row: &[T], b: &[T], n: usize, out_row: &mut [T]) {
    out_row.iter_mut().for_each(|o| *o = T::zero());
    for (p, &a) in a_row.iter().enumerate() {
        if a == T::zero() {
            continue;
        }
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o += a * bv;
        }
    }
}

pub fn matmul_into_seq<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for (a_row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        matmul_row(a_row, b, n, out_row);
    }
}

#[cfg(feature = "parallel")]
pub fn matmul_into_par<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(out.len(), m * n);
    a.par_chunks_exact(k)
        .zip(out.par_chunks_exact_mut(n))
        .for_each(|(a_row, out_row)| matmul_row(a_row, b, n, out_row));
}

pub fn transpose<T: Element>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[inline]
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// One block of packed attention: query rows `q_start..q_start+q_len` attend
/// over key rows `k_start..k_start+k_len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

/// Packed attention layout: a list of independent segments over concatenated
/// sequences. No padding ever enters the computation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnLayout {
    pub segments: Vec<Segment>,
    /// Query `i` of a segment sees keys `0..=i` only.
    pub causal: bool,
}

impl AttnLayout {
    /// Self-attention over sequences of the given lengths, packed back to back.
    pub fn self_attention(lengths: &[usize], causal: bool) -> Self {
        let mut start = 0;
        let segments = lengths
            .iter()
            .map(|&len| {
                let s = Segment {
                    q_start: start,
                    q_len: len,
                    k_start: start,
                    k_len: len,
                };
                start += len;
                s
            })
            .collect();
        Self { segments, causal }
    }

    /// Cross-attention: query sequence `i` attends over key sequence `key_of[i]`.
    pub fn cross(q_lengths: &[usize], k_lengths: &[usize], key_of: &[usize]) -> Self {
        let mut k_offsets = Vec::with_capacity(k_lengths.len());
        let mut acc = 0;
        for &l in k_lengths {
            k_offsets.push(acc);
            acc += l;
        }
        let mut start = 0;
        let segments = q_lengths
            .iter()
            .zip(key_of)
            .map(|(&len, &k)| {
                let s = Segment {
                    q_start: start,
                    q_len: len,
                    k_start: k_offsets[k],
                    k_len: k_lengths[k],
                };
                start += len;
                s
            })
            .collect();
        Self {
            segments,
            causal: false,
        }
    }

    pub fn q_rows(&self) -> usize {
        self.segments
            .iter()
            .map(|s| s.q_start + s.q_len)
            .max()
            .unwrap_or(0)
    }

    pub fn k_rows(&self) -> usize {
        self.segments
            .iter()
            .map(|s| s.k_start + s.k_len)
            .max()
            .unwrap_or(0)
    }

    /// Offsets of each segment's probability block for `heads` heads.
    pub(crate) fn prob_offsets(&self, heads: usize) -> (Vec<usize>, usize) {
        let mut offs = Vec::with_capacity(self.segments.len());
        let mut acc = 0;
        for s in &self.segments {
            offs.push(acc);
            acc += s.q_len * s.k_len * heads;
        }
        (offs, acc)
    }

    fn visible(&self, seg: &Segment, i: usize) -> usize {
        if self.causal {
            (i + 1).min(seg.k_len)
        } else {
            seg.k_len
        }
    }
}

pub(crate) struct AttnDims {
    pub heads: usize,
    pub dq: usize,
    pub dv: usize,
}

/// Forward of one segment; returns its output rows and probability block.
fn attention_segment<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    dims: &AttnDims,
    layout: &AttnLayout,
    seg: &Segment,
) -> (Vec<T>, Vec<T>) {
    let AttnDims { heads, dq, dv } = *dims;
    let dk = dq / heads;
    let dvh = dv / heads;
    let scale = T::of(1.0 / (dk as f64).sqrt());
    let mut out = vec![T::zero(); seg.q_len * dv];
    let mut probs = vec![T::zero(); seg.q_len * seg.k_len * heads];
    let mut scores = vec![T::zero(); seg.k_len];
    for h in 0..heads {
        for i in 0..seg.q_len {
            let qi = &q[(seg.q_start + i) * dq + h * dk..][..dk];
            let visible = layout.visible(seg, i);
            let mut max = T::neg_infinity();
            for (j, s) in scores.iter_mut().enumerate().take(visible) {
                let kj = &k[(seg.k_start + j) * dq + h * dk..][..dk];
                *s = dot(qi, kj) * scale;
                max = max.max(*s);
            }
            let mut total = T::zero();
            for s in scores.iter_mut().take(visible) {
                *s = (*s - max).exp();
                total += *s;
            }
            let p_row = &mut probs[(h * seg.q_len + i) * seg.k_len..][..seg.k_len];
            let o_row = &mut out[i * dv + h * dvh..][..dvh];
            for j in 0..visible {
                let p = scores[j] / total;
                p_row[j] = p;
                let vj = &v[(seg.k_start + j) * dv + h * dvh..][..dvh];
                for (o, &x) in o_row.iter_mut().zip(vj) {
                    *o += p * x;
                }
            }
        }
    }
    (out, probs)
}

/// Packed multi-head attention forward. Returns `(output[nq×dv], probs)`.
pub(crate) fn attention_forward<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    dims: &AttnDims,
    layout: &AttnLayout,
) -> (Vec<T>, Vec<T>) {
    let nq = q.len() / dims.dq;
    let (offs, total) = layout.prob_offsets(dims.heads);
    let mut out = vec![T::zero(); nq * dims.dv];
    let mut probs = vec![T::zero(); total];

    let run = |seg: &Segment| attention_segment(q, k, v, dims, layout, seg);
    #[cfg(feature = "parallel")]
    let blocks: Vec<(Vec<T>, Vec<T>)> =
        if layout.segments.len() > 1 && rayon::current_num_threads() > 1 {
            layout.segments.par_iter().map(run).collect()
        } else {
            layout.segments.iter().map(run).collect()
        };
    #[cfg(not(feature = "parallel"))]
    let blocks: Vec<(Vec<T>, Vec<T>)> = layout.segments.iter().map(run).collect();

    for ((seg, off), (o, p)) in layout.segments.iter().zip(offs).zip(blocks) {
        out[seg.q_start * dims.dv..][..o.len()].copy_from_slice(&o);
        probs[off..off + p.len()].copy_from_slice(&p);
    }
    (out, probs)
}

/// Packed multi-head attention backward: accumulates into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    dims: &AttnDims,
    layout: &AttnLayout,
    grads: (&mut [T], &mut [T], &mut [T]),
) {
    let (dq_buf, dk_buf, dv_buf) = grads;
    let AttnDims { heads, dq, dv } = *dims;
    let dk = dq / heads;
    let dvh = dv / heads;
    let scale = T::of(1.0 / (dk as f64).sqrt());
    let (offs, _) = layout.prob_offsets(heads);
    let mut dp = Vec::new();
    for (seg, off) in layout.segments.iter().zip(offs) {
        dp.resize(seg.k_len, T::zero());
        for h in 0..heads {
            for i in 0..seg.q_len {
                let qrow = seg.q_start + i;
                let visible = layout.visible(seg, i);
                let p_row = &probs[off + (h * seg.q_len + i) * seg.k_len..][..seg.k_len];
                let do_row = &dout[qrow * dv + h * dvh..][..dvh];
                let mut weighted = T::zero();
                for j in 0..visible {
                    let krow = seg.k_start + j;
                    let vj = &v[krow * dv + h * dvh..][..dvh];
                    dp[j] = dot(do_row, vj);
                    weighted += p_row[j] * dp[j];
                    let dvj = &mut dv_buf[krow * dv + h * dvh..][..dvh];
                    for (g, &d) in dvj.iter_mut().zip(do_row) {
                        *g += p_row[j] * d;
                    }
                }
                let qi = &q[qrow * dq + h * dk..][..dk];
                for j in 0..visible {
                    let ds = p_row[j] * (dp[j] - weighted) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let krow = seg.k_start + j;
                    let kj = &k[krow * dq + h * dk..][..dk];
                    let dqi = &mut dq_buf[qrow * dq + h * dk..][..dk];
                    for (g, &x) in dqi.iter_mut().zip(kj) {
                        *g += ds * x;
                    }
                    let dkj = &mut dk_buf[krow * dq + h * dk..][..dk];
                    for (g, &x) in dkj.iter_mut().zip(qi) {
                        *g += ds * x;
                    }
                }
            }
        }
    }
}
