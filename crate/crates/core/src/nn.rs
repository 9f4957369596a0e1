//! Layers shared by the encoder and decoder.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autograd::Var;
use crate::error::{contract, shape_err, Error, Result};
use crate::params::{Ctx, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

/// Xavier-uniform `[fan_in × fan_out]` matrix.
pub fn xavier_uniform<T: Element>(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
    Tensor::from_fn(&[fan_in, fan_out], |_| T::of(dist.sample(rng)))
}

/// Affine map `x·W + b` with `W: [d_in×d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), xavier_uniform(d_in, d_out, rng))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]))?;
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward<'t, T: Element>(
        &self,
        cx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        x.matmul(cx.param(self.weight))?
            .add_row(cx.param(self.bias))
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], T::one()))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
            dim,
        })
    }

    pub fn forward<'t, T: Element>(
        &self,
        cx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let d = *x.shape().last().unwrap_or(&0);
        if d != self.dim {
            return Err(shape_err("layer_norm", &x.shape(), &[self.dim]));
        }
        x.layer_norm(cx.param(self.gamma), cx.param(self.beta))
    }
}

/// Position-wise `relu(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        d_ff: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            inner: Linear::new(store, &format!("{name}.inner"), d_model, d_ff, rng)?,
            outer: Linear::new(store, &format!("{name}.outer"), d_ff, d_model, rng)?,
        })
    }

    pub fn forward<'t, T: Element>(
        &self,
        cx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
        dropout: f64,
    ) -> Result<Var<'t, T>> {
        let h = self.inner.forward(cx, x)?.relu();
        let h = cx.dropout(h, dropout)?;
        self.outer.forward(cx, h)
    }
}

/// Sinusoidal position encoding: `PE[pos, 2i] = sin(pos / 10000^(2i/d))`,
/// `PE[pos, 2i+1] = cos(...)`.
pub fn sinusoidal_positions<T: Element>(len: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn(&[len, d], |idx| {
        let (pos, j) = (idx / d, idx % d);
        let pair = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
        T::of(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Token embedding table `[V×d]`, scaled by `√d`, plus sinusoidal positions.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let normal = Normal::new(0.0, (dim as f64).powf(-0.5)).expect("positive std");
        let table = Tensor::from_fn(&[vocab, dim], |_| T::of(normal.sample(rng)));
        Ok(Self {
            table: store.add(format!("{name}.table"), table)?,
            vocab,
            dim,
        })
    }

    /// Scaled lookups of `ids`, without positions.
    pub fn lookup<'t, T: Element>(&self, cx: &Ctx<'t, '_, T>, ids: &[usize]) -> Result<Var<'t, T>> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab) {
            return Err(Error::Index {
                what: "token id",
                index: bad,
                bound: self.vocab,
            });
        }
        Ok(cx
            .param(self.table)
            .gather_rows(ids)?
            .scale((self.dim as f64).sqrt()))
    }

    /// Packed embedding of several sequences; positions restart at 0 per sequence.
    pub fn forward<'t, T: Element>(
        &self,
        cx: &Ctx<'t, '_, T>,
        seqs: &[&[usize]],
    ) -> Result<Var<'t, T>> {
        if seqs.iter().any(|s| s.is_empty()) {
            return Err(contract("cannot embed an empty sequence"));
        }
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let x = self.lookup(cx, &ids)?;
        let max_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let table: Tensor<T> = sinusoidal_positions(max_len, self.dim);
        let mut pos = Vec::with_capacity(ids.len() * self.dim);
        for s in seqs {
            pos.extend_from_slice(&table.data()[..s.len() * self.dim]);
        }
        let pos = cx.constant(Tensor::new(vec![ids.len(), self.dim], pos)?);
        x.add(pos)
    }
}

/// Inverted dropout: in training, zero each element with probability `p` and
/// scale survivors by `1/(1-p)`; identity otherwise.
pub fn dropout<'t, T: Element>(
    x: Var<'t, T>,
    p: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Var<'t, T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(contract(format!("dropout probability {p} outside [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok(x);
    }
    let keep = T::of(1.0 / (1.0 - p));
    let shape = x.shape();
    let mask = Tensor::from_fn(&shape, |_| {
        if rng.random::<f64>() < p {
            T::zero()
        } else {
            keep
        }
    });
    x.mul(x.tape().constant(mask))
}

/// Mean token cross entropy of `logits[n×V]` against `targets`, skipping `pad`.
pub fn cross_entropy<'t, T: Element>(
    logits: Var<'t, T>,
    targets: &[usize],
    pad: usize,
) -> Result<Var<'t, T>> {
    logits.cross_entropy(targets, pad, 0.0)
}
