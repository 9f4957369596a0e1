//! Scaled dot-product attention, multi-head attention and the three-part
//! attention group of the graph encoder.
//!
//! Two routes exist for multi-head attention. [`MultiHeadAttention::forward`]
//! runs the fused packed kernel used by the model; [`multi_head`] composes the
//! same computation out of primitive tape ops on one sequence and serves as
//! its reference.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{contract, shape_err, Result};
use crate::kernels::AttnLayout;
use crate::nn::{LayerNorm, Linear};
use crate::params::{Ctx, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

/// `softmax(Q·Kᵀ/√d_k)·V` on a single sequence. `mask[i*n + j] == false`
/// hides key `j` from query `i`.
pub fn scaled_dot_attention<'t, T: Element>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    mask: Option<&[bool]>,
) -> Result<Var<'t, T>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(shape_err("scaled_dot_attention", &qs, &ks));
    }
    let dk = qs[1] as f64;
    let scores = q.matmul(k.transpose()?)?.scale(1.0 / dk.sqrt());
    scores.softmax_rows_masked(mask)?.matmul(v)
}

/// Query, key and value projections `d_model → d_attn`.
#[derive(Clone, Debug)]
pub struct QkvProjection {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl QkvProjection {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        d_attn: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d_model, d_attn, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d_model, d_attn, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d_model, d_attn, rng)?,
        })
    }

    fn linears(&self) -> [&Linear; 3] {
        [&self.q, &self.k, &self.v]
    }
}

/// Multi-head attention with working width `d_attn` (equal to `d_model`, or
/// half of it in the half-dim variant). Output is always `d_model` wide.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub qkv: QkvProjection,
    pub out: Linear,
    pub heads: usize,
    pub d_model: usize,
    pub d_attn: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        d_attn: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || d_attn == 0 || d_attn % heads != 0 {
            return Err(contract(format!(
                "attention width {d_attn} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            qkv: QkvProjection::new(store, name, d_model, d_attn, rng)?,
            out: Linear::new(store, &format!("{name}.out"), d_attn, d_model, rng)?,
            heads,
            d_model,
            d_attn,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_attn / self.heads
    }

    /// Packed attention: rows of `xq` attend over rows of `xkv` per `layout`.
    pub fn forward<'t, T: Element>(
        &self,
        cx: &Ctx<'t, '_, T>,
        xq: Var<'t, T>,
        xkv: Var<'t, T>,
        layout: &AttnLayout,
    ) -> Result<Var<'t, T>> {
        let q = self.qkv.q.forward(cx, xq)?;
        let k = self.qkv.k.forward(cx, xkv)?;
        let v = self.qkv.v.forward(cx, xkv)?;
        let ctx = q.attention(k, v, self.heads, layout)?;
        self.out.forward(cx, ctx)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.qkv
            .linears()
            .into_iter()
            .chain([&self.out])
            .flat_map(Linear::param_ids)
            .collect()
    }
}

/// Reference multi-head attention on one sequence with distinct key and value
/// inputs: per-head slices through [`scaled_dot_attention`], concatenated and
/// projected by the output matrix.
pub fn multi_head<'t, T: Element>(
    cx: &Ctx<'t, '_, T>,
    x_q: Var<'t, T>,
    x_k: Var<'t, T>,
    x_v: Var<'t, T>,
    mha: &MultiHeadAttention,
    mask: Option<&[bool]>,
) -> Result<Var<'t, T>> {
    let q = mha.qkv.q.forward(cx, x_q)?;
    let k = mha.qkv.k.forward(cx, x_k)?;
    let v = mha.qkv.v.forward(cx, x_v)?;
    let dk = mha.head_dim();
    let heads = (0..mha.heads)
        .map(|h| {
            scaled_dot_attention(
                q.slice(1, h * dk, dk)?,
                k.slice(1, h * dk, dk)?,
                v.slice(1, h * dk, dk)?,
                mask,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    mha.out.forward(cx, Var::concat(&heads, 1)?)
}

/// Which input stream feeds a projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Previous,
    Incremental,
}

/// `(query stream, key/value stream)` for the high, middle (incremental
/// query) and middle (previous query) parts.
pub const GROUP_WIRING: [(Stream, Stream); 3] = [
    (Stream::Incremental, Stream::Incremental),
    (Stream::Incremental, Stream::Previous),
    (Stream::Previous, Stream::Incremental),
];

#[derive(Clone, Debug)]
pub enum GroupProjections {
    /// Each part owns its query/key/value projections.
    Separate([QkvProjection; 3]),
    /// One projection set per stream kind, shared by the parts.
    Shared {
        incremental: QkvProjection,
        previous: QkvProjection,
    },
}

/// The three attention parts feeding the fusion step.
#[derive(Clone, Debug)]
pub struct AttentionGroup {
    pub projections: GroupProjections,
    pub outs: [Linear; 3],
    pub norms: [LayerNorm; 3],
    pub heads: usize,
    pub d_model: usize,
    pub d_attn: usize,
    pub dropout: f64,
}

/// Outputs of the three attention parts.
#[derive(Clone, Copy, Debug)]
pub struct GroupOutput<'t, T: Element> {
    pub high: Var<'t, T>,
    pub mid_inc_query: Var<'t, T>,
    pub mid_prev_query: Var<'t, T>,
}

impl<'t, T: Element> GroupOutput<'t, T> {
    pub fn parts(&self) -> [Var<'t, T>; 3] {
        [self.high, self.mid_inc_query, self.mid_prev_query]
    }
}

impl AttentionGroup {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        d_attn: usize,
        heads: usize,
        shared_qkv: bool,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || d_attn == 0 || d_attn % heads != 0 {
            return Err(contract(format!(
                "attention width {d_attn} not divisible by {heads} heads"
            )));
        }
        let projections = if shared_qkv {
            GroupProjections::Shared {
                incremental: QkvProjection::new(
                    store,
                    &format!("{name}.inc"),
                    d_model,
                    d_attn,
                    rng,
                )?,
                previous: QkvProjection::new(store, &format!("{name}.prev"), d_model, d_attn, rng)?,
            }
        } else {
            let mut make = |i: usize| {
                QkvProjection::new(store, &format!("{name}.part{i}"), d_model, d_attn, rng)
            };
            GroupProjections::Separate([make(0)?, make(1)?, make(2)?])
        };
        let mut outs = Vec::with_capacity(3);
        let mut norms = Vec::with_capacity(3);
        for i in 0..3 {
            outs.push(Linear::new(
                store,
                &format!("{name}.part{i}.out"),
                d_attn,
                d_model,
                rng,
            )?);
            norms.push(LayerNorm::new(
                store,
                &format!("{name}.part{i}.norm"),
                d_model,
            )?);
        }
        Ok(Self {
            projections,
            outs: outs.try_into().expect("three parts"),
            norms: norms.try_into().expect("three parts"),
            heads,
            d_model,
            d_attn,
            dropout,
        })
    }

    /// Distinct query/key/value projection matrices (9 separate, 6 shared).
    pub fn qkv_projection_count(&self) -> usize {
        match &self.projections {
            GroupProjections::Separate(p) => p.len() * 3,
            GroupProjections::Shared { .. } => 6,
        }
    }

    /// The query and key/value projections used by part `i`.
    pub fn part_projections(&self, i: usize) -> (&Linear, &Linear, &Linear) {
        match &self.projections {
            GroupProjections::Separate(p) => (&p[i].q, &p[i].k, &p[i].v),
            GroupProjections::Shared {
                incremental,
                previous,
            } => {
                let pick = |s: Stream| match s {
                    Stream::Incremental => incremental,
                    Stream::Previous => previous,
                };
                let (qs, kvs) = GROUP_WIRING[i];
                (&pick(qs).q, &pick(kvs).k, &pick(kvs).v)
            }
        }
    }

    /// Multi-head view of part `i` (projections plus its output matrix).
    pub fn part_attention(&self, i: usize) -> MultiHeadAttention {
        let (q, k, v) = self.part_projections(i);
        MultiHeadAttention {
            qkv: QkvProjection {
                q: q.clone(),
                k: k.clone(),
                v: v.clone(),
            },
            out: self.outs[i].clone(),
            heads: self.heads,
            d_model: self.d_model,
            d_attn: self.d_attn,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        match &self.projections {
            GroupProjections::Separate(p) => {
                for set in p {
                    ids.extend(set.linears().into_iter().flat_map(Linear::param_ids));
                }
            }
            GroupProjections::Shared {
                incremental,
                previous,
            } => {
                for set in [incremental, previous] {
                    ids.extend(set.linears().into_iter().flat_map(Linear::param_ids));
                }
            }
        }
        for (o, n) in self.outs.iter().zip(&self.norms) {
            ids.extend(o.param_ids());
            ids.extend([n.gamma, n.beta]);
        }
        ids
    }

    /// Run the three parts. Each part is followed by dropout, a residual from
    /// its query input and layer normalisation.
    pub fn forward<'t, T: Element>(
        &self,
        cx: &Ctx<'t, '_, T>,
        prev: Var<'t, T>,
        inc: Var<'t, T>,
        layout: &AttnLayout,
    ) -> Result<GroupOutput<'t, T>> {
        if prev.shape() != inc.shape() {
            return Err(shape_err(
                "attention group streams",
                &prev.shape(),
                &inc.shape(),
            ));
        }
        let stream = |s: Stream| match s {
            Stream::Previous => prev,
            Stream::Incremental => inc,
        };
        // Projections of a shared set are computed once per stream.
        let mut cache: Vec<(usize, Var<'t, T>)> = Vec::new();
        let mut project = |lin: &Linear, x: Var<'t, T>| -> Result<Var<'t, T>> {
            let key = lin.weight.index() * 2 + usize::from(x.id() == inc.id());
            if let Some((_, v)) = cache.iter().find(|(k, _)| *k == key) {
                return Ok(*v);
            }
            let v = lin.forward(cx, x)?;
            cache.push((key, v));
            Ok(v)
        };
        let mut outs = Vec::with_capacity(3);
        for (i, &(qs, kvs)) in GROUP_WIRING.iter().enumerate() {
            let (ql, kl, vl) = self.part_projections(i);
            let (xq, xkv) = (stream(qs), stream(kvs));
            let q = project(ql, xq)?;
            let k = project(kl, xkv)?;
            let v = project(vl, xkv)?;
            let attn = self.outs[i].forward(cx, q.attention(k, v, self.heads, layout)?)?;
            let attn = cx.dropout(attn, self.dropout)?;
            outs.push(self.norms[i].forward(cx, xq.add(attn)?)?);
        }
        Ok(GroupOutput {
            high: outs[0],
            mid_inc_query: outs[1],
            mid_prev_query: outs[2],
        })
    }
}

/// Copy every parameter tensor of `from` into `to` (same shapes required).
pub fn copy_linear<T: Element>(
    store: &mut ParamStore<T>,
    from: &Linear,
    to: &Linear,
) -> Result<()> {
    for (a, b) in from.param_ids().into_iter().zip(to.param_ids()) {
        let v: Tensor<T> = store.value(a).clone();
        store.set_value(b, v)?;
    }
    Ok(())
}
