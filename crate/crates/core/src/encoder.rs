//! Encoders: the graph encoder with previous/incremental streams and fusion,
//! and the vanilla post-norm Transformer encoder used as the baseline.

use rand::Rng;

use crate::attention::{AttentionGroup, GroupOutput, MultiHeadAttention};
use crate::autograd::Var;
use crate::config::{Architecture, FusionKind, ModelConfig};
use crate::error::{contract, shape_err, Result};
use crate::kernels::AttnLayout;
use crate::nn::{Embedding, FeedForward, LayerNorm};
use crate::params::{Ctx, ParamStore};
use crate::tensor::{Element, Tensor};

/// The two representations flowing between graph-encoder layers. The full
/// representation at a layer boundary is `prev + inc`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderStreams<'t, T: Element> {
    pub prev: Var<'t, T>,
    pub inc: Var<'t, T>,
}

impl<'t, T: Element> EncoderStreams<'t, T> {
    pub fn full(&self) -> Result<Var<'t, T>> {
        self.prev.add(self.inc)
    }
}

fn check_same<T: Element>(op: &'static str, vars: &[Var<'_, T>]) -> Result<()> {
    let s0 = vars[0].shape();
    for v in &vars[1..] {
        let s = v.shape();
        if s != s0 {
            return Err(shape_err(op, &s0, &s));
        }
    }
    Ok(())
}

/// `full = a_high + a_mid1 + a_mid2 + prev_out`.
pub fn fuse_sum<'t, T: Element>(
    a_high: Var<'t, T>,
    a_mid1: Var<'t, T>,
    a_mid2: Var<'t, T>,
    prev_out: Var<'t, T>,
) -> Result<Var<'t, T>> {
    check_same("fuse_sum", &[a_high, a_mid1, a_mid2, prev_out])?;
    a_high.add(a_mid1)?.add(a_mid2)?.add(prev_out)
}

/// `w = σ(i_h + i_m + i_l)`, `full = (i_h + i_m)⊙w + i_l⊙(1 − w)`.
/// Returns `(full, w)`.
pub fn fuse_weight_gate<'t, T: Element>(
    i_h: Var<'t, T>,
    i_m: Var<'t, T>,
    i_l: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    check_same("fuse_weight_gate", &[i_h, i_m, i_l])?;
    let new = i_h.add(i_m)?;
    let w = new.add(i_l)?.sigmoid();
    let ones = i_l.tape().constant(Tensor::full(&w.shape(), T::one()));
    let full = new.mul(w)?.add(i_l.mul(ones.sub(w)?)?)?;
    Ok((full, w))
}

/// Output of the self-gate fusion.
#[derive(Clone, Copy, Debug)]
pub struct SelfGateOutput<'t, T: Element> {
    pub full: Var<'t, T>,
    /// The slot-attention node; its cached probabilities are the slot weights
    /// before division by 4.
    pub attention: Var<'t, T>,
}

/// Per position, the four slot vectors form a length-4 sequence `R`; each slot
/// is updated to `softmax(R_q R_kᵀ/√d_k)/4 · R_v` (then the output
/// projection), and the four updated slots are summed.
pub fn fuse_self_gate<'t, T: Element>(
    cx: &Ctx<'t, '_, T>,
    slots: [Var<'t, T>; 4],
    gate: &MultiHeadAttention,
) -> Result<SelfGateOutput<'t, T>> {
    check_same("fuse_self_gate", &slots)?;
    let shape = slots[0].shape();
    if shape.len() != 2 {
        return Err(shape_err("fuse_self_gate", &shape, &[0, 0]));
    }
    let n = shape[0];
    let stacked = Var::concat(&slots, 0)?;
    let interleave: Vec<usize> = (0..n)
        .flat_map(|p| (0..4).map(move |s| s * n + p))
        .collect();
    let r = stacked.gather_rows(&interleave)?;
    let layout = AttnLayout {
        segments: (0..n)
            .map(|p| crate::kernels::Segment {
                q_start: 4 * p,
                q_len: 4,
                k_start: 4 * p,
                k_len: 4,
            })
            .collect(),
        causal: false,
    };
    let q = gate.qkv.q.forward(cx, r)?;
    let k = gate.qkv.k.forward(cx, r)?;
    let v = gate.qkv.v.forward(cx, r)?;
    let attention = q.attention(k, v, gate.heads, &layout)?;
    let updated = gate.out.forward(cx, attention.scale(0.25))?;
    let mut full: Option<Var<'t, T>> = None;
    for s in 0..4 {
        let rows: Vec<usize> = (0..n).map(|p| 4 * p + s).collect();
        let slot = updated.gather_rows(&rows)?;
        full = Some(match full {
            Some(acc) => acc.add(slot)?,
            None => slot,
        });
    }
    Ok(SelfGateOutput {
        full: full.expect("four slots"),
        attention,
    })
}

#[derive(Clone, Debug)]
pub enum Fusion {
    Sum,
    WeightGate,
    SelfGate(MultiHeadAttention),
}

impl Fusion {
    pub fn kind(&self) -> FusionKind {
        match self {
            Fusion::Sum => FusionKind::Sum,
            Fusion::WeightGate => FusionKind::WeightGate,
            Fusion::SelfGate(_) => FusionKind::SelfGate,
        }
    }
}

/// Intermediate values of one graph-encoder layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerTrace<'t, T: Element> {
    pub prev_out: Var<'t, T>,
    pub group: GroupOutput<'t, T>,
    pub full: Var<'t, T>,
    pub inc_raw: Var<'t, T>,
    /// Weight-gate activations `w` (weight-gate fusion only).
    pub gate: Option<Var<'t, T>>,
    /// Slot attention (self-gate fusion only).
    pub slot_attention: Option<Var<'t, T>>,
}

#[derive(Clone, Debug)]
pub struct GraphEncoderLayer {
    pub group: AttentionGroup,
    pub fusion: Fusion,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
    pub dropout: f64,
    /// Apply the feed-forward sublayer to the full representation instead of
    /// the incremental stream.
    pub ffn_on_full: bool,
}

impl GraphEncoderLayer {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let group = AttentionGroup::new(
            store,
            &format!("{name}.group"),
            d,
            cfg.attention_width(),
            cfg.n_heads,
            cfg.shared_qkv,
            cfg.dropout,
            rng,
        )?;
        let fusion = match cfg.fusion {
            FusionKind::Sum => Fusion::Sum,
            FusionKind::WeightGate => Fusion::WeightGate,
            FusionKind::SelfGate => Fusion::SelfGate(MultiHeadAttention::new(
                store,
                &format!("{name}.self_gate"),
                d,
                d,
                cfg.n_heads,
                rng,
            )?),
        };
        Ok(Self {
            group,
            fusion,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, cfg.d_ff, rng)?,
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d)?,
            dropout: cfg.dropout,
            ffn_on_full: cfg.ffn_on_full,
        })
    }

    fn ffn_sublayer<'t, T: Element>(
        &self,
        cx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let y = cx.dropout(self.ffn.forward(cx, x, self.dropout)?, self.dropout)?;
        self.ffn_norm.forward(cx, x.add(y)?)
    }

    pub fn forward<'t, T: Element>(
        &self,
        cx: &Ctx<'t, '_, T>,
        streams: EncoderStreams<'t, T>,
        layout: &AttnLayout,
    ) -> Result<(EncoderStreams<'t, T>, LayerTrace<'t, T>)> {
        let prev_out = streams.prev.add(streams.inc)?;
        let group = self.group.forward(cx, streams.prev, streams.inc, layout)?;
        let (mut gate, mut slot_attention) = (None, None);
        let full = match &self.fusion {
            Fusion::Sum => fuse_sum(
                group.high,
                group.mid_inc_query,
                group.mid_prev_query,
                prev_out,
            )?,
            Fusion::WeightGate => {
                let i_m = group.mid_inc_query.add(group.mid_prev_query)?;
                let (full, w) = fuse_weight_gate(group.high, i_m, prev_out)?;
                gate = Some(w);
                full
            }
            Fusion::SelfGate(mha) => {
                let slots = [
                    group.high,
                    group.mid_inc_query,
                    group.mid_prev_query,
                    prev_out,
                ];
                let out = fuse_self_gate(cx, slots, mha)?;
                slot_attention = Some(out.attention);
                out.full
            }
        };
        let (inc_raw, inc_out) = if self.ffn_on_full {
            let full_out = self.ffn_sublayer(cx, full)?;
            let inc = full_out.sub(prev_out)?;
            (full.sub(prev_out)?, inc)
        } else {
            let inc_raw = full.sub(prev_out)?;
            (inc_raw, self.ffn_sublayer(cx, inc_raw)?)
        };
        Ok((
            EncoderStreams {
                prev: prev_out,
                inc: inc_out,
            },
            LayerTrace {
                prev_out,
                group,
                full,
                inc_raw,
                gate,
                slot_attention,
            },
        ))
    }
}

/// Standard post-norm encoder layer.
#[derive(Clone, Debug)]
pub struct VanillaEncoderLayer {
    pub attn: MultiHeadAttention,
    pub attn_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
    pub dropout: f64,
}

impl VanillaEncoderLayer {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, d, cfg.n_heads, rng)?,
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), d)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, cfg.d_ff, rng)?,
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d)?,
            dropout: cfg.dropout,
        })
    }

    pub fn forward<'t, T: Element>(
        &self,
        cx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
        layout: &AttnLayout,
    ) -> Result<Var<'t, T>> {
        let a = cx.dropout(self.attn.forward(cx, x, x, layout)?, self.dropout)?;
        let x = self.attn_norm.forward(cx, x.add(a)?)?;
        let f = cx.dropout(self.ffn.forward(cx, x, self.dropout)?, self.dropout)?;
        self.ffn_norm.forward(cx, x.add(f)?)
    }
}

#[derive(Clone, Debug)]
pub enum EncoderLayers {
    Vanilla(Vec<VanillaEncoderLayer>),
    Graph(Vec<GraphEncoderLayer>),
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub embedding: Embedding,
    pub layers: EncoderLayers,
}

/// Result of encoding a packed batch of sources.
#[derive(Clone, Debug)]
pub struct Encoded<'t, T: Element> {
    /// `[Σ len × d_model]` final representations.
    pub memory: Var<'t, T>,
    pub lengths: Vec<usize>,
    /// Streams at every layer boundary (graph encoder only), starting with
    /// the initial `(0, embedding)` pair.
    pub streams: Vec<EncoderStreams<'t, T>>,
    pub traces: Vec<LayerTrace<'t, T>>,
}

impl Encoder {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        embedding: Embedding,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let layers = match cfg.architecture {
            Architecture::Baseline => EncoderLayers::Vanilla(
                (0..cfg.n_layers)
                    .map(|i| {
                        VanillaEncoderLayer::new(store, &format!("encoder.layer{i}"), cfg, rng)
                    })
                    .collect::<Result<_>>()?,
            ),
            Architecture::Graph => EncoderLayers::Graph(
                (0..cfg.n_layers)
                    .map(|i| GraphEncoderLayer::new(store, &format!("encoder.layer{i}"), cfg, rng))
                    .collect::<Result<_>>()?,
            ),
        };
        Ok(Self { embedding, layers })
    }

    pub fn n_layers(&self) -> usize {
        match &self.layers {
            EncoderLayers::Vanilla(l) => l.len(),
            EncoderLayers::Graph(l) => l.len(),
        }
    }

    /// Encode a batch of source sentences packed back to back.
    pub fn encode<'t, T: Element>(
        &self,
        cx: &Ctx<'t, '_, T>,
        sources: &[&[usize]],
    ) -> Result<Encoded<'t, T>> {
        if sources.is_empty() || sources.iter().any(|s| s.is_empty()) {
            return Err(contract("encode needs at least one non-empty source"));
        }
        let lengths: Vec<usize> = sources.iter().map(|s| s.len()).collect();
        let layout = AttnLayout::self_attention(&lengths, false);
        let x = self.embedding.forward(cx, sources)?;
        match &self.layers {
            EncoderLayers::Vanilla(layers) => {
                let mut h = x;
                for layer in layers {
                    h = layer.forward(cx, h, &layout)?;
                }
                Ok(Encoded {
                    memory: h,
                    lengths,
                    streams: Vec::new(),
                    traces: Vec::new(),
                })
            }
            EncoderLayers::Graph(layers) => {
                let zeros = cx.constant(Tensor::zeros(&x.shape()));
                let mut streams = vec![EncoderStreams {
                    prev: zeros,
                    inc: x,
                }];
                let mut traces = Vec::with_capacity(layers.len());
                for layer in layers {
                    let (next, trace) =
                        layer.forward(cx, *streams.last().expect("nonempty"), &layout)?;
                    streams.push(next);
                    traces.push(trace);
                }
                let memory = streams.last().expect("nonempty").full()?;
                Ok(Encoded {
                    memory,
                    lengths,
                    streams,
                    traces,
                })
            }
        }
    }
}
