//! One random instance per call for every differentiable operation and
//! composite layer.

use gt_core::attention::{multi_head, scaled_dot_attention, AttentionGroup, MultiHeadAttention};
use gt_core::autograd::Var;
use gt_core::config::{Architecture, FusionKind, ModelConfig, RunConfig};
use gt_core::data::{Batch, SentencePair};
use gt_core::encoder::{fuse_self_gate, fuse_weight_gate, GraphEncoderLayer, VanillaEncoderLayer};
use gt_core::kernels::AttnLayout;
use gt_core::model::{DecoderLayer, Seq2Seq};
use gt_core::nn::{Embedding, Linear};
use gt_core::params::{ParamId, ParamStore};
use gt_core::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{check_fn, randn, GradCase, GradCheck};

pub type CaseFn = fn(&mut ChaCha8Rng) -> Option<GradCheck>;

fn inputs_case(store: &ParamStore<f64>, inputs: Vec<Tensor<f64>>) -> GradCase<'_> {
    let diff_inputs = (0..inputs.len()).collect();
    GradCase {
        store,
        inputs,
        diff_inputs,
        dropout_seed: None,
        coords: 12,
    }
}

fn all_params(store: &ParamStore<f64>) -> Vec<ParamId> {
    store.ids().collect()
}

fn tiny_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let mut cfg = RunConfig::preset("desk").expect("preset").model;
    cfg.d_model = 4;
    cfg.n_heads = 2;
    cfg.d_ff = 6;
    cfg.n_layers = 1;
    cfg.dropout = 0.0;
    cfg.src_vocab = 9;
    cfg.tgt_vocab = 9;
    let _ = rng;
    cfg
}

fn matmul(rng: &mut ChaCha8Rng) -> Option<GradCheck> {
    let store = ParamStore::new();
    let case = inputs_case(&store, vec![randn(rng, &[3, 4]), randn(rng, &[4, 2])]);
    check_fn(&case, &[], rng, |_, x| x[0].matmul(x[1]))
}

fn add(rng: &mut ChaCha8Rng) -> Option<GradCheck> {
    let store = ParamStore::new();
    let case = inputs_case(&store, vec![randn(rng, &[3, 4]), randn(rng, &[3, 4])]);
    check_fn(&case, &[], rng, |_, x| x[0].add(x[1]))
}

fn sub(rng: &mut ChaCha8Rng) -> Option<GradCheck> {
    let store = ParamStore::new();
    let case = inputs_case(&store, vec![randn(rng, &[3, 4]), randn(rng, &[3, 4])]);
    check_fn(&case, &[], rng, |_, x| x[0].sub(x[1]))
}

fn mul(rng: &mut ChaCha8Rng) -> Option<GradCheck> {
    let store = ParamStore::new();
    let case = inputs_case(&store, vec![randn(rng, &[3, 4]), randn(rng, &[3, 4])]);
    check_fn(&case, &[], rng, |_, x| x[0].mul(x[1]))
}

fn add_row(rng: &mut ChaCha8Rng) -> Option<GradCheck> {
    let store = ParamStore::new();
    let case = inputs_case(&store, vec![randn(rng, &[3, 4]), randn(rng, &[4])]);
    check_fn(&case, &[], rng, |_, x| x[0].add_row(x[1]))
}

fn scale(rng: &mut ChaCha8Rng) -> Option<GradCheck> {
    let store = ParamStore::new();
    let c: f64 = rng.random_range(-3.0..3.0);
    let case = inputs_case(&store, vec![randn(rng, &[2, 5])]);
    check_fn(&case, &[], rng, move |_, x| Ok(x[0].scale(c)))
}

fn sigmoid(rng: &mut ChaCha8Rng) -> Option<GradCheck> {
    let store = ParamStore::new();
    let case = inputs_case(&store, vec![randn(rng, &[3, 4]).map(|v| 2.0 * v)]);
    check_fn(&case, &[], rng, |_, x| Ok(x[0].sigmoid()))
}

fn relu(rng: &mut ChaCha8Rng) -> Option<GradCheck> {
    let store = ParamStore::new();
    let case = inputs_case(&store, vec![randn(rng, &[3, 4])]);
    check_fn(&case, &[], rng, |_, x| Ok(x[0].relu()))
}

fn transpose(rng: &mut ChaCha8Rng) -> Option<GradCheck> {
    let store = ParamStore::new();
    let case = inputs_case(&store, vec![randn(rng, &[3, 5])]);
    check_fn(&case, &[], rng, |_, x| x[0].transpose())
}

fn concat(rng: &mut ChaCha8Rng) -> Option<GradCheck> {
    let store = ParamStore::new();
    let axis = rng.random_range(0..2usize);
    let shapes: [[usize; 2]; 3] = if axis == 0 {
        [[1, 3], [2, 3], [3, 3]]
    } else {
        [[2, 1], [2, 2], [2, 4]]
    };
    let case = inputs_case(&store, shapes.iter().map(|s| randn(rng, s)).collect());
    check_fn(&case, &[], rng, move |_, x| Var::concat(x, axis))
}

fn slice(rng: &mut ChaCha8Rng) -> Option<GradCheck> {
    let store = ParamStore::new();
    let axis = rng.random_range(0..2usize);
    let start = rng.random_range(0..3usize);
    let len = rng.random_range(1..=4 - start);
    let case = inputs_case(&store, vec![randn(rng, &[4, 4])]);
    check_fn(&case, &[], rng, move |_, x| x[0].slice(axis, start, len))
}

fn sum(rng: &mut ChaCha8Rng) -> Option<GradCheck> {
    let store = ParamStore::new();
    let case = inputs_case(&store, vec![randn(rng, &[3, 4])]);
    check_fn(&case, &[], rng, |_, x| Ok(x[0].mul(x[0])?.sum()))
}

fn mean(rng: &mut ChaCha8Rng) -> Option<GradCheck> {
    let store = ParamStore::new();
    let case = inputs_case(&store, vec![randn(rng, &[3, 4])]);
    check_fn(&case, &[], rng, |_, x| Ok(x[0].mul(x[0])?.mean()))
}

fn softmax(rng: &mut ChaCha8Rng) -> Option<GradCheck> {
    let store = ParamStore::new();
    let case = inputs_case(&store, vec![randn(rng, &[3, 5])]);
    check_fn(&case, &[], rng, |_, x| x[0].softmax_rows())
}

fn softmax_masked(rng: &mut ChaCha8Rng) -> Option<GradCheck> {
    let store = ParamStore::new();
    let mut mask: Vec<bool> = (0..15).map(|_| rng.random_bool(0.6)).collect();
    for r in 0..3 {
        mask[r * 5 + rng.random_range(0..5)] = true;
    }
    let case = inputs_case(&store, vec![randn(rng, &[3, 5])]);
    check_fn(&case, &[], rng, move |_, x| {
        x[0].softmax_rows_masked(Some(&mask))
    })
}

fn layer_norm(rng: &mut ChaCha8Rng) -> Option<GradCheck> {
    let store = ParamStore::new();
    let case = inputs_case(
        &store,
        vec![randn(rng, &[3, 5]), randn(rng, &[5]), randn(rng, &[5])],
    );
    check_fn(&case, &[], rng, |_, x| x[0].layer_norm(x[1], x[2]))
}

fn gather_rows(rng: &mut ChaCha8Rng) -> Option<GradCheck> {
    let store = ParamStore::new();
    let ids: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
    let case = inputs_case(&store, vec![randn(rng, &[4, 3])]);
    check_fn(&case, &[], rng, move |_, x| x[0].gather_rows(&ids))
}

fn cross_entropy(rng: &mut ChaCha8Rng) -> Option<GradCheck> {
    let store = ParamStore::new();
    let pad = 2;
    let mut targets: Vec<usize> = (0..5).map(|_| rng.random_range(0..6)).collect();
    targets[0] = 4;
    let smoothing = if rng.random_bool(0.5) { 0.0 } else { 0.1 };
    let case = inputs_case(&store, vec![randn(rng, &[5, 6])]);
    check_fn(&case, &[], rng, move |_, x| {
        x[0].cross_entropy(&targets, pad, smoothing)
    })
}

fn fused_attention(rng: &mut ChaCha8Rng) -> Option<GradCheck> {
    let store = ParamStore::new();
    let kind = rng.random_range(0..3);
    let (layout, q_rows, k_rows) = match kind {
        0 => (AttnLayout::self_attention(&[2, 3], false), 5, 5),
        1 => (AttnLayout::self_attention(&[3, 2], true), 5, 5),
        _ => (AttnLayout::cross(&[2, 2], &[3, 1], &[1, 0]), 4, 4),
    };
    let case = inputs_case(
        &store,
        vec![
            randn(rng, &[q_rows, 4]),
            randn(rng, &[k_rows, 4]),
            randn(rng, &[k_rows, 6]),
        ],
    );
    check_fn(&case, &[], rng, move |_, x| {
        x[0].attention(x[1], x[2], 2, &layout)
    })
}

fn scaled_dot(rng: &mut ChaCha8Rng) -> Option<GradCheck> {
    let store = ParamStore::new();
    let mut mask: Vec<bool> = (0..12).map(|_| rng.random_bool(0.7)).collect();
    for r in 0..3 {
        mask[r * 4 + rng.random_range(0..4)] = true;
    }
    let case = inputs_case(
        &store,
        vec![
            randn(rng, &[3, 2]),
            randn(rng, &[4, 2]),
            randn(rng, &[4, 3]),
        ],
    );
    check_fn(&case, &[], rng, move |_, x| {
        scaled_dot_attention(x[0], x[1], x[2], Some(&mask))
    })
}

fn linear(rng: &mut ChaCha8Rng) -> Option<GradCheck> {
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 4, 3, rng).unwrap();
    store.set_value(lin.bias, randn(rng, &[3])).unwrap();
    let case = inputs_case(&store, vec![randn(rng, &[2, 4])]);
    let params = all_params(&store);
    check_fn(&case, &params, rng, move |cx, x| lin.forward(cx, x[0]))
}

fn embedding(rng: &mut ChaCha8Rng) -> Option<GradCheck> {
    let mut store = ParamStore::new();
    let emb = Embedding::new(&mut store, "emb", 7, 4, rng).unwrap();
    let a: Vec<usize> = (0..3).map(|_| rng.random_range(0..7)).collect();
    let b: Vec<usize> = (0..2).map(|_| rng.random_range(0..7)).collect();
    let case = inputs_case(&store, vec![]);
    let params = all_params(&store);
    check_fn(&case, &params, rng, move |cx, _| emb.forward(cx, &[&a, &b]))
}

fn dropout(rng: &mut ChaCha8Rng) -> Option<GradCheck> {
    let store = ParamStore::new();
    let mut case = inputs_case(&store, vec![randn(rng, &[4, 5])]);
    case.dropout_seed = Some(rng.random());
    check_fn(&case, &[], rng, |cx, x| cx.dropout(x[0], 0.3))
}

fn mha_composite(rng: &mut ChaCha8Rng) -> Option<GradCheck> {
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "mha", 4, 4, 2, rng).unwrap();
    let case = inputs_case(
        &store,
        vec![
            randn(rng, &[3, 4]),
            randn(rng, &[2, 4]),
            randn(rng, &[2, 4]),
        ],
    );
    let params = all_params(&store);
    check_fn(&case, &params, rng, move |cx, x| {
        multi_head(cx, x[0], x[1], x[2], &mha, None)
    })
}

fn mha_fused(rng: &mut ChaCha8Rng) -> Option<GradCheck> {
    let mut store = ParamStore::new();
    let d_attn = if rng.random_bool(0.5) { 4 } else { 2 };
    let mha = MultiHeadAttention::new(&mut store, "mha", 4, d_attn, 2, rng).unwrap();
    let layout = AttnLayout::cross(&[2, 1], &[2, 3], &[1, 0]);
    let case = inputs_case(&store, vec![randn(rng, &[3, 4]), randn(rng, &[5, 4])]);
    let params = all_params(&store);
    check_fn(&case, &params, rng, move |cx, x| {
        mha.forward(cx, x[0], x[1], &layout)
    })
}

fn attention_group(rng: &mut ChaCha8Rng) -> Option<GradCheck> {
    let mut store = ParamStore::new();
    let shared = rng.random_bool(0.5);
    let d_attn = if rng.random_bool(0.5) { 4 } else { 2 };
    let group = AttentionGroup::new(&mut store, "g", 4, d_attn, 2, shared, 0.0, rng).unwrap();
    let layout = AttnLayout::self_attention(&[2, 3], false);
    let case = inputs_case(&store, vec![randn(rng, &[5, 4]), randn(rng, &[5, 4])]);
    let params = all_params(&store);
    check_fn(&case, &params, rng, move |cx, x| {
        let o = group.forward(cx, x[0], x[1], &layout)?;
        Var::concat(&o.parts(), 1)
    })
}

fn weight_gate(rng: &mut ChaCha8Rng) -> Option<GradCheck> {
    let store = ParamStore::new();
    let case = inputs_case(
        &store,
        vec![
            randn(rng, &[3, 4]),
            randn(rng, &[3, 4]),
            randn(rng, &[3, 4]),
        ],
    );
    check_fn(&case, &[], rng, |_, x| {
        Ok(fuse_weight_gate(x[0], x[1], x[2])?.0)
    })
}

fn self_gate(rng: &mut ChaCha8Rng) -> Option<GradCheck> {
    let mut store = ParamStore::new();
    let gate = MultiHeadAttention::new(&mut store, "gate", 4, 4, 2, rng).unwrap();
    let case = inputs_case(&store, (0..4).map(|_| randn(rng, &[3, 4])).collect());
    let params = all_params(&store);
    check_fn(&case, &params, rng, move |cx, x| {
        Ok(fuse_self_gate(cx, [x[0], x[1], x[2], x[3]], &gate)?.full)
    })
}

fn graph_layer_with(
    rng: &mut ChaCha8Rng,
    edit: impl FnOnce(&mut ModelConfig),
) -> Option<GradCheck> {
    let mut cfg = tiny_config(rng);
    cfg.architecture = Architecture::Graph;
    edit(&mut cfg);
    let mut store = ParamStore::new();
    let layer = GraphEncoderLayer::new(&mut store, "layer", &cfg, rng).unwrap();
    let layout = AttnLayout::self_attention(&[2, 3], false);
    let mut case = inputs_case(&store, vec![randn(rng, &[5, 4]), randn(rng, &[5, 4])]);
    case.coords = 6;
    if cfg.dropout > 0.0 {
        case.dropout_seed = Some(rng.random());
    }
    let params = all_params(&store);
    check_fn(&case, &params, rng, move |cx, x| {
        let (out, _) = layer.forward(
            cx,
            gt_core::encoder::EncoderStreams {
                prev: x[0],
                inc: x[1],
            },
            &layout,
        )?;
        Var::concat(&[out.prev, out.inc], 1)
    })
}

fn graph_layer_sum(rng: &mut ChaCha8Rng) -> Option<GradCheck> {
    graph_layer_with(rng, |c| c.fusion = FusionKind::Sum)
}

fn graph_layer_weight_gate(rng: &mut ChaCha8Rng) -> Option<GradCheck> {
    graph_layer_with(rng, |c| c.fusion = FusionKind::WeightGate)
}

fn graph_layer_self_gate(rng: &mut ChaCha8Rng) -> Option<GradCheck> {
    graph_layer_with(rng, |c| c.fusion = FusionKind::SelfGate)
}

fn graph_layer_variants(rng: &mut ChaCha8Rng) -> Option<GradCheck> {
    let (half, shared, on_full) = (
        rng.random_bool(0.5),
        rng.random_bool(0.5),
        rng.random_bool(0.5),
    );
    graph_layer_with(rng, move |c| {
        c.fusion = FusionKind::WeightGate;
        c.half_dim = half;
        c.shared_qkv = shared;
        c.ffn_on_full = on_full;
    })
}

fn graph_layer_dropout(rng: &mut ChaCha8Rng) -> Option<GradCheck> {
    graph_layer_with(rng, |c| {
        c.fusion = FusionKind::WeightGate;
        c.dropout = 0.2;
    })
}

fn vanilla_layer(rng: &mut ChaCha8Rng) -> Option<GradCheck> {
    let cfg = tiny_config(rng);
    let mut store = ParamStore::new();
    let layer = VanillaEncoderLayer::new(&mut store, "layer", &cfg, rng).unwrap();
    let layout = AttnLayout::self_attention(&[2, 3], false);
    let mut case = inputs_case(&store, vec![randn(rng, &[5, 4])]);
    case.coords = 6;
    let params = all_params(&store);
    check_fn(&case, &params, rng, move |cx, x| {
        layer.forward(cx, x[0], &layout)
    })
}

fn decoder_layer(rng: &mut ChaCha8Rng) -> Option<GradCheck> {
    let cfg = tiny_config(rng);
    let mut store = ParamStore::new();
    let layer = DecoderLayer::new(&mut store, "dec", &cfg, rng).unwrap();
    let self_layout = AttnLayout::self_attention(&[3, 2], true);
    let cross_layout = AttnLayout::cross(&[3, 2], &[2, 4], &[0, 1]);
    let mut case = inputs_case(&store, vec![randn(rng, &[5, 4]), randn(rng, &[6, 4])]);
    case.coords = 6;
    let params = all_params(&store);
    check_fn(&case, &params, rng, move |cx, x| {
        layer.forward(cx, x[0], x[1], &self_layout, &cross_layout)
    })
}

fn model_loss(rng: &mut ChaCha8Rng) -> Option<GradCheck> {
    let mut cfg = tiny_config(rng);
    cfg.fusion = FusionKind::WeightGate;
    cfg.label_smoothing = 0.1;
    let mut store = ParamStore::new();
    let model = Seq2Seq::new(&mut store, &cfg, rng.random()).unwrap();
    let tok = |rng: &mut ChaCha8Rng, n: usize| -> Vec<usize> {
        (0..n).map(|_| rng.random_range(4..9)).collect()
    };
    let batch = Batch {
        pairs: vec![
            SentencePair {
                src: tok(rng, 3),
                tgt: tok(rng, 2),
            },
            SentencePair {
                src: tok(rng, 2),
                tgt: tok(rng, 3),
            },
        ],
    };
    let mut case = inputs_case(&store, vec![]);
    case.coords = 3;
    let params = all_params(&store);
    check_fn(&case, &params, rng, move |cx, _| {
        Ok(model.batch_loss(cx, &batch)?.loss)
    })
}

pub const CASES: &[(&str, CaseFn)] = &[
    ("matmul", matmul),
    ("add", add),
    ("sub", sub),
    ("mul", mul),
    ("add_row", add_row),
    ("scale", scale),
    ("sigmoid", sigmoid),
    ("relu", relu),
    ("transpose", transpose),
    ("concat", concat),
    ("slice", slice),
    ("sum", sum),
    ("mean", mean),
    ("softmax_rows", softmax),
    ("softmax_rows_masked", softmax_masked),
    ("layer_norm", layer_norm),
    ("gather_rows", gather_rows),
    ("cross_entropy", cross_entropy),
    ("fused_attention", fused_attention),
    ("scaled_dot_attention", scaled_dot),
    ("linear", linear),
    ("embedding", embedding),
    ("dropout", dropout),
    ("multi_head", mha_composite),
    ("multi_head_fused", mha_fused),
    ("attention_group", attention_group),
    ("fuse_weight_gate", weight_gate),
    ("fuse_self_gate", self_gate),
    ("graph_layer_sum", graph_layer_sum),
    ("graph_layer_weight_gate", graph_layer_weight_gate),
    ("graph_layer_self_gate", graph_layer_self_gate),
    ("graph_layer_variants", graph_layer_variants),
    ("graph_layer_dropout", graph_layer_dropout),
    ("vanilla_encoder_layer", vanilla_layer),
    ("decoder_layer", decoder_layer),
    ("model_loss", model_loss),
];
