use gt_core::autograd::Tape;
use gt_core::beam::{beam_search, greedy, length_penalty, BeamConfig, StepScorer};
use gt_core::config::{Architecture, FusionKind, ModelConfig, RunConfig};
use gt_core::data::{BOS, EOS};
use gt_core::model::Seq2Seq;
use gt_core::params::{seeded, Ctx, ParamStore};
use gt_core::tensor::{Element, Tensor};
use gt_core::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn small(arch: Architecture) -> ModelConfig {
    let mut cfg = RunConfig::preset("desk").unwrap().model;
    cfg.architecture = arch;
    cfg.fusion = FusionKind::WeightGate;
    (
        cfg.d_model,
        cfg.n_heads,
        cfg.d_ff,
        cfg.n_layers,
        cfg.dropout,
    ) = (16, 2, 32, 2, 0.0);
    cfg.max_decode_extra = 8;
    cfg
}

fn tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(4..vocab)).collect()
}

fn logits_for<T: Element>(
    model: &Seq2Seq,
    store: &ParamStore<T>,
    src: &[usize],
    prefix: &[usize],
    memory_edit: Option<(usize, f64)>,
) -> Tensor<T> {
    let tape = Tape::new();
    let cx = Ctx::eval(&tape, store);
    let enc = model.encode(&cx, &[src]).unwrap();
    let mut memory = enc.memory.value();
    if let Some((row, delta)) = memory_edit {
        let d = memory.shape()[1];
        memory.data_mut()[row * d..(row + 1) * d]
            .iter_mut()
            .for_each(|v| *v += T::of(delta));
    }
    model
        .decode_logits(&cx, cx.constant(memory), &enc.lengths, &[prefix], &[0])
        .unwrap()
        .value()
}

#[test]
fn future_tokens_never_reach_earlier_rows() {
    let mut rng = seeded(1);
    for arch in [Architecture::Baseline, Architecture::Graph] {
        let cfg = small(arch);
        let mut store = ParamStore::<f32>::new();
        let model = Seq2Seq::new(&mut store, &cfg, 3).unwrap();
        for _ in 0..10 {
            let src = tokens(&mut rng, 5, cfg.src_vocab);
            let mut prefix = vec![BOS];
            prefix.extend(tokens(&mut rng, 6, cfg.tgt_vocab));
            let t = rng.random_range(1..prefix.len());
            let mut edited = prefix.clone();
            edited[t] = 4 + (edited[t] - 4 + 1) % (cfg.tgt_vocab - 4);
            let (a, b) = (
                logits_for(&model, &store, &src, &prefix, None),
                logits_for(&model, &store, &src, &edited, None),
            );
            let v = cfg.tgt_vocab;
            let bits = |x: &[f32]| x.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.data()[..t * v]), bits(&b.data()[..t * v]));
            assert_ne!(bits(&a.data()[t * v..]), bits(&b.data()[t * v..]));
        }
    }
}

#[test]
fn every_step_sees_every_memory_row() {
    let mut rng = seeded(2);
    let cfg = small(Architecture::Graph);
    let mut store = ParamStore::<f64>::new();
    let model = Seq2Seq::new(&mut store, &cfg, 4).unwrap();
    let src = tokens(&mut rng, 4, cfg.src_vocab);
    let prefix = [BOS, 5, 6, 7];
    let base = logits_for(&model, &store, &src, &prefix, None);
    for row in 0..src.len() {
        let edited = logits_for(&model, &store, &src, &prefix, Some((row, 0.5)));
        let v = cfg.tgt_vocab;
        for t in 0..prefix.len() {
            let diff = base.data()[t * v..(t + 1) * v]
                .iter()
                .zip(&edited.data()[t * v..(t + 1) * v])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff > 1e-9, "row {row} step {t}");
        }
    }
}

#[test]
fn teacher_forced_log_prob_equals_incremental_decoding() {
    let mut rng = seeded(3);
    for arch in [Architecture::Baseline, Architecture::Graph] {
        let cfg = small(arch);
        let mut store = ParamStore::<f64>::new();
        let model = Seq2Seq::new(&mut store, &cfg, 5).unwrap();
        for _ in 0..5 {
            let src = tokens(&mut rng, 6, cfg.src_vocab);
            let mut tgt = tokens(&mut rng, 5, cfg.tgt_vocab);
            tgt.push(EOS);
            let parallel = model.sequence_log_prob(&store, &src, &tgt).unwrap();
            let scorer = model.scorer(&store, &src).unwrap();
            let stepwise: f64 = (0..tgt.len())
                .map(|t| scorer.log_probs(&[&tgt[..t]]).unwrap()[0][tgt[t]])
                .sum();
            assert!(parallel <= 0.0);
            assert!(
                (parallel - stepwise).abs() < 1e-9,
                "{parallel} vs {stepwise}"
            );
            // Telescoping: each prefix extends the previous score by one term.
            let head = model.sequence_log_prob(&store, &src, &tgt[..3]).unwrap();
            let tail: f64 = (3..tgt.len())
                .map(|t| scorer.log_probs(&[&tgt[..t]]).unwrap()[0][tgt[t]])
                .sum();
            assert!((head + tail - parallel).abs() < 1e-9);
        }
    }
}

#[test]
fn uniform_model_scores_minus_ln_v() {
    let cfg = small(Architecture::Graph);
    let mut store = ParamStore::<f64>::new();
    let model = Seq2Seq::new(&mut store, &cfg, 6).unwrap();
    let v = cfg.tgt_vocab;
    store
        .set_value(model.output.weight, Tensor::zeros(&[cfg.d_model, v]))
        .unwrap();
    store
        .set_value(model.output.bias, Tensor::zeros(&[v]))
        .unwrap();
    let lp = model.sequence_log_prob(&store, &[4, 5, 6], &[7]).unwrap();
    assert!((lp + (v as f64).ln()).abs() < 1e-12);
}

#[test]
fn width_one_beam_is_greedy_and_decoding_is_deterministic() {
    let mut rng = seeded(4);
    let cfg = small(Architecture::Graph);
    let mut store = ParamStore::<f32>::new();
    let model = Seq2Seq::new(&mut store, &cfg, 7).unwrap();
    for _ in 0..50 {
        let len = rng.random_range(1..8);
        let src = tokens(&mut rng, len, cfg.src_vocab);
        let beam = model.translate(&store, &src, 1, 0.2).unwrap();
        let greedy = model.greedy(&store, &src).unwrap();
        assert_eq!(beam.tokens, greedy.tokens);
        assert_eq!(beam.log_prob.to_bits(), greedy.log_prob.to_bits());
        let again = model.translate(&store, &src, 3, 0.2).unwrap();
        assert_eq!(model.translate(&store, &src, 3, 0.2).unwrap(), again);
    }
}

/// Hand-set distribution over tokens {a=0, b=1, EOS=2}:
/// step 1: a 0.5, b 0.4, EOS 0.1; after `a` uniform; after `b` a 0.9,
/// b 0.05, EOS 0.05; EOS forced after two tokens.
struct Toy;

impl StepScorer for Toy {
    fn vocab(&self) -> usize {
        3
    }

    fn log_probs(&self, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        Ok(prefixes
            .iter()
            .map(|p| {
                let probs: [f64; 3] = match p {
                    [] => [0.5, 0.4, 0.1],
                    [0] => [1.0 / 3.0; 3],
                    [1] => [0.9, 0.05, 0.05],
                    _ => [0.0, 0.0, 1.0],
                };
                probs.iter().map(|x| x.ln()).collect()
            })
            .collect())
    }
}

/// Every EOS-terminated sequence of the toy distribution with its log-prob.
fn enumerate(scorer: &Toy, prefix: Vec<usize>, lp: f64, out: &mut Vec<(Vec<usize>, f64)>) {
    let dist = scorer.log_probs(&[&prefix]).unwrap().remove(0);
    for (t, &l) in dist.iter().enumerate() {
        if l == f64::NEG_INFINITY {
            continue;
        }
        let mut next = prefix.clone();
        next.push(t);
        if t == 2 {
            out.push((next, lp + l));
        } else {
            enumerate(scorer, next, lp + l, out);
        }
    }
}

#[test]
fn beam_finds_the_enumerated_optimum() {
    let mut all = Vec::new();
    enumerate(&Toy, vec![], 0.0, &mut all);
    for alpha in [0.0, 0.2, 1.0] {
        let best = all
            .iter()
            .max_by(|x, y| {
                (x.1 / length_penalty(x.0.len(), alpha))
                    .total_cmp(&(y.1 / length_penalty(y.0.len(), alpha)))
            })
            .unwrap();
        let cfg = BeamConfig {
            width: 2,
            alpha,
            max_len: 10,
            eos: 2,
        };
        let found = beam_search(&Toy, &cfg).unwrap();
        assert!(found.finished);
        assert_eq!(found.tokens, best.0, "alpha {alpha}");
        assert!((found.log_prob - best.1).abs() < 1e-12);
    }
    assert_eq!(
        all.iter().max_by(|x, y| x.1.total_cmp(&y.1)).unwrap().0,
        vec![1, 0, 2]
    );
    let g = greedy(&Toy, 10, 2).unwrap();
    assert_eq!(g.tokens[0], 0);
    assert!(g.log_prob < (0.36f64).ln());
}

#[test]
fn zero_alpha_ranks_by_log_prob() {
    assert_eq!(length_penalty(17, 0.0), 1.0);
    let mut rng = seeded(5);
    let cfg = small(Architecture::Baseline);
    let mut store = ParamStore::<f64>::new();
    let model = Seq2Seq::new(&mut store, &cfg, 8).unwrap();
    let src = tokens(&mut rng, 4, cfg.src_vocab);
    let h = model.translate(&store, &src, 4, 0.0).unwrap();
    assert_eq!(h.score(0.0), h.log_prob);
}

#[test]
fn wider_beam_never_scores_below_greedy() {
    let mut rng = seeded(6);
    let cfg = small(Architecture::Graph);
    let mut store = ParamStore::<f32>::new();
    let model = Seq2Seq::new(&mut store, &cfg, 9).unwrap();
    let mut compared = 0;
    for _ in 0..30 {
        let len = rng.random_range(1..8);
        let src = tokens(&mut rng, len, cfg.src_vocab);
        let g = model.greedy(&store, &src).unwrap();
        let b = model.translate(&store, &src, 4, 0.2).unwrap();
        if g.finished {
            assert!(b.finished);
            assert!(
                b.score(0.2) >= g.score(0.2) - 1e-9,
                "beam {} < greedy {}",
                b.score(0.2),
                g.score(0.2)
            );
            compared += 1;
        }
    }
    assert!(compared >= 10, "only {compared} greedy decodes finished");
}

/// One confident path `0 1 2 3 0 1 2 3` then EOS (id 4); every other token,
/// EOS included, gets the same small probability at each step.
struct ConfidentPath;

const PATH: [usize; 8] = [0, 1, 2, 3, 0, 1, 2, 3];

impl StepScorer for ConfidentPath {
    fn vocab(&self) -> usize {
        5
    }

    fn log_probs(&self, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        let small = 1e-5f64;
        Ok(prefixes
            .iter()
            .map(|p| {
                let next = if PATH.starts_with(p) {
                    PATH.get(p.len()).copied().unwrap_or(4)
                } else {
                    4
                };
                (0..5)
                    .map(|t| if t == next { 1.0 - 4.0 * small } else { small }.ln())
                    .collect()
            })
            .collect())
    }
}

#[test]
fn early_eos_candidates_do_not_cut_the_search_short() {
    for width in [2, 4, 6] {
        let found = beam_search(
            &ConfidentPath,
            &BeamConfig {
                width,
                alpha: 0.2,
                max_len: 20,
                eos: 4,
            },
        )
        .unwrap();
        assert_eq!(found.output(4), PATH, "width {width}");
        assert_eq!(found.tokens, greedy(&ConfidentPath, 20, 4).unwrap().tokens);
    }
}
