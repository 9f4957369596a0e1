//! Finite-difference gradient oracle shared by the integration tests.
//!
//! Everything runs on the 64-bit shadow of the model. A non-scalar output is
//! reduced with a fixed random weighting so that sums that are invariant by
//! construction (e.g. after layer norm) still have informative gradients.
#![allow(dead_code)]

use gt_core::autograd::{Tape, Var};
use gt_core::params::{seeded, Ctx, ParamId, ParamStore};
use gt_core::tensor::Tensor;
use gt_core::Result;
use rand::seq::IteratorRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-3;
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Instances whose relu inputs come closer than this to zero are redrawn:
/// a step of `FD_STEP` could cross the kink.
pub const RELU_MARGIN: f64 = 2e-2;

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

/// A model fragment under test.
pub trait Fragment {
    fn forward<'t>(&self, cx: &Ctx<'t, '_, f64>, inputs: &[Var<'t, f64>]) -> Result<Var<'t, f64>>;
}

impl<F> Fragment for F
where
    F: for<'t, 's> Fn(&Ctx<'t, 's, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    fn forward<'t>(&self, cx: &Ctx<'t, '_, f64>, inputs: &[Var<'t, f64>]) -> Result<Var<'t, f64>> {
        self(cx, inputs)
    }
}

pub struct GradCase<'a> {
    pub store: &'a ParamStore<f64>,
    pub inputs: Vec<Tensor<f64>>,
    /// Indices of inputs that are differentiated (the rest are constants).
    pub diff_inputs: Vec<usize>,
    /// Dropout seed for training-mode fragments.
    pub dropout_seed: Option<u64>,
    /// Coordinates sampled per tensor (all when the tensor is smaller).
    pub coords: usize,
}

/// Result of one gradient comparison over all sampled coordinates.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// `‖a - n‖₂ / (‖a‖₂ + ‖n‖₂)` of the analytic and numeric gradients.
    pub rel_error: f64,
    /// Stricter per-coordinate view: `max|a - n| / max(|a|, |n|)`, maxima
    /// over the instance. Reported, not asserted.
    pub coord_error: f64,
    pub coords: usize,
    pub grad_scale: f64,
}

fn make_ctx<'t, 's>(
    tape: &'t Tape<f64>,
    store: &'s ParamStore<f64>,
    seed: Option<u64>,
    track: bool,
) -> Ctx<'t, 's, f64> {
    match (seed, track) {
        (Some(s), _) => Ctx::train(tape, store, s),
        (None, true) => Ctx::grad_eval(tape, store),
        (None, false) => Ctx::eval(tape, store),
    }
}

fn weighted<'t>(out: Var<'t, f64>, weights: &Tensor<f64>) -> Result<Var<'t, f64>> {
    Ok(out.mul(out.tape().constant(weights.clone()))?.sum())
}

fn loss_at(
    case: &GradCase,
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    frag: &dyn Fragment,
    w: &Tensor<f64>,
) -> f64 {
    let tape = Tape::new();
    let cx = make_ctx(&tape, store, case.dropout_seed, false);
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = frag.forward(&cx, &vars).expect("forward");
    weighted(out, w)
        .expect("weighting")
        .value()
        .item()
        .expect("scalar")
}

/// Compare analytic and central-difference gradients for sampled input and
/// parameter coordinates. Returns `None` when the instance sits too close to
/// a relu kink.
pub fn grad_check(
    case: &GradCase,
    params: &[ParamId],
    frag: &dyn Fragment,
    rng: &mut ChaCha8Rng,
) -> Option<GradCheck> {
    let tape = Tape::new();
    let cx = make_ctx(&tape, case.store, case.dropout_seed, true);
    let vars: Vec<_> = case
        .inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if case.diff_inputs.contains(&i) {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    let out = frag.forward(&cx, &vars).expect("forward");
    if tape.relu_margin() < RELU_MARGIN {
        return None;
    }
    let w = randn(rng, &out.shape());
    let loss = weighted(out, &w).expect("weighting");
    tape.backward(loss).expect("backward");

    let mut pairs: Vec<(f64, f64)> = Vec::new();
    let h = FD_STEP;
    for &i in &case.diff_inputs {
        let analytic = vars[i]
            .grad()
            .unwrap_or_else(|| Tensor::zeros(&case.inputs[i].shape().to_vec()));
        let n = case.inputs[i].numel();
        for c in (0..n).choose_multiple(rng, case.coords.min(n)) {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[c] += h;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[c] -= h;
            let numeric = (loss_at(case, case.store, &plus, frag, &w)
                - loss_at(case, case.store, &minus, frag, &w))
                / (2.0 * h);
            pairs.push((analytic.data()[c], numeric));
        }
    }
    for &id in params {
        let value = case.store.value(id);
        let analytic = cx
            .param(id)
            .grad()
            .unwrap_or_else(|| Tensor::zeros(value.shape()));
        let n = value.numel();
        for c in (0..n).choose_multiple(rng, case.coords.min(n)) {
            let eval = |delta: f64| {
                let mut s = case.store.clone();
                let mut v = value.clone();
                v.data_mut()[c] += delta;
                s.set_value(id, v).expect("same shape");
                loss_at(case, &s, &case.inputs, frag, &w)
            };
            pairs.push((analytic.data()[c], (eval(h) - eval(-h)) / (2.0 * h)));
        }
    }
    let scale = pairs
        .iter()
        .fold(0.0f64, |m, &(a, n)| m.max(a.abs()).max(n.abs()));
    let diff = pairs.iter().fold(0.0f64, |m, &(a, n)| m.max((a - n).abs()));
    let norm =
        |f: &dyn Fn(&(f64, f64)) -> f64| pairs.iter().map(|p| f(p).powi(2)).sum::<f64>().sqrt();
    let (na, nn, nd) = (norm(&|p| p.0), norm(&|p| p.1), norm(&|p| p.0 - p.1));
    Some(GradCheck {
        rel_error: if na + nn > 0.0 { nd / (na + nn) } else { nd },
        coord_error: if scale > 0.0 { diff / scale } else { diff },
        coords: pairs.len(),
        grad_scale: scale,
    })
}

/// Run `instances` accepted random instances of a case builder and return the
/// worst relative error. Rejected (near-kink) draws are retried.
pub fn worst_over(
    instances: usize,
    seed: u64,
    mut one: impl FnMut(&mut ChaCha8Rng) -> Option<GradCheck>,
) -> GradCheck {
    let mut rng = seeded(seed);
    let mut worst = GradCheck {
        rel_error: 0.0,
        coord_error: 0.0,
        coords: 0,
        grad_scale: f64::INFINITY,
    };
    let (mut accepted, mut tries) = (0, 0);
    while accepted < instances {
        tries += 1;
        assert!(tries < instances * 20, "too many rejected instances");
        if let Some(c) = one(&mut rng) {
            accepted += 1;
            assert!(c.grad_scale > 0.0, "gradient identically zero");
            worst.coords += c.coords;
            worst.grad_scale = worst.grad_scale.min(c.grad_scale);
            worst.rel_error = worst.rel_error.max(c.rel_error);
            worst.coord_error = worst.coord_error.max(c.coord_error);
        }
    }
    worst
}

pub fn check_fn<F>(
    case: &GradCase,
    params: &[ParamId],
    rng: &mut ChaCha8Rng,
    f: F,
) -> Option<GradCheck>
where
    F: for<'t, 's> Fn(&Ctx<'t, 's, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    grad_check(case, params, &f, rng)
}

pub mod grad_cases;
