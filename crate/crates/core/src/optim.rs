//! Adam with bias correction and the inverse-square-root warmup schedule.

use crate::error::{contract, Result};
use crate::params::ParamStore;
use crate::tensor::Element;

/// `lr = d^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub d_model: usize,
    pub warmup_steps: u64,
    /// Constant multiplier applied on top of the schedule (1.0 = plain formula).
    pub scale: f64,
}

impl LrSchedule {
    pub fn new(d_model: usize, warmup_steps: u64) -> Self {
        Self {
            d_model,
            warmup_steps,
            scale: 1.0,
        }
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        lr_at(step, self).map(|lr| lr * self.scale)
    }
}

pub fn lr_at(step: u64, sched: &LrSchedule) -> Result<f64> {
    if step == 0 {
        return Err(contract("learning rate schedule starts at step 1"));
    }
    if sched.warmup_steps == 0 || sched.d_model == 0 {
        return Err(contract("warmup and model dimension must be positive"));
    }
    let s = step as f64;
    let w = sched.warmup_steps as f64;
    Ok((sched.d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

/// Adam moments for every parameter of a store.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new<T: Element>(store: &ParamStore<T>) -> Self {
        Self::with_betas(store, 0.9, 0.98, 1e-9)
    }

    pub fn with_betas<T: Element>(
        store: &ParamStore<T>,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    ) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|p| vec![0.0f32; p.value.numel()])
                .collect()
        };
        Self {
            beta1,
            beta2,
            epsilon,
            step_count: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// One bias-corrected Adam update of every parameter. Every parameter must
    /// carry a gradient; parameters the loss did not reach should be given an
    /// explicit zero gradient by the caller.
    pub fn step<T: Element>(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(contract(
                "optimizer state does not match the parameter store",
            ));
        }
        if let Some(p) = store.iter().find(|p| p.grad.is_none()) {
            return Err(contract(format!("parameter `{}` has no gradient", p.name)));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grad = p.grad.as_ref().expect("checked above");
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                let g = g.as_f64();
                let mf = b1 * *m as f64 + (1.0 - b1) * g;
                let vf = b2 * *v as f64 + (1.0 - b2) * g * g;
                *m = mf as f32;
                *v = vf as f32;
                let update = lr * (mf / bc1) / ((vf / bc2).sqrt() + self.epsilon);
                *w = T::of(w.as_f64() - update);
            }
        }
        Ok(())
    }

    /// Give every gradient-less parameter an explicit zero gradient.
    pub fn fill_missing_grads<T: Element>(store: &mut ParamStore<T>) {
        for p in store.iter_mut() {
            if p.grad.is_none() {
                p.grad = Some(crate::tensor::Tensor::zeros(p.value.shape()));
            }
        }
    }
}
