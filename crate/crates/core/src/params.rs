//! Named parameter registry and the per-forward binding context.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{contract, shape_err, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Every trainable tensor of a model, registered exactly once under a unique name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Element = f32> {
    params: Vec<Param<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(contract(format!("parameter `{name}` registered twice")));
        }
        self.params.push(Param {
            name,
            value,
            grad: None,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(shape_err("set_value", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    pub(crate) fn add_grad(&mut self, id: ParamId, g: &Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if g.shape() != p.value.shape() {
            return Err(shape_err("param grad", p.value.shape(), g.shape()));
        }
        match &mut p.grad {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, &b)| *a += b),
            None => p.grad = Some(g.clone()),
        }
        Ok(())
    }

    /// Same parameters in another precision (grads dropped).
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: None,
                })
                .collect(),
        }
    }
}

/// Binds parameters onto a tape for one forward pass and owns the dropout RNG.
///
/// Each parameter is bound at most once per context, so shared weights
/// accumulate a single gradient.
pub struct Ctx<'t, 's, T: Element = f32> {
    tape: &'t Tape<T>,
    store: &'s ParamStore<T>,
    bound: RefCell<Vec<Option<Var<'t, T>>>>,
    dropout_rng: Option<RefCell<ChaCha8Rng>>,
    track: bool,
}

impl<'t, 's, T: Element> Ctx<'t, 's, T> {
    /// Frozen parameters, no dropout.
    pub fn eval(tape: &'t Tape<T>, store: &'s ParamStore<T>) -> Self {
        Self::build(tape, store, None, false)
    }

    /// Differentiable parameters, no dropout (used by gradient oracles).
    pub fn grad_eval(tape: &'t Tape<T>, store: &'s ParamStore<T>) -> Self {
        Self::build(tape, store, None, true)
    }

    /// Differentiable parameters with dropout drawn from `seed`.
    pub fn train(tape: &'t Tape<T>, store: &'s ParamStore<T>, seed: u64) -> Self {
        Self::build(tape, store, Some(ChaCha8Rng::seed_from_u64(seed)), true)
    }

    fn build(
        tape: &'t Tape<T>,
        store: &'s ParamStore<T>,
        rng: Option<ChaCha8Rng>,
        track: bool,
    ) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
            dropout_rng: rng.map(RefCell::new),
            track,
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn param(&self, id: ParamId) -> Var<'t, T> {
        let mut bound = self.bound.borrow_mut();
        *bound[id.0].get_or_insert_with(|| {
            self.tape
                .param(id, self.store.value(id).clone(), self.track)
        })
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(value)
    }

    /// Inverted dropout; identity outside training.
    pub fn dropout(&self, x: Var<'t, T>, p: f64) -> Result<Var<'t, T>> {
        match &self.dropout_rng {
            Some(rng) => crate::nn::dropout(x, p, true, &mut *rng.borrow_mut()),
            None => crate::nn::dropout(x, p, false, &mut NoRng),
        }
    }
}

/// Placeholder RNG for eval-mode dropout, which never samples.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("eval-mode dropout never samples")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("eval-mode dropout never samples")
    }
    fn fill_bytes(&mut self, _dst: &mut [u8]) {
        unreachable!("eval-mode dropout never samples")
    }
}

/// Deterministic seeded RNG used throughout.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream seed from a base seed and a tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.random()
}
