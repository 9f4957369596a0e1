//! Training loop: token-budget batches, Adam with warmup, periodic
//! validation and best-by-validation-loss checkpoints.

use std::collections::VecDeque;
use std::path::PathBuf;

use crate::autograd::Tape;
use crate::checkpoint::{Checkpoint, DirLock};
use crate::config::RunConfig;
use crate::data::{make_batches, Batch, ParallelCorpus, PAD};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{argmax, MetricRecord};
use crate::model::Seq2Seq;
use crate::optim::{AdamState, LrSchedule};
use crate::params::{derive_seed, Ctx, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss: f32,
    pub accuracy: f64,
    pub lr: f64,
}

/// Token-weighted loss and accuracy over a corpus.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalStats {
    pub loss: f64,
    pub accuracy: f64,
    pub tokens: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub steps: u64,
    pub log: Vec<StepLog>,
    pub validations: Vec<(u64, EvalStats)>,
    /// Step and stats of the best validation, if any was run.
    pub best: Option<(u64, EvalStats)>,
    /// Parameters at the best validation (or the final ones without validation).
    pub best_params: ParamStore<f32>,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Seq2Seq,
    pub store: ParamStore<f32>,
    pub adam: AdamState,
    pub schedule: LrSchedule,
    pub step: u64,
    pub execution: Execution,
    epoch: u64,
    queue: VecDeque<Batch>,
    train: ParallelCorpus,
}

impl Trainer {
    pub fn new(cfg: RunConfig, train: ParallelCorpus) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Data("empty training corpus".into()));
        }
        let mut store = ParamStore::new();
        let model = Seq2Seq::new(&mut store, &cfg.model, cfg.train.seed)?;
        let mut schedule = LrSchedule::new(cfg.model.d_model, cfg.model.warmup);
        schedule.scale = cfg.model.lr_scale;
        Ok(Self {
            adam: AdamState::new(&store),
            cfg,
            model,
            store,
            schedule,
            step: 0,
            execution: Execution::default(),
            epoch: 0,
            queue: VecDeque::new(),
            train,
        })
    }

    fn next_batch(&mut self) -> Batch {
        if self.queue.is_empty() {
            let seed = derive_seed(self.cfg.train.seed, 0xe90c_0000 + self.epoch);
            self.queue =
                make_batches(&self.train.pairs, self.cfg.train.batch_tokens, Some(seed)).into();
            self.epoch += 1;
        }
        self.queue
            .pop_front()
            .expect("training corpus is non-empty")
    }

    /// One optimizer step on the next batch.
    pub fn step(&mut self) -> Result<StepLog> {
        let batch = self.next_batch();
        self.step += 1;
        self.store.zero_grad();
        let tape = Tape::new();
        let (loss, accuracy) = {
            let cx = Ctx::train(
                &tape,
                &self.store,
                derive_seed(self.cfg.train.seed, self.step),
            );
            let out = self.model.batch_loss(&cx, &batch)?;
            let loss = out.loss.value().item()?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss is {loss} at step {}",
                    self.step
                )));
            }
            let (hit, total) = accuracy_counts(&out.logits.value(), &out.targets);
            tape.backward(out.loss)?;
            (loss, hit as f64 / total.max(1) as f64)
        };
        tape.accumulate_param_grads(&mut self.store)?;
        AdamState::fill_missing_grads(&mut self.store);
        let lr = self.schedule.lr_at(self.step)?;
        self.adam.step(&mut self.store, lr)?;
        Ok(StepLog {
            step: self.step,
            loss,
            accuracy,
            lr,
        })
    }

    pub fn evaluate(&self, corpus: &ParallelCorpus) -> Result<EvalStats> {
        evaluate_loss(
            &self.model,
            &self.store,
            corpus,
            self.cfg.train.batch_tokens,
            self.execution,
        )
    }

    fn checkpoint_dir(&self) -> Option<PathBuf> {
        self.cfg.train.checkpoint_dir.clone()
    }

    /// Train to `max_steps`, validating every `eval_interval` steps and at the
    /// end. Records go to `sink` as they are produced.
    pub fn run(
        &mut self,
        valid: Option<&ParallelCorpus>,
        sink: &mut dyn FnMut(&MetricRecord) -> Result<()>,
    ) -> Result<TrainOutcome> {
        let _lock = self
            .checkpoint_dir()
            .map(|d| DirLock::acquire(&d))
            .transpose()?;
        let mut log = Vec::new();
        let mut validations = Vec::new();
        let mut best: Option<(u64, EvalStats)> = None;
        let mut best_params = self.store.clone();
        let max_steps = self.cfg.train.max_steps;
        let interval = self.cfg.train.eval_interval.max(1);
        loop {
            let due = self.step == max_steps || (self.step > 0 && self.step % interval == 0);
            if due {
                if let Some(v) = valid.filter(|v| !v.is_empty()) {
                    let stats = self.evaluate(v)?;
                    sink(&MetricRecord::new("loss", "valid", stats.loss, self.step))?;
                    sink(&MetricRecord::new(
                        "accuracy",
                        "valid",
                        stats.accuracy,
                        self.step,
                    ))?;
                    validations.push((self.step, stats));
                    if best.is_none_or(|(_, b)| stats.loss < b.loss) {
                        best = Some((self.step, stats));
                        best_params = self.store.clone();
                        self.save(BEST_CHECKPOINT, &self.store)?;
                    }
                } else if self.step == max_steps {
                    best_params = self.store.clone();
                    self.save(BEST_CHECKPOINT, &self.store)?;
                }
            }
            if self.step >= max_steps {
                break;
            }
            let s = self.step()?;
            sink(&MetricRecord::new(
                "loss",
                "train",
                f64::from(s.loss),
                s.step,
            ))?;
            sink(&MetricRecord::new("accuracy", "train", s.accuracy, s.step))?;
            sink(&MetricRecord::new("lr", "train", s.lr, s.step))?;
            log::debug!(
                "step {} loss {:.4} acc {:.3} lr {:.3e}",
                s.step,
                s.loss,
                s.accuracy,
                s.lr
            );
            log.push(s);
        }
        self.save(LAST_CHECKPOINT, &self.store)?;
        Ok(TrainOutcome {
            steps: self.step,
            log,
            validations,
            best,
            best_params,
        })
    }

    fn save(&self, file: &str, store: &ParamStore<f32>) -> Result<()> {
        if let Some(dir) = self.checkpoint_dir() {
            Checkpoint::capture(&self.cfg, self.step, store).save(&dir.join(file))?;
        }
        Ok(())
    }
}

fn accuracy_counts(logits: &crate::tensor::Tensor<f32>, targets: &[usize]) -> (usize, usize) {
    let v = logits.last_dim();
    let mut hit = 0;
    let mut total = 0;
    for (i, &t) in targets.iter().enumerate() {
        if t == PAD {
            continue;
        }
        total += 1;
        if argmax(&logits.data()[i * v..(i + 1) * v]) == t {
            hit += 1;
        }
    }
    (hit, total)
}

/// Teacher-forced loss (no label smoothing) and token accuracy, batched
/// without shuffling. Batches run independently under `exec`.
pub fn evaluate_loss(
    model: &Seq2Seq,
    store: &ParamStore<f32>,
    corpus: &ParallelCorpus,
    batch_tokens: usize,
    exec: Execution,
) -> Result<EvalStats> {
    if corpus.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty corpus".into()));
    }
    let batches = make_batches(&corpus.pairs, batch_tokens, None);
    let parts = exec.map(&batches, |b| -> Result<(f64, usize, usize)> {
        let tape = Tape::new();
        let cx = Ctx::eval(&tape, store);
        let out = model.batch_loss(&cx, b)?;
        let ce = out
            .logits
            .cross_entropy(&out.targets, PAD, 0.0)?
            .value()
            .item()?;
        let (hit, total) = accuracy_counts(&out.logits.value(), &out.targets);
        Ok((f64::from(ce) * total as f64, hit, total))
    });
    let (mut loss, mut hit, mut total) = (0.0, 0, 0);
    for p in parts {
        let (l, h, t) = p?;
        loss += l;
        hit += h;
        total += t;
    }
    if !loss.is_finite() {
        return Err(Error::Numeric("validation loss is not finite".into()));
    }
    Ok(EvalStats {
        loss: loss / total as f64,
        accuracy: hit as f64 / total as f64,
        tokens: total,
    })
}
