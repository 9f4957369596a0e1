//! Encoder-decoder model: graph or vanilla encoder, vanilla post-norm decoder.

use rand::Rng;

use crate::attention::MultiHeadAttention;
use crate::autograd::{Tape, Var};
use crate::beam::{self, BeamConfig, BeamHypothesis, StepScorer};
use crate::config::ModelConfig;
use crate::data::{Batch, BOS, EOS, PAD};
use crate::encoder::{Encoded, Encoder};
use crate::error::{contract, Error, Result};
use crate::kernels::AttnLayout;
use crate::nn::{Embedding, FeedForward, LayerNorm, Linear};
use crate::params::{derive_seed, seeded, Ctx, ParamStore};
use crate::tensor::{Element, Tensor};

/// Masked self-attention, encoder-decoder attention and feed-forward, each
/// followed by dropout, residual and layer norm.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub self_norm: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
    pub dropout: f64,
}

impl DecoderLayer {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            self_attn: MultiHeadAttention::new(
                store,
                &format!("{name}.self_attn"),
                d,
                d,
                cfg.n_heads,
                rng,
            )?,
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), d)?,
            cross_attn: MultiHeadAttention::new(
                store,
                &format!("{name}.cross_attn"),
                d,
                d,
                cfg.n_heads,
                rng,
            )?,
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), d)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, cfg.d_ff, rng)?,
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d)?,
            dropout: cfg.dropout,
        })
    }

    pub fn forward<'t, T: Element>(
        &self,
        cx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
        memory: Var<'t, T>,
        self_layout: &AttnLayout,
        cross_layout: &AttnLayout,
    ) -> Result<Var<'t, T>> {
        let a = cx.dropout(self.self_attn.forward(cx, x, x, self_layout)?, self.dropout)?;
        let x = self.self_norm.forward(cx, x.add(a)?)?;
        let c = cx.dropout(
            self.cross_attn.forward(cx, x, memory, cross_layout)?,
            self.dropout,
        )?;
        let x = self.cross_norm.forward(cx, x.add(c)?)?;
        let f = cx.dropout(self.ffn.forward(cx, x, self.dropout)?, self.dropout)?;
        self.ffn_norm.forward(cx, x.add(f)?)
    }
}

/// Full translation model. Holds parameter handles only; values live in a
/// [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Seq2Seq {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub tgt_embedding: Embedding,
    pub decoder: Vec<DecoderLayer>,
    pub output: Linear,
}

/// Loss and logits of one training batch.
pub struct BatchOutput<'t, T: Element> {
    pub loss: Var<'t, T>,
    pub logits: Var<'t, T>,
    pub targets: Vec<usize>,
    pub encoded: Encoded<'t, T>,
}

impl Seq2Seq {
    /// Build the model and register freshly initialised parameters in `store`.
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded(derive_seed(seed, 0x1417));
        let d = cfg.d_model;
        let src_embedding = Embedding::new(store, "src_embed", cfg.src_vocab, d, &mut rng)?;
        let tgt_embedding = if cfg.share_embeddings {
            src_embedding.clone()
        } else {
            Embedding::new(store, "tgt_embed", cfg.tgt_vocab, d, &mut rng)?
        };
        let encoder = Encoder::new(store, cfg, src_embedding, &mut rng)?;
        let decoder = (0..cfg.n_layers)
            .map(|i| DecoderLayer::new(store, &format!("decoder.layer{i}"), cfg, &mut rng))
            .collect::<Result<_>>()?;
        let output = Linear::new(store, "output", d, cfg.tgt_vocab, &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            tgt_embedding,
            decoder,
            output,
        })
    }

    pub fn encode<'t, T: Element>(
        &self,
        cx: &Ctx<'t, '_, T>,
        sources: &[&[usize]],
    ) -> Result<Encoded<'t, T>> {
        self.encoder.encode(cx, sources)
    }

    /// Packed decoder logits. Row `t` of prefix `j` scores the token after
    /// `prefixes[j][..=t]`, attending over memory segment `key_of[j]`.
    pub fn decode_logits<'t, T: Element>(
        &self,
        cx: &Ctx<'t, '_, T>,
        memory: Var<'t, T>,
        memory_lengths: &[usize],
        prefixes: &[&[usize]],
        key_of: &[usize],
    ) -> Result<Var<'t, T>> {
        if prefixes.is_empty() || prefixes.len() != key_of.len() {
            return Err(contract("decode_logits needs one memory index per prefix"));
        }
        if prefixes.iter().any(|p| p.first() != Some(&BOS)) {
            return Err(contract("every decoder prefix must start with BOS"));
        }
        if let Some(&k) = key_of.iter().find(|&&k| k >= memory_lengths.len()) {
            return Err(Error::Index {
                what: "memory segment",
                index: k,
                bound: memory_lengths.len(),
            });
        }
        let lengths: Vec<usize> = prefixes.iter().map(|p| p.len()).collect();
        let self_layout = AttnLayout::self_attention(&lengths, true);
        let cross_layout = AttnLayout::cross(&lengths, memory_lengths, key_of);
        let mut x = self.tgt_embedding.forward(cx, prefixes)?;
        for layer in &self.decoder {
            x = layer.forward(cx, x, memory, &self_layout, &cross_layout)?;
        }
        self.output.forward(cx, x)
    }

    /// Teacher-forced loss over a batch: mean cross entropy of `y₁ … y_T EOS`.
    pub fn batch_loss<'t, T: Element>(
        &self,
        cx: &Ctx<'t, '_, T>,
        batch: &Batch,
    ) -> Result<BatchOutput<'t, T>> {
        let sources = batch.sources();
        let encoded = self.encode(cx, &sources)?;
        let inputs = batch.decoder_inputs();
        let prefixes: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
        let key_of: Vec<usize> = (0..prefixes.len()).collect();
        let logits =
            self.decode_logits(cx, encoded.memory, &encoded.lengths, &prefixes, &key_of)?;
        let targets = batch.decoder_targets();
        let loss = logits.cross_entropy(&targets, PAD, self.cfg.label_smoothing)?;
        Ok(BatchOutput {
            loss,
            logits,
            targets,
            encoded,
        })
    }

    /// `Σ_t log p(y_t | y_<t, x)` for the given target tokens (append EOS to
    /// score a complete sentence).
    pub fn sequence_log_prob<T: Element>(
        &self,
        store: &ParamStore<T>,
        src: &[usize],
        tgt: &[usize],
    ) -> Result<f64> {
        if tgt.is_empty() {
            return Ok(0.0);
        }
        if let Some(&bad) = tgt.iter().find(|&&t| t >= self.cfg.tgt_vocab) {
            return Err(Error::Index {
                what: "target token",
                index: bad,
                bound: self.cfg.tgt_vocab,
            });
        }
        let tape = Tape::new();
        let cx = Ctx::eval(&tape, store);
        let enc = self.encode(&cx, &[src])?;
        let prefix: Vec<usize> = std::iter::once(BOS)
            .chain(tgt[..tgt.len() - 1].iter().copied())
            .collect();
        let logits = self
            .decode_logits(&cx, enc.memory, &enc.lengths, &[&prefix], &[0])?
            .value();
        let v = self.cfg.tgt_vocab;
        Ok(tgt
            .iter()
            .enumerate()
            .map(|(t, &y)| log_softmax_row(&logits.data()[t * v..(t + 1) * v])[y])
            .sum())
    }

    /// A scorer that decodes `src` against frozen parameters.
    pub fn scorer<'a, T: Element>(
        &'a self,
        store: &'a ParamStore<T>,
        src: &[usize],
    ) -> Result<ModelScorer<'a, T>> {
        let tape = Tape::new();
        let cx = Ctx::eval(&tape, store);
        let memory = self.encode(&cx, &[src])?.memory.value();
        Ok(ModelScorer {
            model: self,
            store,
            memory,
        })
    }

    pub fn max_decode_len(&self, src_len: usize) -> usize {
        src_len + self.cfg.max_decode_extra
    }

    /// Beam search translation; `width == 1` is greedy decoding.
    pub fn translate<T: Element>(
        &self,
        store: &ParamStore<T>,
        src: &[usize],
        width: usize,
        alpha: f64,
    ) -> Result<BeamHypothesis> {
        let scorer = self.scorer(store, src)?;
        beam::beam_search(
            &scorer,
            &BeamConfig {
                width,
                alpha,
                max_len: self.max_decode_len(src.len()),
                eos: EOS,
            },
        )
    }

    pub fn greedy<T: Element>(
        &self,
        store: &ParamStore<T>,
        src: &[usize],
    ) -> Result<BeamHypothesis> {
        let scorer = self.scorer(store, src)?;
        beam::greedy(&scorer, self.max_decode_len(src.len()), EOS)
    }
}

/// `log softmax` of one row, in 64-bit.
pub fn log_softmax_row<T: Element>(row: &[T]) -> Vec<f64> {
    let m = row
        .iter()
        .map(|x| x.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let z = row.iter().map(|x| (x.as_f64() - m).exp()).sum::<f64>().ln() + m;
    row.iter().map(|x| x.as_f64() - z).collect()
}

/// Decodes prefixes for one encoded source. Each call re-runs the decoder
/// over the full prefixes; the memory is computed once.
pub struct ModelScorer<'a, T: Element> {
    model: &'a Seq2Seq,
    store: &'a ParamStore<T>,
    memory: Tensor<T>,
}

impl<T: Element> StepScorer for ModelScorer<'_, T> {
    fn vocab(&self) -> usize {
        self.model.cfg.tgt_vocab
    }

    fn log_probs(&self, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        let tape = Tape::new();
        let cx = Ctx::eval(&tape, self.store);
        let memory = cx.constant(self.memory.clone());
        let full: Vec<Vec<usize>> = prefixes
            .iter()
            .map(|p| std::iter::once(BOS).chain(p.iter().copied()).collect())
            .collect();
        let refs: Vec<&[usize]> = full.iter().map(Vec::as_slice).collect();
        let logits = self
            .model
            .decode_logits(
                &cx,
                memory,
                &[self.memory.shape()[0]],
                &refs,
                &vec![0; refs.len()],
            )?
            .value();
        let v = self.vocab();
        let mut row = 0;
        Ok(full
            .iter()
            .map(|p| {
                row += p.len();
                log_softmax_row(&logits.data()[(row - 1) * v..row * v])
            })
            .collect())
    }
}
