//! Graph-Transformer translation lab.
//!
//! A small reverse-mode autodiff engine, Transformer building blocks, an
//! encoder that splits each layer's representation into previous and
//! incremental streams with a three-part attention group, a vanilla
//! decoder with beam search, synthetic tasks with BLEU reporting, and a
//! symbolic analysis of subgraph orders across layers.
//!
//! Matrix products, per-segment attention and per-sentence evaluation use
//! rayon with the default `parallel` feature and run sequentially without
//! it; results are bitwise identical either way.

pub mod attention;
pub mod autograd;
pub mod beam;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod exec;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod subgraph;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use config::{Architecture, FusionKind, ModelConfig, RunConfig};
pub use error::{Error, Result};
pub use exec::Execution;
pub use model::Seq2Seq;
pub use params::{Ctx, ParamId, ParamStore};
pub use tensor::{Element, Tensor};
