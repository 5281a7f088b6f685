//! Decoder-only transformer toolkit for modular layer transplantation.
//!
//! A small causal language model with hand-written reverse-mode gradients
//! ([`forward`], [`backward`], [`train`]), the surgery that moves trained
//! layer stacks between models ([`surgery`]), standalone donor training
//! behind a frozen embedding ([`donor`]), and the fine-tuning baselines
//! they are compared against ([`baselines`]).
//!
//! The crate is `no_std` + `alloc`; file formats, corpora and experiment
//! orchestration live in the `transplant` crate.
#![cfg_attr(not(test), no_std)]
// Config and solver checks are written `!(x > 0.0)` so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod backward;
pub mod baselines;
pub mod config;
pub mod donor;
pub mod error;
pub mod forward;
pub mod freeze;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod optim;
pub mod report;
pub mod surgery;
pub mod tensor;
pub mod train;

pub use backward::{backward, loss_and_gradients, Gradients};
pub use config::{ModelConfig, Schedule, TrainConfig};
pub use error::{Error, Result};
pub use forward::{embed, forward, forward_layers};
pub use freeze::{trainable_fraction, FreezeMask, GroupMask};
pub use loss::{clm_loss, mean_loss, perplexity};
pub use model::{
    Adapters, Bridge, BridgeSlot, Embedding, Head, LowRank, ParamGroup, ParamSet, Rescale, TransformerLayer,
    TransformerModel, ACTIVATION_KIND, LAYERNORM_KIND,
};
pub use report::EvalReport;
pub use tensor::Tensor;
pub use train::{train, Clock, NoClock, TrainReport};
