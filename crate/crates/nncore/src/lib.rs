//! Minimal differentiable numeric core: matrices, a reverse-mode tape,
//! attention blocks, cross-entropy, Adam and a finite-difference checker.

pub mod attention;
pub mod error;
pub mod gradcheck;
pub mod matrix;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tape;

pub use attention::{
    causal_mask, cross_attention, masked_self_attention, sinusoidal_pe, AttentionOutput,
    AttentionParams, CrossAttentionOutput, MASK_VALUE,
};
pub use error::{NnError, Result};
pub use gradcheck::{grad_check, GradCheck};
pub use matrix::Matrix;
pub use ops::{cross_entropy, cross_entropy_with_logits};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use tape::{log_sum_exp, sigmoid, softmax, Bound, Gradients, NodeGrads, Tape, Var};
