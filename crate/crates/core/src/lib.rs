//! Uncertainty-aware treatment recommendation: a multimodal fusion teacher,
//! a survivor-only student whose divergence measures uncertainty, risk-aware
//! fine-tuning, and conformal selection with false discovery rate control.

pub mod conformal;
pub mod error;
pub mod metrics;
pub mod outcomes;
pub mod pipeline;
pub mod seeds;
pub mod stats;
pub mod synthgen;
pub mod teacher;
pub mod training;
pub mod uncertainty;

pub use error::{Result, SaferError};
