//! A desk-scale laboratory for studying which next-token probability
//! distributions a frozen autoregressive transformer can be driven to emit
//! by optimizing only a prefix of input embeddings.
//!
//! The crate is organized around five subsystems:
//!
//! - [`lm`]: a minimal GPT-style transformer with exact double-precision
//!   forward passes and exact reverse-mode gradients of a KL loss with
//!   respect to the prefix embeddings only. Model weights are frozen after
//!   creation.
//! - [`dist`]: construction and measurement of target distributions —
//!   entropy-targeted synthesis, outlier-constrained synthesis with a
//!   feasibility bound, shuffling, cross-vocabulary migration,
//!   subset-uniform targets, and model-generated targets.
//! - [`tune`]: the three prompt-tuning frameworks (soft, hard, hybrid) with
//!   early stopping and best-of-initializations selection.
//! - [`harness`]: experiment orchestration — entropy sweeps, paired
//!   comparisons, aggregation, CSV and SVG emission, all fully
//!   deterministic given a master seed.
//! - [`store`]: bit-exact binary persistence for models, targets, prompt
//!   states, and experiment plans.
//!
//! Everything runs in `f64`. Losses and entropies are computed internally
//! in nats and reported in bits at every public boundary.

pub mod dist;
pub mod error;
pub mod harness;
pub mod lm;
pub mod prob;
pub mod store;
pub mod tune;
pub(crate) mod util;

pub use error::{Error, Result};
pub use lm::{EmbeddingSequence, KlEval, ModelBundle, ModelConfig};
pub use prob::ProbVector;
