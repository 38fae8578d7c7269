//! Entity knowledge-block editing on a desk-scale decoder-only language model.
//!
//! The crate is organized around one idea: the hidden-state rows an entity's
//! tokens occupy in the residual stream at some layer (its "knowledge block")
//! can be swapped for rows produced by a small trained network, steering the
//! model's predictions about that entity while leaving everything else alone.
//!
//! Modules:
//! - [`tensor`] — minimal reverse-mode gradient engine (tape + primitives)
//! - [`model`] — micro decoder-only transformer with residual-stream capture
//!   and a span-replacement hook
//! - [`scope`] — exact/fuzzy entity matching that decides when edits apply
//! - [`editor`] — the hypernetwork, the replacement path, and bundle IO
//! - [`train`] — hypernetwork optimization and LM pretraining
//! - [`eval`] — reliability/generality/locality, fluency, information gain,
//!   probes, and the knowledge-block swap experiment
//! - [`data`] — synthetic fact world generation and dataset file IO

pub mod data;
pub mod editor;
pub mod error;
pub mod eval;
pub mod model;
pub mod scope;
pub mod tensor;
pub mod train;

pub use error::{KbError, Result};

#[cfg(feature = "testkit")]
pub mod testkit;
