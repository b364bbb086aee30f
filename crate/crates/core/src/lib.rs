//! Joint response generation and extractive QA over multi-turn dialog.
//!
//! The model encodes each dialog utterance and the question with shared
//! bidirectional LSTMs, fuses question information into dialog words
//! through a stack of memory-augmented cross-attention layers whose gated
//! memory carries state across utterances, pools the result through
//! word-level and utterance-level self-attention into a dialog vector, and
//! from there both scores every context token as answer/non-answer and
//! decodes the next response with an attentive LSTM decoder. Training is
//! joint negative log-likelihood + per-token binary cross-entropy under
//! Adagrad with value clipping; everything is deterministic given a seed.

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
