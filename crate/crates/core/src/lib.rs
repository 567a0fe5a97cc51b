//! Multi-stream end-to-end sequence recognition.
//!
//! A character-level recognizer that consumes several parallel feature
//! streams of the same utterance, encodes each with its own recurrent (or
//! convolutional-recurrent) encoder, and fuses the streams with a two-level
//! attention hierarchy: frame-level attention inside each stream, then a
//! learned softmax over the per-stream context vectors. Training jointly
//! optimizes an attention decoder and one alignment-lattice (CTC) head per
//! encoder; decoding combines attention, lattice prefix scores, and an
//! optional character language model in one label-synchronous beam search.

pub mod attention;
pub mod ctc;
pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod layers;
pub mod lm;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
