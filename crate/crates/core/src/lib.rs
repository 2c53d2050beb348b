//! layerlab: a desk-scale encoder-decoder Transformer laboratory.
//!
//! The crate trains small translation models on synthetic bilingual tasks
//! and asks where translation happens inside them: each layer of a frozen
//! model is probed with a trained linear projection into the model's own
//! tied classifier, encoder probes additionally learn a softmax-weighted
//! fusion of the decoder's cross-attention matrices to carry source
//! representations to target positions, decoder sub-layers can be bypassed
//! to separate the contribution of decoding history from the source
//! encoding, and encoder/decoder depth trading is benchmarked for decode
//! speed.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod model;
pub mod evaluation;
pub mod probing;
pub mod training;
pub mod tensor;

pub use error::{Error, Result};
