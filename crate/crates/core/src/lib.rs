//! Cross-attention speech-to-LLM bridge with a wait-k streaming policy.
//!
//! Text queries (prompt plus previously emitted tokens) attend over speech
//! encoder states through a small stack of causal self-attention and
//! cross-attention layers; the extracted features are added to the token
//! embeddings and fed to an unchanged causal language model. A staircase
//! cross-attention mask turns the same model into a streaming decoder.

pub mod bench;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod policy;
pub mod prompt;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
