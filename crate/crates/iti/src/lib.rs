//! Truthfulness steering for small decoder-only transformers.
//!
//! The pipeline: collect per-head attention activations at the final prompt
//! token, train linear probes to find heads whose activations separate
//! truthful from false statements, turn the best heads into steering
//! directions with per-head scale estimates, and shift those activations at
//! inference time (or bake the shift into output-projection biases) to push
//! generations toward truthful answers.

pub mod acts;
pub mod data;
pub mod direction;
pub mod error;
pub mod eval;
pub mod intervene;
pub mod linalg;
pub mod model;
pub mod model_io;
pub mod probe;
pub mod provenance;
pub mod tokenizer;

pub use error::{Error, Result};
