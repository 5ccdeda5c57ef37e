//! Attention steering for hallucination mitigation in vision-language models,
//! driven by a synthetic surrogate model.

pub mod analysis;
pub mod attention;
pub mod detector;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod sample;
pub mod steering;
pub mod store;
pub mod surrogate;
pub mod tinynet;

pub use error::{MhsaError, Result};
