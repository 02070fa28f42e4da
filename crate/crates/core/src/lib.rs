//! Sequence-to-sequence editing with a span-copying decoder.
//!
//! The decoder chooses at each step between generating a vocabulary token and
//! copying a contiguous span of the input. Because many action sequences
//! produce the same output, training maximizes the marginal likelihood over all
//! of them and decoding merges beam rays that emit the same tokens.

pub mod artifact;
pub mod corpus;
mod error;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod oracle;
pub mod rng;
pub mod search;

pub use error::{Error, Result};
