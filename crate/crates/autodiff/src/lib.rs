//! Reverse-mode automatic differentiation over small dense `f64` arrays.
//!
//! Operations are recorded on a [`Tape`] as they execute. Inputs created with
//! [`Tape::leaf`] are tracked; [`Tape::backward`] sweeps the tape in reverse and
//! fills gradients for every tracked node. Masked entries use a real `-inf`
//! whose gradient is exactly zero.

mod array;
pub mod checkpoint;
mod gradcheck;
mod tape;

pub use array::{log_add_exp, log_sum_exp, NArray};
pub use checkpoint::{Checkpoint, Precision};
pub use gradcheck::grad_check;
pub use tape::{Tape, Var};

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range for bound {bound}")]
    OutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{0}: every entry is masked, no valid action")]
    NoValidEntries(&'static str),
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{0}: empty operand list")]
    Empty(&'static str),
    #[error("non-finite value {0}")]
    NonFinite(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("corrupt checkpoint at byte {offset}: {reason}")]
    Checkpoint { offset: usize, reason: String },
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;
