//! Dense matrices, a reverse-mode tape over a fixed op set, seeded RNG
//! streams and a finite-difference checker.

mod gradcheck;
mod matrix;
mod rng;
mod tape;

pub use gradcheck::{finite_diff_check, finite_diff_check_with_head, Head};
pub use matrix::{argmax, l2_normalize_row, norm, softmax_row, Matrix, NORM_EPS};
pub use rng::{derive_seed, mix64, SeededRng};
pub use tape::{grad, Gradients, NodeId, Op, Tape};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("cannot normalize a vector with norm {norm:e}")]
    ZeroVector { norm: f64 },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },
    #[error("row {index} out of range for {rows} rows")]
    RowOutOfRange { index: usize, rows: usize },
    #[error("operation `{0}` is not differentiable on this tape")]
    UnsupportedOp(String),
    #[error("node {0} does not exist")]
    UnknownNode(usize),
    #[error("node {0} is not a leaf")]
    NotALeaf(usize),
    #[error("tape has no output node")]
    NoOutput,
    #[error("expected a scalar output, found shape {0:?}")]
    NonScalarOutput((usize, usize)),
    #[error("{0} needs at least one input")]
    Empty(&'static str),
    #[error("precondition violated: {0}")]
    Precondition(&'static str),
}
