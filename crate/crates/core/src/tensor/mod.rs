//! Dense tensors with reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward evaluation as a node
//! holding its output value. [`Tape::backward`] walks the record in reverse,
//! propagating adjoints and accumulating the gradients of learnable
//! parameters into a [`Gradients`] buffer. Parameter values are borrowed from
//! the [`ParamStore`] rather than copied, so a tape is cheap to build per
//! graph sample and is simply dropped (or [`Tape::clear`]ed) afterwards.
//!
//! All values are two-dimensional; vectors are `n x 1` columns or `1 x n`
//! rows and scalars are `1 x 1`.

mod gradcheck;
mod param;
mod tape;

pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use param::{
    init, init_with_fans, Checkpoint, Gradients, InitKind, InitScheme, ParamId, ParamStore,
    ParamTensor, TensorRecord,
};
pub use tape::{sigmoid as sigmoid_value, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("index {index} out of range for {len} rows in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("backward requires a 1x1 output, got {0:?}")]
    NonScalarOutput((usize, usize)),
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}
