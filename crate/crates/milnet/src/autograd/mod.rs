//! Dense-array arithmetic with reverse-mode automatic differentiation.
//!
//! All values are 64-bit floats. Forward operations are recorded on a
//! [`Tape`]; [`Tape::backward`] replays them in reverse and accumulates
//! gradients for every tensor registered with `requires_grad`. A
//! finite-difference [`gradcheck`] validates custom compositions end to end.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{
    gradcheck, gradcheck_with_corruption, GradCheckEntry, GradCheckReport, LossBuilder,
};
pub use tape::{BackwardReport, ElementwiseOp, ReduceOp, Tape, TensorId};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutogradError {
    #[error("{op}: operand shapes {lhs:?} and {rhs:?} are incompatible")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a rank-{expected} operand, found rank {found}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{op}: expected {expected} operand(s)")]
    Arity { op: &'static str, expected: usize },
    #[error("{op}: input value {value} is outside the valid domain")]
    Domain { op: &'static str, value: f64 },
    #[error("{op}: slice along axis {axis} has no valid entries")]
    EmptySlice { op: &'static str, axis: usize },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("mask of length {mask_len} does not match extent {extent} along axis {axis}")]
    MaskLength {
        mask_len: usize,
        extent: usize,
        axis: usize,
    },
    #[error("gather index {index} out of range for a table with {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("data length {len} does not match shape {shape:?}")]
    InvalidShape { len: usize, shape: Vec<usize> },
    #[error("backward requires a single-element loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("concat requires at least one operand")]
    EmptyConcat,
    #[error("loss builder is non-deterministic: forward passes produced {first} and {second}")]
    NonDeterministicBuilder { first: f64, second: f64 },
}
