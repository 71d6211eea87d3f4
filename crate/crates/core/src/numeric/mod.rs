//! Dense tensors, a tape-based reverse-mode autodiff graph, and the neural
//! building blocks shared by the readers and the decoder.

mod gradcheck;
mod graph;
pub mod nn;
mod params;
mod tensor;

pub use gradcheck::{check_gradients, primitive_suite, GradCheckOptions, GradCheckReport};
pub use graph::{gelu, sigmoid, Graph, Var, LAYER_NORM_EPS};
pub use params::{Gradients, ParamId, ParamStore, Parameter, Precision};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("data of length {len} does not fit shape {shape:?}")]
    BadData { shape: Vec<usize>, len: usize },
    #[error("{op}: range {start}+{width} out of bounds for length {len}")]
    Slice { op: &'static str, start: usize, width: usize, len: usize },
    #[error("index {index} out of bounds for length {len}")]
    Index { index: usize, len: usize },
    #[error("nothing to concatenate or gather")]
    EmptyConcat,
    #[error("mask has {got} entries, expected {expected}")]
    MaskShape { expected: usize, got: usize },
    #[error("softmax row {row} has every entry masked")]
    AllMasked { row: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("model dimension {d} is not divisible by {heads} heads")]
    HeadCount { d: usize, heads: usize },
    #[error("convolution window must be odd, got {0}")]
    EvenWindow(usize),
    #[error("dropout rate must be in [0, 1), got {0}")]
    DropoutRate(f64),
    #[error("parameter {0:?} registered twice")]
    DuplicateParam(String),
    #[error("gradient check needs 64-bit parameter storage")]
    NeedsF64,
    #[error("loss evaluation failed: {0}")]
    Loss(String),
}

impl NumericError {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        NumericError::Shape { op, left: left.to_vec(), right: right.to_vec() }
    }
}
