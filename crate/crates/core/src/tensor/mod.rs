//! Minimal reverse-mode differentiable matrix computation.

mod adam;
mod graph;
mod matrix;
mod params;

pub use adam::Adam;
pub use graph::{segments_from_counts, softmax_rows, Graph, NodeId, Segments, LAYER_NORM_EPS};
pub use matrix::Matrix;
pub use params::{glorot_uniform, Dense, LayerNormParams, ParamId, ParamStore};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{len} values cannot fill a {rows}x{cols} matrix")]
    BadData { rows: usize, cols: usize, len: usize },
    #[error("ragged rows: expected width {expected}, found {found}")]
    RaggedRows { expected: usize, found: usize },
    #[error("{op}: index {index} out of bounds {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward needs a 1x1 loss, got {0:?}")]
    NotScalar((usize, usize)),
    #[error("layer norm needs width >= 2, got {0}")]
    LayerNormWidth(usize),
    #[error("width {width} is not divisible into {heads} heads")]
    Heads { width: usize, heads: usize },
    #[error("entity segment is empty")]
    EmptySegment,
    #[error("{op}: empty input")]
    Empty { op: &'static str },
}
