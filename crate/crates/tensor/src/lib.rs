//! Dense NCHW tensors with a tape-based reverse-mode autodiff graph.
//!
//! The engine covers exactly what the translation networks need:
//! grouped and transposed convolutions, instance normalization, the usual
//! pointwise activations and a handful of scalar reductions used as losses.
//! Matrix products go through `matrixmultiply`; everything else is plain
//! loops over contiguous buffers.

mod conv;
mod error;
mod graph;
mod params;
mod scalar;
mod tensor;

pub use conv::ConvGeom;
pub use error::{Result, TensorError};
pub use graph::{Conv2dOptions, Gradients, Graph, NodeId};
pub use params::{Binder, ParameterSet};
pub use scalar::Scalar;
pub use tensor::Tensor;
