//! Dense-tensor reverse-mode automatic differentiation.
//!
//! Just enough machinery for the attention policy: linear maps, grouped
//! matrix products, elementwise ops, masked (log-)softmax, layer norm, and
//! the gather/permutation plumbing between them. Forward values are
//! computed eagerly and recorded on a tape; one reverse sweep yields
//! gradients for every leaf.

pub mod check;
pub mod graph;
pub mod tensor;

pub use graph::{attention, sigmoid, softplus, Gradients, Graph, Mask, NodeId};
pub use tensor::Tensor;
