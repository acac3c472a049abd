//! Dense reverse-mode automatic differentiation over a fixed set of
//! primitives: matmul, 2-D convolution, bias, ReLU, batch normalization,
//! global average pooling, row selection, softmax cross-entropy and scalar
//! combinators.

mod gradcheck;
mod graph;
pub mod kernels;
mod param;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Feed, Graph, NodeId, Op};
pub(crate) use graph::softmax_xent;
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::{Float, Tensor};
