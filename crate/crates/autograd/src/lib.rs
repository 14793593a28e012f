//! Tape-based reverse-mode differentiation for the small convolutional,
//! recurrent and attention networks used by the view-synthesis model.
//!
//! Everything runs single-threaded on the CPU with a fixed evaluation
//! order, so a graph evaluated twice on the same inputs produces
//! bit-identical values and gradients.

pub mod conv;
mod graph;
mod optim;
mod scalar;
mod tensor;

pub use graph::{exact_sum, Grads, Graph, Var};
pub use optim::Adam;
pub use scalar::{DType, Real};
pub use tensor::Tensor;
