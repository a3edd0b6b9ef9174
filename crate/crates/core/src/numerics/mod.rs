//! Tensors, reverse-mode differentiation and the seeded random source.

mod gradcheck;
mod graph;
pub mod math;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{masked_log_softmax_values, masked_softmax_values, Elementwise, Graph, Var};
pub use rng::{gaussian_init, Rng};
pub use tensor::Tensor;
