//! Tensors, reverse-mode autodiff, parameter updates and random streams.

pub mod graph;
pub mod optim;
pub mod param;
pub mod rng;
pub mod tensor;

pub use graph::{Graph, Var};
pub use optim::{adam_step, sgd_step, AdamState, Optimizer, OptimizerKind};
pub use param::{Param, Role};
pub use rng::{sample_gumbel, sample_standard_normal, RngStream};
pub use tensor::{softmax_row, Tensor};
