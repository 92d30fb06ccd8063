//! Reverse-mode automatic differentiation, optimizer, and gradient oracle.

mod graph;
mod gradcheck;
mod optim;
mod params;
mod tensor;

pub use graph::{AttentionLayout, Graph, Mode, Var};
pub use gradcheck::{fd_resolution, grad_check_fd, relative_error, GradCheckReport};
pub use optim::{AdamConfig, OptimizerState};
pub use params::ParamStore;
pub use tensor::{Scalar, Tensor};

pub(crate) use graph::sigmoid;
pub(crate) use params::hex;

#[cfg(test)]
mod tests;
