//! Differentiable numeric core: dense tensors, a reverse-mode tape, Adam,
//! seeded randomness and a finite-difference gradient checker.

pub mod gradcheck;
pub mod graph;
pub mod param;
pub mod rng;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, GradFailure};
pub use graph::{sigmoid, Graph, Var};
pub use param::{AdamConfig, Param, ParamId, ParamStore};
pub use rng::Rng;
pub use tensor::{argmax, euclidean_dist, leaky_relu, softmax_rows, Tensor};
