//! Dense tensors, a reverse-mode tape, and the AdamW optimizer.

pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Conv2dGeometry, Gradients, Graph, Var, KL_Q_FLOOR};
pub use optim::{AdamWConfig, MissingGrad, OptimizerState};
pub use params::{ParamId, ParamStore};
pub use tensor::{argmax, Scalar, Tensor};
