pub mod checkpoint;
pub mod contrastive;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod metrics;
pub mod model;
pub mod multiscale;
pub mod nn;
pub mod rsmi;
pub mod scalar;
pub mod tensor;

pub use graph::{BinaryOp, Gradients, Graph, Reduce, Var};
pub use scalar::Scalar;
pub use tensor::{Tensor, TensorError};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
