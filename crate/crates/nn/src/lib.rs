//! Small CPU neural-network toolkit: NCHW tensors, a reverse-mode tape,
//! convolution layers and Adam.
//!
//! Everything is single-threaded and deterministic: the same inputs,
//! parameters and call sequence produce bit-identical results.

mod graph;
mod kernels;
mod layers;
mod optim;
mod params;
mod tensor;

pub use graph::{sigmoid, Graph, Var, BCE_EPS};
pub use layers::Conv2d;
pub use optim::Adam;
pub use params::{CheckpointError, ParamStore};
pub use tensor::Tensor;
