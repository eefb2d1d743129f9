//! Minimal differentiable-compute kernel: dense tensors, a recorded
//! forward graph with reverse-mode gradients, Adam, and affine weight
//! constraints enforced by projection.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod tensor;

pub use graph::{Graph, NodeId, Padding};
pub use optim::{apply_constraints, Adam, Constraint, Parameter};
pub use tensor::Tensor;
