//! Minimal reverse-mode differentiation engine: tensors, layer kernels,
//! computation graphs, Glorot initialization and Adam.

pub mod gradcheck;
mod graph;
mod init;
pub mod ops;
mod optim;
mod real;
mod tensor;

pub use graph::{
    Graph, GraphBuilder, GraphNode, Loss, Mode, NodeId, OpKind, Param, ParamId, ParamRole, BN_EPSILON, BN_MOMENTUM,
};
pub use init::{glorot_bound, glorot_init};
pub use optim::{AdamConfig, AdamState, Moments};
pub use real::Real;
pub use tensor::Tensor;
