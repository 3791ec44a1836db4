//! Dense tensors with tape-based reverse-mode differentiation, covering
//! exactly the operations the fusion model and PPO need.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
mod params;
mod real;
mod tape;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, Moments};
pub use params::{init_tensor, Init, LayerNormParams, Linear, Mlp, ParamId, ParamStore, LAYERNORM_EPS};
pub use real::{Precision, Real};
pub use tape::{Binary, CustomBackward, Gradients, Tape, Unary, Var};
pub use tensor::{numel, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("shapes {0:?} and {1:?} are not broadcastable")]
    Broadcast(Vec<usize>, Vec<usize>),
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
