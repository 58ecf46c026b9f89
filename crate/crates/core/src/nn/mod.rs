//! Minimal differentiable kernel set, parameters, optimizer and
//! checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;
pub mod train;
mod tensor;

pub use graph::{Graph, Var};
pub use layers::{AttentionConfig, GegluFfn, GeluFfn, LayerNorm, Linear, Mode, MultiHeadAttention};
pub use optim::{AdamW, AdamWConfig};
pub use params::{glob_match, Init, ParamId, ParamKind, ParamStore, Parameter};
pub use tensor::Tensor;
pub use train::{LogEntry, TrainConfig};
