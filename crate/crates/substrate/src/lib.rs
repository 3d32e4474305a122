//! Numeric substrate: tensors, a reverse-mode graph, transformer layers,
//! AdamW with warmup/cosine scheduling, and a flat checkpoint format.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{AttentionSpec, FrozenValues, Gradients, Graph, Var};
pub use nn::{KvCache, LayerNorm, Linear, SeqLayout, TransformerConfig, TransformerStack};
pub use optim::{AdamW, Param, ParamId, ParamStore};
pub use scalar::Scalar;
pub use schedule::lr_schedule;
pub use tensor::Tensor;
