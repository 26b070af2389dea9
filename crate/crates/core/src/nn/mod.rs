//! Dense numerical substrate: tensors, reverse-mode graph, layers, optimizer
//! and checkpoint container.

pub mod checkpoint;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use graph::{Gradients, Graph, Var};
pub use layers::{affine_forward, attention_forward, GruCell, LayerNorm, Linear, Mlp};
pub use optim::{AdamW, StepSchedule};
pub use params::{ParamId, ParameterStore};
pub use tensor::Tensor;
