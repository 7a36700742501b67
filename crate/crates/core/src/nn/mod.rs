//! Minimal reverse-mode autodiff stack: tensors, layers, optimizer,
//! checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use layers::{BatchNorm2d, Conv2d, Embedding, LayerNorm, Linear, Module, Param, ParamSet, Session};
pub use ops::{bce_with_logits, conv2d, cross_entropy_logits, grid_sample, smooth_l1};
pub use optim::AdamW;
pub use tensor::Tensor;
