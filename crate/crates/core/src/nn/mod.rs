//! Layers, the sequential CNN model, and the raw tensor ops behind them.

pub mod functional;
pub mod model;

pub use functional::{
    conv2d, cross_entropy, dense, kl_divergence, kl_from_logits, matmul, maxpool2d, softmax,
};
pub use model::{
    argmax, ActivationKind, Architecture, BoundModel, InputShape, Layer, LayerSpec, Model,
    CONV_KERNEL, CONV_PADDING, POOL_WINDOW,
};
