//! Quantization-aware, saliency-guided training of small CNN classifiers.
//!
//! The crate carries its own tensor type and define-by-run autodiff tape,
//! PACT activations with k-bit fake quantization, gradient saliency and
//! input masking, the hybrid-loss training loop, clinical metrics, packed
//! checkpoints and the dataset pipeline.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod quant;
pub mod rng;
pub mod saliency;
pub mod tape;
pub mod tensor;
pub mod train;

pub use data::{Dataset, Sample, Split};
pub use error::{Error, Result};
pub use nn::{ActivationKind, Architecture, InputShape, Model};
pub use quant::{Bits, QuantSpec};
pub use saliency::{SaliencyMap, SaliencyTarget};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use train::{Checkpoint, Metrics, Mode, TrainConfig};
