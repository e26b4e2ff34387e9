//! Quantization-aware training with noise injection and learned activation
//! clamps, and a dyadic integer-only inference path.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod int_infer;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod qat;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{Arch, Model, Task};
pub use qat::{LayerMode, TrainConfig};
pub use quant::{ClampParams, QuantSpec};
pub use tensor::Tensor;
