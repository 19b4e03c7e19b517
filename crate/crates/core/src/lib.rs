//! Modality-aware mixture-of-experts classifier for multimodal tabular data.

pub mod autodiff;
pub mod checkpoint;
pub mod commands;
pub mod data;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pooling;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{Error, Result, TensorError};
pub use model::{build_model, Model, ModelConfig, Variant};
pub use tensor::Tensor;
