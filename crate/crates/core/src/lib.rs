//! Multimodal biodiversity and weather forecasting: data pipeline, Perceiver
//! encoder/decoder around a 3D Swin U-Net backbone, training and evaluation.

pub mod batch_builder;
pub mod data_model;
pub mod decoder_heads;
pub mod encodings;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod perceiver;
pub mod seed;
pub mod swin;
pub mod training;

pub use error::{CoreError, Result};
