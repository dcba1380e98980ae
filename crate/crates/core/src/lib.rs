//! Defect classification for layer imagery: tensors and autodiff, datasets,
//! minority-class augmentation, models, training and evaluation.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod kv;
pub mod modelzoo;
pub mod pipeline;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{CheckpointError, Error, Result};
