//! Masked and permuted language-model pre-training at desk scale.
//!
//! A two-stream transformer built on a small reverse-mode autodiff engine,
//! with the objective family MPNet, PLM, MLM and MLM with output dependency.

pub mod analysis;
pub mod cli;
pub mod checkpoint;
pub mod masks;
pub mod model;
pub mod objectives;
pub mod permute;
pub mod synthetic;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;
