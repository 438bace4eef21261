//! Post-training low-precision toolkit for recommendation-style models.

pub mod autoquant;
pub mod calib;
pub mod dataset;
pub mod datagen;
pub mod debugger;
pub mod embedding;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod monitor;
pub mod numerics;
pub mod par;
pub mod perfmodel;
pub mod quant;
pub mod rng;
pub mod tensor;

pub use error::{Error, ErrorClass, Result};
pub use par::Exec;
