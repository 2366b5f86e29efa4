//! Training, evaluation and data tooling for collaborative multi-teacher
//! distillation of low bit-width networks.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod generate;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
