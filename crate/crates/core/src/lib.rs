//! Simulation and verification lab for superprocesses with dependent
//! spatial motion.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acceptance;
pub mod branching;
pub mod dual;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod moments;
pub mod motion;
pub mod particles;
pub mod quad;
pub mod real;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
pub use kernels::{CoefficientFn, LevyKernel, Mode, ModelConfig, ModelSpec};
pub use real::Real;

pub type ModelSpec64 = ModelSpec<f64>;
pub type ModelSpec32 = ModelSpec<f32>;
pub type ModelConfig64 = ModelConfig<f64>;
pub type ModelConfig32 = ModelConfig<f32>;
