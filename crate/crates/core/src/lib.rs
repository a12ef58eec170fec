//! Deep joint source-channel coding for massive-MIMO CSI feedback.
//!
//! The crate covers the whole loop: synthetic FDD channel generation,
//! angular-delay transforms, the differentiable fading feedback link with
//! maximum-ratio combining, SNR-adaptive encoder/decoder networks, quantized
//! separate-coding baselines, training, and NMSE sweeps.

pub mod complex;
pub mod data_gen;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod model;
pub mod nn;
pub mod phy;
pub mod pipelines;
pub mod quant;
pub mod rng;
pub mod training;
pub mod transforms;

pub use complex::ComplexMatrix;
pub use error::{Error, Result};
