//! Low-bit linear layers, quantization noise analysis, StableAdamW and spike diagnostics
//! for small-scale transformer training on the CPU.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fp8;
pub mod linear;
pub mod noise;
pub mod numerics;
pub mod optim;
pub mod quantize;
pub mod stability;

pub use error::{Error, Result};
pub use fp8::{fp8_cast, fp8_value_set, Fp8Codebook, Fp8Format};
pub use linear::{linear_backward, linear_forward, LinearContext, LinearFormat, LinearMode, Variant};
pub use numerics::{matmul, Matrix, Rng, Seed};
pub use optim::{LossScaler, OptimizerHyperparams, StableAdamW};
pub use quantize::{dequantize, quantize, Axis, NumberFormat, QuantizedMatrix};
pub use stability::{SpikeReport, SpikeThresholds, TrainTrace};
