//! Resilience analysis and selective hardening of int8 quantized networks.
//!
//! * [`qnn`] is the integer inference engine with neuron taps.
//! * [`io`] trains, quantizes and serializes fixtures.
//! * [`analysis`] computes per-neuron vulnerability factors (NVF).
//! * [`transform`] splits or triplicates critical neurons.
//! * [`faultsim`] runs inference under single bit flips with correction.
//! * [`campaign`] drives statistical fault-injection sweeps and reports.

pub mod analysis;
pub mod campaign;
pub mod cli;
pub mod error;
pub mod faultsim;
pub mod io;
pub mod qnn;
pub mod scalar;
pub mod transform;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Float reference model in single precision.
pub type FloatModelF32 = io::FloatModel<f32>;
/// Float reference model in double precision.
pub type FloatModelF64 = io::FloatModel<f64>;
pub type FloatLayerF32 = io::FloatLayer<f32>;
pub type FloatLayerF64 = io::FloatLayer<f64>;
/// Loss gate result of the single-precision float shadow.
pub type GateResultF32 = qnn::GateResult<f32>;
pub type GateResultF64 = qnn::GateResult<f64>;
