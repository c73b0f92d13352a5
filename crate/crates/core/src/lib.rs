//! Coordinate-descent quantization of linear-layer weights.
//!
//! Weights are quantized one output channel at a time to minimize the
//! calibration-weighted error `(w − ŵ)ᵀH(w − ŵ)`, with `H = XᵀX + λI`.

pub mod bench;
pub mod calibration;
pub mod descent;
pub mod error;
pub mod group;
pub mod layer;
pub mod oracle;
pub mod pipeline;
pub mod quant;
pub mod rng;
pub mod tensorio;

pub use calibration::{CalibrationMatrix, Hessian, SynthSpec};
pub use descent::{DescentConfig, DescentTrace, StepRecord};
pub use error::{Error, Result};
pub use group::GroupScheme;
pub use layer::QuantizedLayer;
pub use pipeline::{Method, PipelineConfig};
pub use quant::{Bits, ChannelProblem, CodeVector, QuantParams};
pub use nalgebra;
