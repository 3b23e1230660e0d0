//! Cascaded detection of dendrite cores in microscopy images.
//!
//! The cascade runs a heatmap detector over the input ([`pipeline`]), erases the
//! structure around every confident detection, runs a second detector at a lower
//! threshold over what remains, and filters those hard-sample candidates with a
//! patch classifier ([`hsr`]). [`synth`] generates annotated training data and
//! [`eval`] scores point predictions against ground truth.
//!
//! The numeric core in [`nn`] is generic over the element type; the aliases
//! below fix it to `f64`, which the rest of the crate uses.

pub mod cpdn;
pub mod error;
pub mod eval;
pub mod geom;
pub mod hsr;
pub mod image_io;
pub mod nn;
pub mod pipeline;
pub mod synth;

pub use error::{CheckpointError, Error, Result};

pub type Tensor = nn::Tensor<f64>;
pub type Tape = nn::Tape<f64>;
pub type ParamStore = nn::ParamStore<f64>;
pub type OptimizerState = nn::OptimizerState<f64>;

pub type Tensor32 = nn::Tensor<f32>;
pub type Tape32 = nn::Tape<f32>;
pub type ParamStore32 = nn::ParamStore<f32>;
