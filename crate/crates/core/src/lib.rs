//! Plug-and-play image reconstruction with a learned CNN denoiser prior,
//! implicit (deep-equilibrium) differentiation of its fixed point, and
//! self-supervised test-time adaptation of the prior on a single measurement.

// `!(v > 0.0)` style checks deliberately reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conv;
pub mod denoiser;
pub mod deq;
pub mod error;
pub mod experiment;
pub mod fft;
pub mod fixed_point;
pub mod forward_model;
pub mod image;
pub mod metrics;
pub mod synthetic;
pub mod training;
pub mod ttt;

pub use error::{Error, Result};
pub use image::{ComplexImage, FeatureMap, RealImage};
