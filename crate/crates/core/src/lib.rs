//! Spatiotemporal feature pyramid attention, a compact CTC lipreading model
//! and the kernels and checks underneath them.

pub mod ctc;
pub mod error;
pub mod fpa;
pub mod kernels;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Fill, Real, Shape5, Tensor5};
