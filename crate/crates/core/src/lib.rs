//! Joint prediction of a parametric body mesh and a per-vertex pressure map
//! from overhead depth and pressure-mat images.

pub mod body_model;
pub mod error;
pub mod fim;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pmt;
pub mod projection;
pub mod synth;

pub use error::{Error, Result};
