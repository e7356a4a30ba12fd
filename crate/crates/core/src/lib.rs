//! Key-curve evaluation and affine + thin-plate-spline registration of
//! dual-channel PET-CT volumes.

pub mod error;
pub mod features;
pub mod keycurve;
pub mod optim;
pub mod register;
pub mod synth;
pub mod volume;
pub mod warp;

pub use error::{Error, Result};
