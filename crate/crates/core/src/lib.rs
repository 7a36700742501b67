//! Scene text spotter built around start-point localization and
//! grid-sampled autoregressive decoding, with a synthetic data generator,
//! a point-based evaluator and a desk-scale training loop.
//!
//! All numeric code is generic over the scalar type ([`scalar::Scalar`]):
//! training normally runs at `f32`, the verification suites at `f64`.

pub mod encoder;
pub mod error;
pub mod geom;
pub mod nn;
pub mod maam;
pub mod scalar;
pub mod splm;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default training scalar.
pub type Real = f32;
