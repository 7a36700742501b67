//! Scalar abstraction so the whole stack runs at either f32 or f64.
//!
//! Training normally runs at f32; the gradient-check and determinism tests
//! run the same code at f64.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::LinalgScalar;
use num_traits::{Float, NumAssignOps};

/// Floating-point scalar usable everywhere in the crate: tensors, geometry,
/// losses and serialization.
pub trait Scalar:
    Float + NumAssignOps + LinalgScalar + Sum + Display + Debug + Send + Sync + 'static
{
    /// Dtype tag written into checkpoint headers.
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self {
        Self::from(v).expect("f64 conversion")
    }

    fn to_f64(self) -> f64;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }

    fn to_le_bytes(self, out: &mut Vec<u8>);

    fn from_le_slice(bytes: &[u8]) -> Self;

    /// Byte width of one element in checkpoint files.
    const BYTE_WIDTH: usize;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTE_WIDTH: usize = 4;

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn to_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTE_WIDTH: usize = 8;

    fn to_f64(self) -> f64 {
        self
    }

    fn to_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}
