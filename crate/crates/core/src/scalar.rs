use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point element type used by every tensor, model and loss in the crate.
///
/// Implemented for `f32` (training and inference) and `f64` (gradient checks).
pub trait Scalar:
    'static
    + Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Default
    + Sum
    + Debug
    + Display
    + LowerExp
    + Send
    + Sync
{
    /// Storage dtype used when the value is written to a tensor archive.
    const DTYPE: safetensors::Dtype;

    fn to_le_bytes_vec(values: &[Self]) -> Vec<u8>;

    fn from_le_chunk(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: safetensors::Dtype = safetensors::Dtype::F32;

    fn to_le_bytes_vec(values: &[Self]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn from_le_chunk(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte chunk"))
    }
}

impl Scalar for f64 {
    const DTYPE: safetensors::Dtype = safetensors::Dtype::F64;

    fn to_le_bytes_vec(values: &[Self]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn from_le_chunk(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte chunk"))
    }
}

/// Converts an `f64` constant into the working scalar type.
#[inline]
pub fn lit<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("representable constant")
}

#[inline]
pub fn to_f64<T: Scalar>(v: T) -> f64 {
    v.to_f64().expect("finite conversion")
}
