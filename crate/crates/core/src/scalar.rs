//! Scalar abstraction over the element types the engine runs on.
//!
//! Training runs in `f32`; gradient checking against central finite
//! differences needs `f64`. Everything numeric in this crate is generic
//! over [`Scalar`] so both precisions share one code path.

use std::fmt::{Debug, Display};

pub trait Scalar:
    num_traits::Float + num_traits::NumAssignOps + Debug + Display + Default + Send + Sync + 'static
{
    const DTYPE: Dtype;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    fn from_f32(x: f32) -> Self;
    fn to_f32(self) -> f32;

    /// Appends the little-endian byte representation to `out`.
    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one value from the start of `bytes` (must hold `DTYPE.width()` bytes).
    fn read_le(bytes: &[u8]) -> Self;
}

/// Element type tag used by the binary tensor containers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn from_f32(x: f32) -> Self {
        x
    }
    #[inline(always)]
    fn to_f32(self) -> f32 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn from_f32(x: f32) -> Self {
        x as f64
    }
    #[inline(always)]
    fn to_f32(self) -> f32 {
        self as f32
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}
