use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar the tensor engine and every model component are generic over.
///
/// `to_bits_hex` / `from_bits_hex` give a lossless text encoding used by the
/// checkpoint and model serialization formats.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Send
    + Sync
    + 'static
{
    /// Width of the IEEE representation in bits.
    const BITS: u32;

    fn to_bits_hex(self) -> String;
    fn from_bits_hex(s: &str) -> Option<Self>;

    /// Conversion from an `f64` literal. Never fails for finite inputs.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f64 {
    const BITS: u32 = 64;

    fn to_bits_hex(self) -> String {
        format!("{:016x}", self.to_bits())
    }

    fn from_bits_hex(s: &str) -> Option<Self> {
        if s.len() != 16 {
            return None;
        }
        u64::from_str_radix(s, 16).ok().map(f64::from_bits)
    }
}

impl Scalar for f32 {
    const BITS: u32 = 32;

    fn to_bits_hex(self) -> String {
        format!("{:08x}", self.to_bits())
    }

    fn from_bits_hex(s: &str) -> Option<Self> {
        if s.len() != 8 {
            return None;
        }
        u32::from_str_radix(s, 16).ok().map(f32::from_bits)
    }
}
