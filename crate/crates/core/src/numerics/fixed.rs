//! Q15.16 signed fixed point, the storage format of every fault-injectable
//! parameter.

use std::fmt;

use crate::error::{Error, Result};

/// Number of fractional bits.
pub const FRACTION_BITS: u32 = 16;

const SCALE: f64 = (1u64 << FRACTION_BITS) as f64;

/// A 32-bit word read as two's complement with 16 fractional bits:
/// `value = raw / 2^16`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct FixedPoint32(u32);

impl FixedPoint32 {
    pub const ZERO: FixedPoint32 = FixedPoint32(0);
    pub const ONE: FixedPoint32 = FixedPoint32(1 << FRACTION_BITS);
    pub const MAX: FixedPoint32 = FixedPoint32(i32::MAX as u32);
    pub const MIN: FixedPoint32 = FixedPoint32(i32::MIN as u32);
    /// Smallest positive value, 2^-16.
    pub const EPSILON: FixedPoint32 = FixedPoint32(1);

    pub const fn from_bits(raw: u32) -> Self {
        FixedPoint32(raw)
    }

    pub const fn to_bits(self) -> u32 {
        self.0
    }

    /// Rounds to the nearest representable value, saturating at both ends of
    /// the range.
    pub fn encode(v: f64) -> Result<Self> {
        if !v.is_finite() {
            return Err(Error::InvalidNumeric(v));
        }
        // Multiplying by a power of two is exact, so a single rounding happens.
        let scaled = (v * SCALE).round();
        let raw = if scaled >= i32::MAX as f64 {
            i32::MAX
        } else if scaled <= i32::MIN as f64 {
            i32::MIN
        } else {
            scaled as i32
        };
        Ok(FixedPoint32(raw as u32))
    }

    /// Like [`encode`](Self::encode) but never returns a value below
    /// [`EPSILON`](Self::EPSILON). Used for activation bounds, which must stay
    /// strictly positive after quantization.
    pub fn encode_positive(v: f64) -> Result<Self> {
        let f = Self::encode(v)?;
        Ok(if (f.0 as i32) < 1 { Self::EPSILON } else { f })
    }

    #[inline]
    pub fn decode(self) -> f64 {
        (self.0 as i32) as f64 / SCALE
    }

    /// XOR a single bit.
    pub fn flip_bit(self, bit_position: u32) -> Result<Self> {
        if bit_position >= 32 {
            return Err(Error::BitPosition(bit_position));
        }
        Ok(FixedPoint32(self.0 ^ (1u32 << bit_position)))
    }
}

impl fmt::Debug for FixedPoint32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FixedPoint32({:#010x} = {})", self.0, self.decode())
    }
}

impl fmt::Display for FixedPoint32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.decode())
    }
}

pub fn encode_fixed(v: f64) -> Result<FixedPoint32> {
    FixedPoint32::encode(v)
}

pub fn decode_fixed(f: FixedPoint32) -> f64 {
    f.decode()
}

pub fn flip_bit(f: FixedPoint32, bit_position: u32) -> Result<FixedPoint32> {
    f.flip_bit(bit_position)
}

/// Encodes a slice, failing on the first non-finite value.
pub fn encode_all(values: &[f64]) -> Result<Vec<FixedPoint32>> {
    values.iter().map(|&v| FixedPoint32::encode(v)).collect()
}

pub fn decode_all(words: &[FixedPoint32]) -> Vec<f64> {
    words.iter().map(|w| w.decode()).collect()
}
