//! Software binary16 with explicit down-conversion policies, plus the
//! round-half-to-even primitive shared by every quantizer.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Round to the nearest integer, ties to even.
pub fn round_half_even(x: f64) -> Result<i64> {
    if !x.is_finite() {
        return Err(Error::NonFinite(x));
    }
    Ok(x.round_ties_even() as i64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverflowPolicy {
    /// Clamp to the largest finite magnitude (65504).
    Saturate,
    /// IEEE 754 default: overflow produces ±Inf.
    IeeeInf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubnormalPolicy {
    FlushToZero,
    Keep,
    SaturateToMinNormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NanPolicy {
    Propagate,
    Fail,
}

/// How a wide value is narrowed to binary16.
///
/// The policy is applied after round-to-nearest-even: a result is
/// "subnormal" when IEEE rounding produces a non-zero subnormal, and
/// "overflowed" when it produces ±Inf from a finite input (or the input is
/// itself infinite).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HalfPolicy {
    pub overflow: OverflowPolicy,
    pub subnormal: SubnormalPolicy,
    pub nan: NanPolicy,
}

impl HalfPolicy {
    /// Plain IEEE 754 round-to-nearest-even semantics.
    pub const IEEE: HalfPolicy = HalfPolicy {
        overflow: OverflowPolicy::IeeeInf,
        subnormal: SubnormalPolicy::Keep,
        nan: NanPolicy::Propagate,
    };

    pub const DEFAULT: HalfPolicy = HalfPolicy {
        overflow: OverflowPolicy::Saturate,
        subnormal: SubnormalPolicy::SaturateToMinNormal,
        nan: NanPolicy::Propagate,
    };
}

impl Default for HalfPolicy {
    fn default() -> Self {
        HalfPolicy::DEFAULT
    }
}

/// A binary16 bit pattern: 1 sign, 5 exponent, 10 mantissa bits.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Half(u16);

const SIGN: u16 = 0x8000;
const EXP_MASK: u16 = 0x7C00;
const MAN_MASK: u16 = 0x03FF;

impl Half {
    pub const ZERO: Half = Half(0);
    pub const ONE: Half = Half(0x3C00);
    pub const INFINITY: Half = Half(0x7C00);
    pub const NEG_INFINITY: Half = Half(0xFC00);
    /// The canonical quiet NaN produced on propagation.
    pub const NAN: Half = Half(0x7E00);
    /// 65504.
    pub const MAX: Half = Half(0x7BFF);
    /// 2^-14.
    pub const MIN_POSITIVE: Half = Half(0x0400);

    pub const fn from_bits(bits: u16) -> Half {
        Half(bits)
    }

    pub const fn to_bits(self) -> u16 {
        self.0
    }

    pub fn is_nan(self) -> bool {
        self.0 & EXP_MASK == EXP_MASK && self.0 & MAN_MASK != 0
    }

    pub fn is_infinite(self) -> bool {
        self.0 & !SIGN == EXP_MASK
    }

    pub fn is_finite(self) -> bool {
        self.0 & EXP_MASK != EXP_MASK
    }

    pub fn is_subnormal(self) -> bool {
        self.0 & EXP_MASK == 0 && self.0 & MAN_MASK != 0
    }

    /// Convert under an explicit policy.
    pub fn convert(x: f64, policy: HalfPolicy) -> Result<Half> {
        to_half(x, policy)
    }

    /// Convert an f32 under the default policy. Never fails because the
    /// default NaN policy propagates.
    pub fn from_f32(x: f32) -> Half {
        narrow(x as f64, HalfPolicy::DEFAULT).unwrap_or(Half::NAN)
    }

    /// Convert under a policy whose NaN handling is `Propagate`.
    pub fn from_f32_with(x: f32, policy: HalfPolicy) -> Half {
        narrow(x as f64, policy).unwrap_or(Half::NAN)
    }

    /// Single rounding from f64; NaN maps to the canonical NaN.
    pub fn from_f64_with(x: f64, policy: HalfPolicy) -> Half {
        narrow(x, policy).unwrap_or(Half::NAN)
    }

    pub fn to_f32(self) -> f32 {
        from_half(self)
    }

    pub fn to_f64(self) -> f64 {
        from_half(self) as f64
    }

    /// The next representable value toward +Inf (finite inputs only).
    pub fn next_up(self) -> Half {
        if self.is_nan() || self.0 == 0x7C00 {
            return self;
        }
        if self.0 == SIGN {
            return Half(1);
        }
        if self.0 & SIGN == 0 {
            Half(self.0 + 1)
        } else {
            Half(self.0 - 1)
        }
    }

    /// The next representable value toward -Inf (finite inputs only).
    pub fn next_down(self) -> Half {
        if self.is_nan() || self.0 == 0xFC00 {
            return self;
        }
        if self.0 == 0 {
            return Half(SIGN | 1);
        }
        if self.0 & SIGN == 0 {
            Half(self.0 - 1)
        } else {
            Half(self.0 + 1)
        }
    }

    /// Largest half that is `<= x` (IEEE range, subnormals kept).
    pub fn round_down(x: f32) -> Half {
        let h = Half::from_f32_with(x, HalfPolicy::IEEE);
        if h.to_f32() > x {
            h.next_down()
        } else {
            h
        }
    }

    /// Smallest half that is `>= x` (IEEE range, subnormals kept).
    pub fn round_up(x: f32) -> Half {
        let h = Half::from_f32_with(x, HalfPolicy::IEEE);
        if h.to_f32() < x {
            h.next_up()
        } else {
            h
        }
    }
}

impl fmt::Debug for Half {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Half({:#06x} = {})", self.0, self.to_f32())
    }
}

impl fmt::Display for Half {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.to_f32(), f)
    }
}

/// Narrow an f32 or f64 value to binary16: round-to-nearest-even, then apply
/// `policy`.
pub fn to_half(x: f64, policy: HalfPolicy) -> Result<Half> {
    narrow(x, policy).ok_or(Error::NanRejected)
}

fn narrow(x: f64, policy: HalfPolicy) -> Option<Half> {
    if x.is_nan() {
        return match policy.nan {
            NanPolicy::Propagate => Some(Half::NAN),
            NanPolicy::Fail => None,
        };
    }
    let sign = if x.is_sign_negative() { SIGN } else { 0 };
    let mag = if x.is_infinite() {
        EXP_MASK
    } else {
        round_magnitude(x.abs())
    };
    let mag = if mag == EXP_MASK {
        match policy.overflow {
            OverflowPolicy::Saturate => Half::MAX.0,
            OverflowPolicy::IeeeInf => EXP_MASK,
        }
    } else if mag != 0 && mag < Half::MIN_POSITIVE.0 {
        match policy.subnormal {
            SubnormalPolicy::FlushToZero => 0,
            SubnormalPolicy::Keep => mag,
            SubnormalPolicy::SaturateToMinNormal => Half::MIN_POSITIVE.0,
        }
    } else {
        mag
    };
    Some(Half(sign | mag))
}

fn pow2(k: i32) -> f64 {
    f64::from_bits(((k + 1023) as u64) << 52)
}

/// IEEE round-to-nearest-even of a finite non-negative value into binary16
/// magnitude bits; `0x7C00` signals overflow.
fn round_magnitude(a: f64) -> u16 {
    if a == 0.0 {
        return 0;
    }
    let exp = ((a.to_bits() >> 52) & 0x7FF) as i32 - 1023;
    if exp < -14 {
        // Subnormal grid has spacing 2^-24; scaling by a power of two is exact.
        let m = (a * pow2(24)).round_ties_even() as u32;
        return m as u16; // m == 1024 is exactly the smallest normal
    }
    let mut e = exp;
    let mut m = (a * pow2(10 - e)).round_ties_even() as u32;
    if m == 2048 {
        e += 1;
        m = 1024;
    }
    if e > 15 {
        return EXP_MASK;
    }
    (((e + 15) as u16) << 10) | (m as u16 - 1024)
}

/// Exact widening of binary16 to f32.
pub fn from_half(h: Half) -> f32 {
    let bits = h.0;
    let sign = if bits & SIGN != 0 { -1.0f32 } else { 1.0 };
    let exp = ((bits & EXP_MASK) >> 10) as i32;
    let man = (bits & MAN_MASK) as u32;
    match exp {
        0 => sign * (man as f32) * f32::from_bits(103 << 23), // 2^-24
        31 if man == 0 => sign * f32::INFINITY,
        31 => f32::NAN,
        _ => sign * ((1024 + man) as f32) * f32::from_bits(((exp - 25 + 127) as u32) << 23),
    }
}
