//! Bit-exact emulation of narrow IEEE 754 binary formats.
//!
//! Every value is a dyadic rational `m * 2^e`, so the exact sum of two
//! operands fits an `i128` once the exponent gap is bounded. Rounding is
//! round-to-nearest, ties-to-even, with gradual underflow and overflow to
//! infinity. Nothing here touches the host FPU's narrow types.

use core::fmt;
use core::str::FromStr;

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{Signed, Zero};

use crate::rational::Rational;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FloatFormat {
    /// 1 sign, 5 exponent, 10 fraction bits.
    Fp16,
    /// 1 sign, 8 exponent, 7 fraction bits.
    Bf16,
    /// 1 sign, 8 exponent, 23 fraction bits.
    Fp32,
}

impl FloatFormat {
    pub const ALL: [FloatFormat; 3] = [FloatFormat::Fp16, FloatFormat::Bf16, FloatFormat::Fp32];

    pub const fn exponent_bits(self) -> u32 {
        match self {
            FloatFormat::Fp16 => 5,
            FloatFormat::Bf16 | FloatFormat::Fp32 => 8,
        }
    }

    pub const fn fraction_bits(self) -> u32 {
        match self {
            FloatFormat::Fp16 => 10,
            FloatFormat::Bf16 => 7,
            FloatFormat::Fp32 => 23,
        }
    }

    /// Significand width including the hidden bit.
    pub const fn precision(self) -> u32 {
        self.fraction_bits() + 1
    }

    pub const fn total_bits(self) -> u32 {
        1 + self.exponent_bits() + self.fraction_bits()
    }

    pub const fn bias(self) -> i32 {
        (1 << (self.exponent_bits() - 1)) - 1
    }

    /// Exponent of the least significant bit of the smallest subnormal.
    pub const fn min_lsb_exponent(self) -> i32 {
        1 - self.bias() - self.fraction_bits() as i32
    }

    const fn exponent_field_max(self) -> u32 {
        (1 << self.exponent_bits()) - 1
    }

    pub const fn name(self) -> &'static str {
        match self {
            FloatFormat::Fp16 => "fp16",
            FloatFormat::Bf16 => "bf16",
            FloatFormat::Fp32 => "fp32",
        }
    }
}

impl fmt::Display for FloatFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown float format {0:?} (expected fp16, bf16 or fp32)")]
pub struct UnknownFormat(pub alloc::string::String);

impl FromStr for FloatFormat {
    type Err = UnknownFormat;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fp16" | "f16" | "half" => Ok(FloatFormat::Fp16),
            "bf16" | "bfloat16" => Ok(FloatFormat::Bf16),
            "fp32" | "f32" | "single" => Ok(FloatFormat::Fp32),
            _ => Err(UnknownFormat(s.into())),
        }
    }
}

/// A value of `format`, stored as its raw encoding in the low bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FloatValue {
    format: FloatFormat,
    bits: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Decoded {
    /// `(-1)^negative * mantissa * 2^exp`; a zero has `mantissa == 0`.
    Finite { negative: bool, mantissa: u64, exp: i32 },
    Infinite { negative: bool },
    NaN,
}

impl FloatValue {
    pub fn from_bits(format: FloatFormat, bits: u32) -> Self {
        let mask = if format.total_bits() == 32 { u32::MAX } else { (1u32 << format.total_bits()) - 1 };
        FloatValue { format, bits: bits & mask }
    }

    pub fn bits(self) -> u32 {
        self.bits
    }

    pub fn format(self) -> FloatFormat {
        self.format
    }

    pub fn zero(format: FloatFormat) -> Self {
        FloatValue { format, bits: 0 }
    }

    pub fn nan(format: FloatFormat) -> Self {
        let f = format.fraction_bits();
        let bits = (format.exponent_field_max() << f) | (1 << (f - 1));
        FloatValue { format, bits }
    }

    fn infinity(format: FloatFormat, negative: bool) -> Self {
        let bits = (format.exponent_field_max() << format.fraction_bits()) | sign_bit(format, negative);
        FloatValue { format, bits }
    }

    fn signed_zero(format: FloatFormat, negative: bool) -> Self {
        FloatValue { format, bits: sign_bit(format, negative) }
    }

    pub fn is_nan(self) -> bool {
        matches!(self.decode(), Decoded::NaN)
    }

    pub fn is_finite(self) -> bool {
        matches!(self.decode(), Decoded::Finite { .. })
    }

    pub fn is_sign_negative(self) -> bool {
        self.bits & sign_bit(self.format, true) != 0
    }

    fn decode(self) -> Decoded {
        let fmt = self.format;
        let f = fmt.fraction_bits();
        let negative = self.is_sign_negative();
        let field = (self.bits >> f) & fmt.exponent_field_max();
        let frac = (self.bits & ((1 << f) - 1)) as u64;
        if field == fmt.exponent_field_max() {
            return if frac == 0 { Decoded::Infinite { negative } } else { Decoded::NaN };
        }
        if field == 0 {
            Decoded::Finite { negative, mantissa: frac, exp: fmt.min_lsb_exponent() }
        } else {
            Decoded::Finite {
                negative,
                mantissa: frac | (1 << f),
                exp: field as i32 - fmt.bias() - f as i32,
            }
        }
    }

    /// Exact value; `None` for infinities and NaN.
    pub fn to_rational(self) -> Option<Rational> {
        match self.decode() {
            Decoded::Finite { negative, mantissa, exp } => {
                let m = BigInt::from(mantissa);
                let m = if negative { -m } else { m };
                Some(scale_pow2(BigRational::from_integer(m), exp))
            }
            _ => None,
        }
    }

    /// Exact conversion; every supported format embeds in `f64`.
    pub fn to_f64(self) -> f64 {
        match self.decode() {
            Decoded::NaN => f64::NAN,
            Decoded::Infinite { negative: true } => f64::NEG_INFINITY,
            Decoded::Infinite { negative: false } => f64::INFINITY,
            Decoded::Finite { negative, mantissa, exp } => {
                let v = mantissa as f64 * pow2_f64(exp);
                if negative {
                    -v
                } else {
                    v
                }
            }
        }
    }

    /// Correctly rounded conversion from a double.
    pub fn from_f64(format: FloatFormat, x: f64) -> Self {
        if x.is_nan() {
            return FloatValue::nan(format);
        }
        if x.is_infinite() {
            return FloatValue::infinity(format, x < 0.0);
        }
        let bits = x.to_bits();
        let negative = bits >> 63 == 1;
        let field = ((bits >> 52) & 0x7ff) as i32;
        let frac = bits & ((1u64 << 52) - 1);
        let (mantissa, exp) = if field == 0 { (frac, -1074) } else { (frac | (1 << 52), field - 1075) };
        if mantissa == 0 {
            return FloatValue::signed_zero(format, negative);
        }
        round_dyadic(format, negative, mantissa as u128, exp)
    }
}

/// Correctly rounded conversion of an exact rational.
pub fn round_to(format: FloatFormat, value: &Rational) -> FloatValue {
    if value.is_zero() {
        return FloatValue::zero(format);
    }
    let negative = value.is_negative();
    let a = value.abs();
    let (n, d) = (a.numer().clone(), a.denom().clone());
    // floor(log2(a)), starting from the bit-length estimate.
    let mut e = n.bits() as i64 - d.bits() as i64;
    if !ge_pow2(&n, &d, e) {
        e -= 1;
    }
    let p = format.precision() as i64;
    let lsb = (e - (p - 1)).max(format.min_lsb_exponent() as i64);
    // a / 2^lsb = num / den
    let (num, den) = if lsb >= 0 { (n, d << lsb as usize) } else { (n << (-lsb) as usize, d) };
    let (q, r) = num.div_rem(&den);
    let twice = r << 1usize;
    let mut m: BigInt = q;
    if twice > den || (twice == den && m.is_odd()) {
        m += 1;
    }
    let m: u64 = u64::try_from(m).expect("rounded significand exceeds precision");
    encode(format, negative, m, lsb as i32)
}

fn ge_pow2(n: &BigInt, d: &BigInt, e: i64) -> bool {
    if e >= 0 {
        n >= &(d << e as usize)
    } else {
        &(n << (-e) as usize) >= d
    }
}

fn scale_pow2(q: Rational, exp: i32) -> Rational {
    let two = BigInt::from(2u32);
    if exp >= 0 {
        q * BigRational::from_integer(num_traits::pow(two, exp as usize))
    } else {
        q / BigRational::from_integer(num_traits::pow(two, (-exp) as usize))
    }
}

fn pow2_f64(exp: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&exp));
    f64::from_bits(((exp + 1023) as u64) << 52)
}

fn sign_bit(format: FloatFormat, negative: bool) -> u32 {
    if negative {
        1 << (format.total_bits() - 1)
    } else {
        0
    }
}

/// Rounds `mag * 2^exp` (with sign) into `format`. `mag` must be non-zero.
fn round_dyadic(format: FloatFormat, negative: bool, mag: u128, exp: i32) -> FloatValue {
    debug_assert!(mag != 0);
    let p = format.precision() as i32;
    let len = 128 - mag.leading_zeros() as i32;
    let lsb = (exp + len - p).max(format.min_lsb_exponent());
    let shift = lsb - exp;
    let m: u128 = if shift <= 0 {
        mag << (-shift) as u32
    } else if shift > 128 {
        0
    } else {
        let (q, rem, half) = if shift == 128 {
            (0u128, mag, 1u128 << 127)
        } else {
            (mag >> shift as u32, mag & ((1u128 << shift as u32) - 1), 1u128 << (shift - 1) as u32)
        };
        if rem > half || (rem == half && q & 1 == 1) {
            q + 1
        } else {
            q
        }
    };
    encode(format, negative, m as u64, lsb)
}

/// Packs a significand already rounded to at most `precision` bits (a carry
/// to exactly `2^precision` is renormalised here).
fn encode(format: FloatFormat, negative: bool, mut m: u64, mut lsb: i32) -> FloatValue {
    let p = format.precision();
    if m == 0 {
        return FloatValue::signed_zero(format, negative);
    }
    if m == 1 << p {
        m >>= 1;
        lsb += 1;
    }
    debug_assert!(m < 1 << p);
    if m < 1 << (p - 1) {
        debug_assert_eq!(lsb, format.min_lsb_exponent());
        return FloatValue { format, bits: sign_bit(format, negative) | m as u32 };
    }
    let field = lsb + (p as i32 - 1) + format.bias();
    if field >= format.exponent_field_max() as i32 {
        return FloatValue::infinity(format, negative);
    }
    let frac = (m - (1 << (p - 1))) as u32;
    FloatValue {
        format,
        bits: sign_bit(format, negative) | ((field as u32) << format.fraction_bits()) | frac,
    }
}

/// Largest exponent gap for which the aligned exact sum still fits an `i128`.
const MAX_ALIGN: i32 = 100;

/// `round(a + b)` in the operands' format.
pub fn add(a: FloatValue, b: FloatValue) -> FloatValue {
    assert_eq!(a.format, b.format, "mixed-format addition");
    let format = a.format;
    match (a.decode(), b.decode()) {
        (Decoded::NaN, _) | (_, Decoded::NaN) => FloatValue::nan(format),
        (Decoded::Infinite { negative: x }, Decoded::Infinite { negative: y }) => {
            if x == y {
                a
            } else {
                FloatValue::nan(format)
            }
        }
        (Decoded::Infinite { .. }, _) => a,
        (_, Decoded::Infinite { .. }) => b,
        (
            Decoded::Finite { negative: na, mantissa: ma, exp: ea },
            Decoded::Finite { negative: nb, mantissa: mb, exp: eb },
        ) => {
            if ma == 0 && mb == 0 {
                return FloatValue::signed_zero(format, na && nb);
            }
            if ma == 0 {
                return b;
            }
            if mb == 0 {
                return a;
            }
            let base = ea.min(eb);
            let (da, db) = (ea - base, eb - base);
            if da > MAX_ALIGN {
                return a;
            }
            if db > MAX_ALIGN {
                return b;
            }
            let va = (ma as i128) << da;
            let vb = (mb as i128) << db;
            let sum = if na { -va } else { va } + if nb { -vb } else { vb };
            if sum == 0 {
                return FloatValue::zero(format);
            }
            round_dyadic(format, sum < 0, sum.unsigned_abs(), base)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::{int, ratio};

    fn pow2(e: i32) -> Rational {
        scale_pow2(int(1), e)
    }

    #[test]
    fn layout_constants() {
        assert_eq!(FloatFormat::Fp16.bias(), 15);
        assert_eq!(FloatFormat::Bf16.bias(), 127);
        assert_eq!(FloatFormat::Fp16.min_lsb_exponent(), -24);
        assert_eq!(FloatFormat::Bf16.min_lsb_exponent(), -133);
        assert_eq!(FloatFormat::Fp32.min_lsb_exponent(), -149);
    }

    #[test]
    fn one_is_exact() {
        for f in FloatFormat::ALL {
            let one = round_to(f, &int(1));
            assert_eq!(one.to_rational().unwrap(), int(1));
            assert_eq!(one.to_f64(), 1.0);
        }
        assert_eq!(round_to(FloatFormat::Fp16, &int(1)).bits(), 0x3c00);
        assert_eq!(round_to(FloatFormat::Bf16, &int(1)).bits(), 0x3f80);
    }

    #[test]
    fn ties_round_to_even() {
        let fp16 = round_to(FloatFormat::Fp16, &(int(1) + pow2(-11)));
        assert_eq!(fp16.to_rational().unwrap(), int(1));
        let bf16 = round_to(FloatFormat::Bf16, &(int(1) + pow2(-8)));
        assert_eq!(bf16.to_rational().unwrap(), int(1));
        // 1 + 3*2^-11 is a tie between 1+2^-10 (odd) and 1+2^-9 (even).
        let up = round_to(FloatFormat::Fp16, &(int(1) + ratio(3, 2048)));
        assert_eq!(up.to_rational().unwrap(), int(1) + pow2(-9));
    }

    #[test]
    fn subnormals_and_overflow() {
        let tiny = round_to(FloatFormat::Fp16, &pow2(-24));
        assert_eq!(tiny.bits(), 1);
        let half_tiny = round_to(FloatFormat::Fp16, &pow2(-25));
        assert_eq!(half_tiny.bits(), 0, "tie at half the smallest subnormal goes to zero");
        let big = round_to(FloatFormat::Fp16, &int(65520));
        assert!(!big.is_finite() && !big.is_nan());
        let max = round_to(FloatFormat::Fp16, &int(65519));
        assert_eq!(max.to_f64(), 65504.0);
        let neg = round_to(FloatFormat::Fp16, &int(-70000));
        assert_eq!(neg.to_f64(), f64::NEG_INFINITY);
    }

    #[test]
    fn addition_matches_rounded_exact_sum() {
        let f = FloatFormat::Fp16;
        let one = round_to(f, &int(1));
        let eps = round_to(f, &pow2(-11));
        assert_eq!(add(one, eps), one);
        assert_eq!(add(eps, eps).to_rational().unwrap(), pow2(-10));
        let x = round_to(f, &ratio(3, 7));
        let y = round_to(f, &ratio(-5, 9));
        let exact = x.to_rational().unwrap() + y.to_rational().unwrap();
        assert_eq!(add(x, y), round_to(f, &exact));
    }

    #[test]
    fn zero_signs() {
        let f = FloatFormat::Bf16;
        let pz = FloatValue::zero(f);
        let nz = FloatValue::signed_zero(f, true);
        assert_eq!(add(nz, nz), nz);
        assert_eq!(add(pz, nz), pz);
        let x = round_to(f, &ratio(3, 4));
        let mx = round_to(f, &ratio(-3, 4));
        assert_eq!(add(x, mx), pz);
    }

    #[test]
    fn special_values() {
        let f = FloatFormat::Fp32;
        let inf = FloatValue::from_f64(f, f64::INFINITY);
        let ninf = FloatValue::from_f64(f, f64::NEG_INFINITY);
        assert!(add(inf, ninf).is_nan());
        assert_eq!(add(inf, round_to(f, &int(3))), inf);
        assert!(FloatValue::from_f64(f, f64::NAN).is_nan());
    }

    #[test]
    fn huge_exponent_gap_keeps_larger_operand() {
        let f = FloatFormat::Fp32;
        let big = FloatValue::from_f64(f, 1.0e30);
        let small = FloatValue::from_f64(f, 1.0e-40);
        assert_eq!(add(big, small), big);
        assert_eq!(add(small, big), big);
    }

    #[test]
    fn from_f64_agrees_with_rational_rounding() {
        for x in [0.1, -0.3333, 1.0e-6, 3.0e-8, 12345.678, 1.0e-45, 7.0e4] {
            for f in FloatFormat::ALL {
                let exact = Rational::from_float(x).unwrap();
                assert_eq!(FloatValue::from_f64(f, x), round_to(f, &exact), "{x} in {f}");
            }
        }
    }

    #[test]
    fn parses_format_names() {
        assert_eq!("FP16".parse::<FloatFormat>().unwrap(), FloatFormat::Fp16);
        assert_eq!("bf16".parse::<FloatFormat>().unwrap(), FloatFormat::Bf16);
        assert!("fp8".parse::<FloatFormat>().is_err());
    }
}
