//! Exact rational helpers shared by the engine and the I/O boundary.
//!
//! Simulated time, retired work and every cost in the overhead ledger are
//! [`Rational`]s. Decimal strings are the only textual form: they parse
//! exactly, and are rendered either exactly (when the denominator divides a
//! power of ten) or rounded to a fixed number of fractional digits.

use alloc::string::String;
use core::fmt::Write;

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

pub type Rational = BigRational;

/// `n / d` as a rational. Panics if `d == 0`.
pub fn ratio(n: i64, d: i64) -> Rational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

pub fn int(n: i64) -> Rational {
    BigRational::from_integer(BigInt::from(n))
}

pub fn zero() -> Rational {
    Rational::zero()
}

pub fn one() -> Rational {
    Rational::one()
}

pub fn max(a: &Rational, b: &Rational) -> Rational {
    if a >= b {
        a.clone()
    } else {
        b.clone()
    }
}

pub fn min(a: &Rational, b: &Rational) -> Rational {
    if a <= b {
        a.clone()
    } else {
        b.clone()
    }
}

/// Lossy conversion for reporting only.
pub fn to_f64(q: &Rational) -> f64 {
    q.to_f64().unwrap_or(f64::NAN)
}

/// Exact conversion of a finite `f64`.
pub fn from_f64(x: f64) -> Option<Rational> {
    BigRational::from_float(x)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid decimal literal {0:?}")]
pub struct ParseDecimalError(pub String);

/// Parses `[-+]digits[.digits][e[-+]digits]` or `p/q` exactly.
pub fn parse_decimal(text: &str) -> Result<Rational, ParseDecimalError> {
    let err = || ParseDecimalError(String::from(text));
    let s = text.trim();
    if s.is_empty() {
        return Err(err());
    }
    if let Some((n, d)) = s.split_once('/') {
        let n: BigInt = n.trim().parse().map_err(|_| err())?;
        let d: BigInt = d.trim().parse().map_err(|_| err())?;
        if d.is_zero() {
            return Err(err());
        }
        return Ok(BigRational::new(n, d));
    }
    let (mantissa, exponent) = match s.find(['e', 'E']) {
        Some(idx) => {
            let e: i32 = s[idx + 1..].parse().map_err(|_| err())?;
            (&s[..idx], e)
        }
        None => (s, 0),
    };
    let (negative, body) = match mantissa.as_bytes().first() {
        Some(b'-') => (true, &mantissa[1..]),
        Some(b'+') => (false, &mantissa[1..]),
        _ => (false, mantissa),
    };
    let (whole, frac) = body.split_once('.').unwrap_or((body, ""));
    if whole.is_empty() && frac.is_empty() {
        return Err(err());
    }
    if !whole.bytes().chain(frac.bytes()).all(|b| b.is_ascii_digit()) {
        return Err(err());
    }
    let mut digits = String::with_capacity(whole.len() + frac.len());
    digits.push_str(whole);
    digits.push_str(frac);
    let mut numer: BigInt = if digits.is_empty() {
        BigInt::zero()
    } else {
        digits.parse().map_err(|_| err())?
    };
    if negative {
        numer = -numer;
    }
    let scale = exponent - frac.len() as i32;
    let ten = BigInt::from(10u32);
    let q = if scale >= 0 {
        BigRational::from_integer(numer * num_traits::pow(ten, scale as usize))
    } else {
        BigRational::new(numer, num_traits::pow(ten, (-scale) as usize))
    };
    Ok(q)
}

/// Renders `q` with exactly `digits` fractional digits, rounding half away
/// from zero.
pub fn to_decimal(q: &Rational, digits: usize) -> String {
    let scale = num_traits::pow(BigInt::from(10u32), digits);
    let scaled = q.abs() * BigRational::from_integer(scale.clone());
    let floor = scaled.floor();
    let rounded = if &scaled - &floor >= ratio(1, 2) {
        floor.to_integer() + BigInt::one()
    } else {
        floor.to_integer()
    };
    let (whole, frac) = rounded.div_rem(&scale);
    let mut out = String::new();
    if q.is_negative() && !rounded.is_zero() {
        out.push('-');
    }
    let _ = write!(out, "{whole}");
    if digits > 0 {
        let frac = frac.to_str_radix(10);
        out.push('.');
        for _ in frac.len()..digits {
            out.push('0');
        }
        out.push_str(&frac);
    }
    out
}

/// Exact decimal rendering when the reduced denominator has no prime factors
/// other than 2 and 5; `None` otherwise.
pub fn exact_decimal(q: &Rational) -> Option<String> {
    let mut d = q.denom().clone();
    let two = BigInt::from(2u32);
    let five = BigInt::from(5u32);
    let (mut twos, mut fives) = (0usize, 0usize);
    while d.is_even() {
        d /= &two;
        twos += 1;
    }
    while (&d % &five).is_zero() {
        d /= &five;
        fives += 1;
    }
    if !d.is_one() {
        return None;
    }
    let mut text = to_decimal(q, twos.max(fives));
    if text.contains('.') {
        while text.ends_with('0') {
            text.pop();
        }
        if text.ends_with('.') {
            text.pop();
        }
    }
    Some(text)
}

/// Exact decimal if short enough, otherwise rounded to `digits` places.
pub fn render(q: &Rational, digits: usize) -> String {
    match exact_decimal(q) {
        Some(s) if s.split_once('.').map_or(0, |(_, f)| f.len()) <= digits => s,
        _ => to_decimal(q, digits),
    }
}

/// Rounds `q` to the nearest multiple of `10^-digits` (ties to even).
pub fn quantize(q: &Rational, digits: usize) -> Rational {
    let scale = num_traits::pow(BigInt::from(10u32), digits);
    let scaled = q * BigRational::from_integer(scale.clone());
    let floor = scaled.floor();
    let frac = &scaled - &floor;
    let half = ratio(1, 2);
    let mut n = floor.to_integer();
    if frac > half || (frac == half && n.is_odd()) {
        n += 1;
    }
    BigRational::new(n, scale)
}

pub fn is_positive(q: &Rational) -> bool {
    q.is_positive()
}

/// Smallest integer multiple of `step` that is `>= q`, as a multiple count.
pub fn ceil_div(q: &Rational, step: &Rational) -> BigInt {
    (q / step).ceil().to_integer()
}
