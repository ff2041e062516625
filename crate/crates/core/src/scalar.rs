//! Numeric fields the pipeline runs over: exact rationals or `f64`.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{FromPrimitive, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{GomError, Result};

/// Arbitrary-precision rational number.
pub type Rational = BigRational;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arithmetic {
    Rational,
    Float,
}

impl fmt::Display for Arithmetic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arithmetic::Rational => f.write_str("rational"),
            Arithmetic::Float => f.write_str("float"),
        }
    }
}

impl FromStr for Arithmetic {
    type Err = GomError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rational" | "exact" => Ok(Arithmetic::Rational),
            "float" | "f64" => Ok(Arithmetic::Float),
            other => Err(GomError::Parse(format!("unknown arithmetic '{other}'"))),
        }
    }
}

pub trait Scalar:
    Clone
    + fmt::Debug
    + fmt::Display
    + PartialEq
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    const ARITHMETIC: Arithmetic;

    fn zero() -> Self;
    fn one() -> Self;
    fn from_int(n: i64) -> Self;
    fn ratio(numer: i64, denom: i64) -> Self;
    /// Rationals convert the binary value exactly.
    fn from_f64(x: f64) -> Self;
    fn to_f64(&self) -> f64;
    fn is_zero(&self) -> bool;

    fn abs(&self) -> Self {
        if *self < Self::zero() {
            -self.clone()
        } else {
            self.clone()
        }
    }

    /// `p/q` for rationals, shortest round-trip decimal for floats.
    fn to_repr(&self) -> String;
    fn parse_repr(s: &str) -> Result<Self>;

    fn is_exact() -> bool {
        Self::ARITHMETIC == Arithmetic::Rational
    }

    /// Default relative tolerance for rank and singularity decisions.
    fn default_tol() -> f64 {
        match Self::ARITHMETIC {
            Arithmetic::Rational => 0.0,
            Arithmetic::Float => 1e-8,
        }
    }
}

/// `|x| <= tol * scale`, or exact zero when `tol == 0`.
pub fn negligible<T: Scalar>(x: &T, tol: f64, scale: f64) -> bool {
    if tol == 0.0 {
        x.is_zero()
    } else {
        x.to_f64().abs() <= tol * scale
    }
}

impl Scalar for f64 {
    const ARITHMETIC: Arithmetic = Arithmetic::Float;

    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_int(n: i64) -> Self {
        n as f64
    }
    fn ratio(numer: i64, denom: i64) -> Self {
        numer as f64 / denom as f64
    }
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(&self) -> f64 {
        *self
    }
    fn is_zero(&self) -> bool {
        *self == 0.0
    }
    fn abs(&self) -> Self {
        f64::abs(*self)
    }
    fn to_repr(&self) -> String {
        format!("{self:?}")
    }
    fn parse_repr(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.contains('/') {
            return Ok(Scalar::to_f64(&parse_rational(s)?));
        }
        s.parse::<f64>()
            .map_err(|e| GomError::Parse(format!("'{s}': {e}")))
    }
}

impl Scalar for Rational {
    const ARITHMETIC: Arithmetic = Arithmetic::Rational;

    fn zero() -> Self {
        Zero::zero()
    }
    fn one() -> Self {
        num_traits::One::one()
    }
    fn from_int(n: i64) -> Self {
        BigRational::from_integer(BigInt::from(n))
    }
    fn ratio(numer: i64, denom: i64) -> Self {
        BigRational::new(BigInt::from(numer), BigInt::from(denom))
    }
    fn from_f64(x: f64) -> Self {
        <BigRational as FromPrimitive>::from_f64(x).unwrap_or_else(Zero::zero)
    }
    fn to_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }
    fn is_zero(&self) -> bool {
        Zero::is_zero(self)
    }
    fn abs(&self) -> Self {
        Signed::abs(self)
    }
    fn to_repr(&self) -> String {
        if self.is_integer() {
            self.numer().to_string()
        } else {
            format!("{}/{}", self.numer(), self.denom())
        }
    }
    fn parse_repr(s: &str) -> Result<Self> {
        parse_rational(s)
    }
}

/// Accepts `p/q`, integers and plain decimals (`0.125`, `-3.5e-2` is rejected).
pub fn parse_rational(s: &str) -> Result<Rational> {
    let s = s.trim();
    let bad = || GomError::Parse(format!("'{s}' is not a rational number"));
    if let Some((n, d)) = s.split_once('/') {
        let n: BigInt = n.trim().parse().map_err(|_| bad())?;
        let d: BigInt = d.trim().parse().map_err(|_| bad())?;
        if Zero::is_zero(&d) {
            return Err(GomError::Parse(format!("'{s}' has a zero denominator")));
        }
        return Ok(BigRational::new(n, d));
    }
    if let Some((int_part, frac_part)) = s.split_once('.') {
        let negative = int_part.starts_with('-');
        let digits = format!("{}{}", int_part.trim_start_matches(['-', '+']), frac_part);
        if digits.is_empty() || !digits.chars().all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        let n: BigInt = digits.parse().map_err(|_| bad())?;
        let d = num_traits::pow(BigInt::from(10), frac_part.len());
        let r = BigRational::new(n, d);
        return Ok(if negative { -r } else { r });
    }
    let n: BigInt = s.parse().map_err(|_| bad())?;
    Ok(BigRational::from_integer(n))
}
