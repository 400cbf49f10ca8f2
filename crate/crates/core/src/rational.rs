//! Helpers around `BigRational` used by the exact-arithmetic paths.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

use crate::error::{Error, Result};

/// Parses `"p/q"` or an integer literal.
pub fn parse_rational(text: &str) -> Result<BigRational> {
    let trimmed = text.trim();
    let value: BigRational = trimmed
        .parse()
        .map_err(|_| Error::Parse(format!("not a rational literal: {trimmed:?}")))?;
    Ok(value)
}

/// Always renders as `p/q`, including integers (`1/1`).
pub fn format_rational(value: &BigRational) -> String {
    format!("{}/{}", value.numer(), value.denom())
}

pub fn to_f64(value: &BigRational) -> f64 {
    value.to_f64().unwrap_or(f64::NAN)
}

/// The exact rational value of a finite double.
pub fn from_f64_exact(value: f64) -> Option<BigRational> {
    BigRational::from_float(value)
}

/// Smallest-denominator continued-fraction convergent within `tol` of `x`,
/// with denominators capped at `max_denom`. Returns `None` when no
/// convergent qualifies.
pub fn rationalize(x: f64, tol: f64, max_denom: u64) -> Option<BigRational> {
    if !x.is_finite() {
        return None;
    }
    // convergent recurrences seeded with h_{-1}=1, h_{-2}=0, k_{-1}=0, k_{-2}=1
    let (mut hm1, mut hm2) = (BigInt::one(), BigInt::zero());
    let (mut km1, mut km2) = (BigInt::zero(), BigInt::one());
    let mut rest = x;
    for _ in 0..64 {
        let a = rest.floor();
        let a_int = BigInt::from(a as i64);
        let hn = &a_int * &hm1 + &hm2;
        let kn = &a_int * &km1 + &km2;
        if kn > BigInt::from(max_denom) {
            return None;
        }
        let candidate = BigRational::new(hn.clone(), kn.clone());
        if (to_f64(&candidate) - x).abs() <= tol {
            return Some(candidate);
        }
        hm2 = std::mem::replace(&mut hm1, hn);
        km2 = std::mem::replace(&mut km1, kn);
        let frac = rest - a;
        if frac <= 0.0 {
            return None;
        }
        rest = 1.0 / frac;
    }
    None
}

pub fn is_probability(value: &BigRational) -> bool {
    !value.is_negative() && value <= &BigRational::one()
}

pub fn pow(base: &BigRational, exp: u32) -> BigRational {
    num_traits::pow::pow(base.clone(), exp as usize)
}
