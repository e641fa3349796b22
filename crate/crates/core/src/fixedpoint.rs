//! Signed fixed-point encoding of decimals into `Z_N`.
//!
//! A decimal `v` becomes `⌊v·10^L⌋ mod N`. Residues above `N/2` decode as
//! negative. Scales are tracked on ciphertexts; see [`crate::pctd::Ciphertext`].

use num_bigint::{BigInt, BigUint};
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use thiserror::Error;

use crate::pctd::{Ciphertext, CryptoError, PublicKey};

pub const DEFAULT_ROUNDING: u32 = 6;
pub const DEFAULT_KAPPA: u32 = 32;

#[derive(Debug, Error)]
pub enum FixedPointError {
    #[error("invalid codec parameters: {0}")]
    Parameters(String),
    #[error("|value|·10^{rounding} = {magnitude} does not fit below 2^{kappa}")]
    Range {
        magnitude: BigInt,
        rounding: u32,
        kappa: u32,
    },
    #[error("rescaling by 10^{0} would exceed half the modulus")]
    AlignRange(u32),
    #[error("not a decimal number: {0:?}")]
    Parse(String),
    #[error("non-finite float {0}")]
    NonFinite(f64),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixedPointCodec {
    rounding: u32,
    kappa: u32,
    modulus: BigUint,
    half: BigUint,
}

pub fn pow10(exp: u32) -> BigUint {
    BigUint::from(10u32).pow(exp)
}

pub fn pow2(exp: u32) -> BigUint {
    BigUint::one() << exp as usize
}

/// `⌊v·10^scale⌋`, flooring toward negative infinity.
pub fn floor_scaled(v: &BigRational, scale: u32) -> BigInt {
    let scaled = v * BigRational::from_integer(BigInt::from(pow10(scale)));
    scaled.floor().to_integer()
}

/// The exact decimal a float prints as (its shortest round-trip form).
/// `0.1` becomes exactly `1/10`, not the nearest binary fraction.
pub fn exact_decimal(v: f64) -> Result<BigRational, FixedPointError> {
    if !v.is_finite() {
        return Err(FixedPointError::NonFinite(v));
    }
    parse_decimal(&format!("{v}"))
}

/// Parses `[-+]digits[.digits][e[-+]digits]` into an exact rational.
pub fn parse_decimal(s: &str) -> Result<BigRational, FixedPointError> {
    let err = || FixedPointError::Parse(s.to_string());
    let t = s.trim();
    let (mantissa, exponent) = match t.find(['e', 'E']) {
        Some(i) => (&t[..i], t[i + 1..].parse::<i32>().map_err(|_| err())?),
        None => (t, 0),
    };
    let (negative, body) = match mantissa.as_bytes().first() {
        Some(b'-') => (true, &mantissa[1..]),
        Some(b'+') => (false, &mantissa[1..]),
        _ => (false, mantissa),
    };
    let (int_part, frac_part) = body.split_once('.').unwrap_or((body, ""));
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(err());
    }
    if !int_part.bytes().chain(frac_part.bytes()).all(|b| b.is_ascii_digit()) {
        return Err(err());
    }
    let digits = format!("{int_part}{frac_part}");
    let mut numer: BigInt = if digits.is_empty() {
        BigInt::zero()
    } else {
        digits.parse().map_err(|_| err())?
    };
    if negative {
        numer = -numer;
    }
    let shift = exponent - frac_part.len() as i32;
    if shift.unsigned_abs() > 10_000 {
        return Err(err());
    }
    let factor = BigInt::from(pow10(shift.unsigned_abs()));
    Ok(if shift >= 0 {
        BigRational::from_integer(numer * factor)
    } else {
        BigRational::new(numer, factor)
    })
}

/// Nearest float to an exact rational; used only for reporting.
pub fn rational_to_f64(v: &BigRational) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// Renders `v` with exactly `places` decimals, truncated toward `-∞`.
pub fn format_decimal(v: &BigRational, places: u32) -> String {
    let q = floor_scaled(v, places);
    let negative = q.is_negative();
    let digits = q.abs().to_string();
    if places == 0 {
        return q.to_string();
    }
    let width = places as usize + 1;
    let padded = format!("{digits:0>width$}");
    let (int_part, frac_part) = padded.split_at(padded.len() - places as usize);
    format!("{}{int_part}.{frac_part}", if negative { "-" } else { "" })
}

impl FixedPointCodec {
    /// Checks `10^L < 2^κ` and `2^(κ+2) < N`.
    pub fn new(rounding: u32, kappa: u32, modulus: BigUint) -> Result<Self, FixedPointError> {
        if pow10(rounding) >= pow2(kappa) {
            return Err(FixedPointError::Parameters(format!(
                "10^{rounding} must be below 2^{kappa}"
            )));
        }
        if pow2(kappa + 2) >= modulus {
            return Err(FixedPointError::Parameters(format!(
                "2^{} must be below the modulus",
                kappa + 2
            )));
        }
        let half = &modulus >> 1usize;
        Ok(Self {
            rounding,
            kappa,
            modulus,
            half,
        })
    }

    pub fn for_key(pk: &PublicKey, rounding: u32, kappa: u32) -> Result<Self, FixedPointError> {
        Self::new(rounding, kappa, pk.n().clone())
    }

    pub fn rounding(&self) -> u32 {
        self.rounding
    }

    pub fn kappa(&self) -> u32 {
        self.kappa
    }

    pub fn modulus(&self) -> &BigUint {
        &self.modulus
    }

    /// `10^L`.
    pub fn unit(&self) -> BigUint {
        pow10(self.rounding)
    }

    /// `⌊v·10^L⌋` as a signed integer, checked against `2^κ`.
    pub fn quantize(&self, v: &BigRational) -> Result<BigInt, FixedPointError> {
        let q = floor_scaled(v, self.rounding);
        self.check_magnitude(&q)?;
        Ok(q)
    }

    pub fn check_magnitude(&self, q: &BigInt) -> Result<(), FixedPointError> {
        if q.magnitude() >= &pow2(self.kappa) {
            return Err(FixedPointError::Range {
                magnitude: q.clone(),
                rounding: self.rounding,
                kappa: self.kappa,
            });
        }
        Ok(())
    }

    pub fn encode(&self, v: &BigRational) -> Result<BigUint, FixedPointError> {
        Ok(self.from_signed(&self.quantize(v)?))
    }

    pub fn encode_f64(&self, v: f64) -> Result<BigUint, FixedPointError> {
        self.encode(&exact_decimal(v)?)
    }

    pub fn encode_str(&self, s: &str) -> Result<BigUint, FixedPointError> {
        self.encode(&parse_decimal(s)?)
    }

    /// Residue to signed integer with the half-modulus cutoff.
    pub fn to_signed(&self, element: &BigUint) -> BigInt {
        let e = element % &self.modulus;
        if e > self.half {
            BigInt::from(e) - BigInt::from(self.modulus.clone())
        } else {
            BigInt::from(e)
        }
    }

    /// Signed integer to its residue mod N.
    pub fn from_signed(&self, v: &BigInt) -> BigUint {
        let n = BigInt::from(self.modulus.clone());
        v.mod_floor(&n)
            .to_biguint()
            .expect("mod_floor with positive modulus is nonnegative")
    }

    /// Residue interpreted at `scale`: `signed(element) / 10^scale`.
    pub fn decode(&self, element: &BigUint, scale: u32) -> BigRational {
        BigRational::new(self.to_signed(element), BigInt::from(pow10(scale)))
    }

    pub fn decode_f64(&self, element: &BigUint, scale: u32) -> f64 {
        rational_to_f64(&self.decode(element, scale))
    }

    /// Brings both ciphertexts to the larger scale by multiplying the other
    /// plaintext by a power of ten.
    pub fn align_scales(
        &self,
        pk: &PublicKey,
        c1: &Ciphertext,
        c2: &Ciphertext,
    ) -> Result<(Ciphertext, Ciphertext), FixedPointError> {
        let (s1, s2) = (c1.scale(), c2.scale());
        if s1 == s2 {
            return Ok((c1.clone(), c2.clone()));
        }
        let gap = s1.abs_diff(s2);
        if pow10(gap) * pow2(self.kappa) >= self.half {
            return Err(FixedPointError::AlignRange(gap));
        }
        if s1 > s2 {
            Ok((c1.clone(), pk.rescale_up(c2, gap)?))
        } else {
            Ok((pk.rescale_up(c1, gap)?, c2.clone()))
        }
    }
}
