//! Floating-point numbers with an encrypted mantissa and a plaintext
//! exponent, `value = mantissa * BASE^exponent`.
//!
//! Mantissas are signed through two's complement modulo `N` (see
//! [`PublicKey::max_plain`]). Exponents can only be lowered on encrypted
//! values, since raising one would need a homomorphic division.

use num_bigint::{BigInt, BigUint};
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{Pow, Signed, ToPrimitive, Zero};
use rand::{CryptoRng, Rng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
#[cfg(feature = "decrypt")]
use crate::paillier::SecureKey;
use crate::paillier::{Ciphertext, PublicKey};

/// Radix of every float in the system.
pub const BASE: u32 = 10;

/// Default fractional digits for reciprocal divisions and weights.
pub const DEFAULT_GAMMA: u32 = 6;

pub fn base_pow(digits: u32) -> BigUint {
    BigUint::from(BASE).pow(digits)
}

/// `num / den` rounded to the nearest integer, ties away from zero.
pub fn round_half_away(num: &BigInt, den: &BigInt) -> BigInt {
    assert!(!den.is_zero(), "division by zero");
    let (num, den) = if den.is_negative() {
        (-num, -den)
    } else {
        (num.clone(), den.clone())
    };
    let twice: BigInt = num.abs() * 2 + &den;
    let q: BigInt = twice / (den * 2);
    if num.is_negative() {
        -q
    } else {
        q
    }
}

/// A plaintext float `mantissa * BASE^exponent`.
///
/// Equality is structural; compare values with [`PlainFloat::value_eq`].
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PlainFloat {
    mantissa: BigInt,
    exponent: i32,
}

impl PlainFloat {
    pub fn new(mantissa: impl Into<BigInt>, exponent: i32) -> Self {
        PlainFloat {
            mantissa: mantissa.into(),
            exponent,
        }
    }

    pub fn zero() -> Self {
        PlainFloat::new(0, 0)
    }

    pub fn one() -> Self {
        PlainFloat::new(1, 0)
    }

    pub fn mantissa(&self) -> &BigInt {
        &self.mantissa
    }

    pub fn exponent(&self) -> i32 {
        self.exponent
    }

    pub fn is_zero(&self) -> bool {
        self.mantissa.is_zero()
    }

    /// Rounds `value` to at most `max_digits` fractional digits, then drops
    /// trailing zero digits while the exponent is negative.
    pub fn from_ratio(value: &BigRational, max_digits: u32) -> Self {
        let scaled = value.numer() * BigInt::from(base_pow(max_digits));
        let mut mantissa = round_half_away(&scaled, value.denom());
        let mut exponent = -(max_digits as i32);
        let b = BigInt::from(BASE);
        while exponent < 0 && !mantissa.is_zero() && mantissa.is_multiple_of(&b) {
            mantissa /= &b;
            exponent += 1;
        }
        if mantissa.is_zero() {
            exponent = 0;
        }
        PlainFloat { mantissa, exponent }
    }

    pub fn from_f64(x: f64, max_digits: u32) -> Result<Self> {
        let r = BigRational::from_float(x)
            .ok_or_else(|| Error::InvalidArgument(format!("{x} is not a finite number")))?;
        Ok(Self::from_ratio(&r, max_digits))
    }

    pub fn from_integer(v: impl Into<BigInt>) -> Self {
        PlainFloat::new(v, 0)
    }

    /// `(round(BASE^digits / n), -digits)`, the fixed-point reciprocal of `n`.
    pub fn reciprocal(n: u64, digits: u32) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("division by zero".into()));
        }
        let m = round_half_away(&BigInt::from(base_pow(digits)), &BigInt::from(n));
        Ok(PlainFloat::new(m, -(digits as i32)))
    }

    pub fn to_ratio(&self) -> BigRational {
        let b = BigInt::from(BASE);
        if self.exponent >= 0 {
            BigRational::from_integer(&self.mantissa * b.pow(self.exponent as u32))
        } else {
            BigRational::new(self.mantissa.clone(), b.pow(self.exponent.unsigned_abs()))
        }
    }

    pub fn to_f64(&self) -> f64 {
        let r = self.to_ratio();
        r.to_f64().unwrap_or_else(|| {
            if r.is_negative() {
                f64::NEG_INFINITY
            } else {
                f64::INFINITY
            }
        })
    }

    pub fn value_eq(&self, other: &PlainFloat) -> bool {
        self.to_ratio() == other.to_ratio()
    }

    /// Same value at a lower exponent.
    pub fn with_exponent(&self, exponent: i32) -> Result<Self> {
        if exponent > self.exponent {
            return Err(Error::ExponentIncrease {
                from: self.exponent,
                to: exponent,
            });
        }
        let shift = (self.exponent - exponent) as u32;
        Ok(PlainFloat::new(
            &self.mantissa * BigInt::from(base_pow(shift)),
            exponent,
        ))
    }

    /// Exact sum, at the smaller exponent (mirrors [`EncFloat::add`]).
    pub fn add(&self, other: &PlainFloat) -> PlainFloat {
        let e = self.exponent.min(other.exponent);
        let a = self.with_exponent(e).expect("lowering exponent");
        let b = other.with_exponent(e).expect("lowering exponent");
        PlainFloat::new(a.mantissa + b.mantissa, e)
    }

    pub fn mul(&self, other: &PlainFloat) -> PlainFloat {
        PlainFloat::new(
            &self.mantissa * &other.mantissa,
            self.exponent + other.exponent,
        )
    }
}

/// Wire form: `{mantissa, exponent}` with the mantissa as a signed decimal
/// string (plaintext floats are never secret-bearing hex blobs).
#[derive(Serialize, Deserialize)]
struct PlainFloatDoc {
    mantissa: String,
    exponent: String,
}

impl Serialize for PlainFloat {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PlainFloatDoc {
            mantissa: self.mantissa.to_string(),
            exponent: self.exponent.to_string(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PlainFloat {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let doc = PlainFloatDoc::deserialize(d)?;
        let mantissa = doc.mantissa.parse::<BigInt>().map_err(D::Error::custom)?;
        let exponent = doc.exponent.parse::<i32>().map_err(D::Error::custom)?;
        Ok(PlainFloat { mantissa, exponent })
    }
}

/// A float whose mantissa is a Paillier ciphertext.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncFloat {
    mantissa: Ciphertext,
    exponent: i32,
}

impl EncFloat {
    pub fn new(mantissa: Ciphertext, exponent: i32) -> Self {
        EncFloat { mantissa, exponent }
    }

    pub fn mantissa(&self) -> &Ciphertext {
        &self.mantissa
    }

    pub fn exponent(&self) -> i32 {
        self.exponent
    }

    pub fn into_parts(self) -> (Ciphertext, i32) {
        (self.mantissa, self.exponent)
    }

    pub fn encrypt<R: Rng + CryptoRng + ?Sized>(
        value: &PlainFloat,
        pk: &PublicKey,
        rng: &mut R,
    ) -> Result<Self> {
        let m = pk.encode_signed(value.mantissa())?;
        Ok(EncFloat::new(pk.encrypt(&m, rng)?, value.exponent()))
    }

    pub fn encrypt_unobfuscated(value: &PlainFloat, pk: &PublicKey) -> Result<Self> {
        let m = pk.encode_signed(value.mantissa())?;
        Ok(EncFloat::new(pk.encrypt_unobfuscated(&m)?, value.exponent()))
    }

    /// Encodes `x` with at most `max_digits` fractional digits and encrypts it.
    pub fn encode_encrypt<R: Rng + CryptoRng + ?Sized>(
        x: f64,
        max_digits: u32,
        pk: &PublicKey,
        rng: &mut R,
    ) -> Result<Self> {
        Self::encrypt(&PlainFloat::from_f64(x, max_digits)?, pk, rng)
    }

    /// An unobfuscated encryption of zero at exponent 0.
    pub fn zero(pk: &PublicKey) -> Self {
        EncFloat::new(
            pk.encrypt_unobfuscated(&BigUint::zero())
                .expect("zero is a valid plaintext"),
            0,
        )
    }

    /// Same value with exponent lowered to `target`: the mantissa is
    /// scaled by `BASE^(exponent - target)`.
    pub fn decrease_exponent_to(&self, target: i32, pk: &PublicKey) -> Result<Self> {
        if target > self.exponent {
            return Err(Error::ExponentIncrease {
                from: self.exponent,
                to: target,
            });
        }
        if target == self.exponent {
            return Ok(self.clone());
        }
        let factor = exponent_factor((self.exponent - target) as u32, pk)?;
        Ok(EncFloat::new(
            pk.scale_unsigned(&self.mantissa, &factor),
            target,
        ))
    }

    /// Sum of two encrypted floats; the operand with the larger exponent is
    /// rescaled to the smaller one before the mantissas are added.
    pub fn add(&self, other: &EncFloat, pk: &PublicKey) -> Result<Self> {
        let (a, b, e) = if self.exponent > other.exponent {
            let a = self.decrease_exponent_to(other.exponent, pk)?;
            (a, other.mantissa.clone(), other.exponent)
        } else if self.exponent < other.exponent {
            let b = other.decrease_exponent_to(self.exponent, pk)?;
            (self.clone(), b.mantissa, self.exponent)
        } else {
            (self.clone(), other.mantissa.clone(), self.exponent)
        };
        Ok(EncFloat::new(pk.add(&a.mantissa, &b), e))
    }

    /// Product with a plaintext float. When `N - k` is itself a legal
    /// plaintext, the inverse ciphertext is raised to that smaller power.
    pub fn mul_plain(&self, k: &PlainFloat, pk: &PublicKey) -> Result<Self> {
        if k.mantissa().magnitude() >= pk.n() {
            return Err(Error::PlaintextOutOfRange);
        }
        let m2 = pk.reduce(k.mantissa());
        let complement = pk.n() - &m2;
        let mantissa = if complement <= *pk.max_plain() {
            let inv = pk.negate(&self.mantissa)?;
            pk.scale_unsigned(&inv, &complement)
        } else {
            pk.scale_unsigned(&self.mantissa, &m2)
        };
        Ok(EncFloat::new(mantissa, self.exponent + k.exponent()))
    }

    /// Approximate division by a positive integer: multiplication by the
    /// reciprocal rounded to `digits` fractional digits.
    pub fn div_plain(&self, n: u64, digits: u32, pk: &PublicKey) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("division by zero".into()));
        }
        self.mul_plain(&PlainFloat::reciprocal(n, digits)?, pk)
    }

    pub fn obfuscate<R: Rng + CryptoRng + ?Sized>(&self, pk: &PublicKey, rng: &mut R) -> Self {
        EncFloat::new(pk.obfuscate(&self.mantissa, rng), self.exponent)
    }
}

fn exponent_factor(shift: u32, pk: &PublicKey) -> Result<BigUint> {
    let factor = base_pow(shift);
    if factor > *pk.max_plain() {
        return Err(Error::PrecisionExhausted(format!(
            "rescale factor {BASE}^{shift} exceeds the plaintext range"
        )));
    }
    Ok(factor)
}

/// Decrypts the mantissa, undoes two's complement and attaches the exponent.
#[cfg(feature = "decrypt")]
pub fn decrypt_float(a: &EncFloat, sk: &SecureKey) -> Result<PlainFloat> {
    let m = sk.decrypt_signed(a.mantissa())?;
    Ok(PlainFloat::new(m, a.exponent()))
}

/// Lowers every value to the smallest exponent present and returns the
/// mantissas with that shared exponent.
pub fn equalize_exponents(values: &[EncFloat], pk: &PublicKey) -> Result<(Vec<Ciphertext>, i32)> {
    let e_min = values
        .iter()
        .map(EncFloat::exponent)
        .min()
        .ok_or_else(|| Error::InvalidArgument("cannot equalize an empty sequence".into()))?;
    let mantissas = values
        .iter()
        .map(|v| v.decrease_exponent_to(e_min, pk).map(|v| v.mantissa))
        .collect::<Result<Vec<_>>>()?;
    Ok((mantissas, e_min))
}

/// Wire form of an encrypted float: lowercase hex mantissa and a signed
/// decimal exponent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncFloatDoc {
    pub mantissa: String,
    pub exponent: String,
}

impl EncFloat {
    pub fn to_doc(&self) -> EncFloatDoc {
        EncFloatDoc {
            mantissa: self.mantissa.value().to_str_radix(16),
            exponent: self.exponent.to_string(),
        }
    }

    pub fn from_doc(doc: &EncFloatDoc, pk: &PublicKey) -> Result<Self> {
        let value = BigUint::parse_bytes(doc.mantissa.as_bytes(), 16)
            .ok_or_else(|| Error::Format("mantissa is not hex".into()))?;
        let exponent = doc
            .exponent
            .parse::<i32>()
            .map_err(|_| Error::Format("exponent is not a decimal integer".into()))?;
        Ok(EncFloat::new(Ciphertext::from_value(value, pk)?, exponent))
    }
}
