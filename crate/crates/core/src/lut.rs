//! Oblivious lookup tables.
//!
//! A finite map `x_i -> y_i` is turned into a coefficient vector `l` with
//! `V l = y`, `V` the Vandermonde matrix of the domain. An input is stored
//! as the encrypted power vector `(1, x, x², ..., x^(n-1))`, and a lookup is
//! the homomorphic dot product of that vector with `l`.
//!
//! The powers of `x` outgrow any fixed-point plaintext range long before
//! `n = 256`, so both the powers and the coefficients live in `Z_N`: the
//! rational coefficients are mapped to `num * den^-1 mod N`, which keeps the
//! dot product exact for every domain value.

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, Zero};
use rand::{CryptoRng, Rng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::{base_pow, EncFloat, PlainFloat};
use crate::paillier::{Ciphertext, PublicKey};

/// Default output precision in fractional digits.
pub const DEFAULT_LUT_DIGITS: u32 = 9;
/// Largest supported domain.
pub const MAX_TABLE_SIZE: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LookupTable {
    domain: Vec<i64>,
    outputs: Vec<BigInt>,
    exponent: i32,
    coefficients: Vec<BigRational>,
}

impl LookupTable {
    /// Builds a table for `domain[i] -> values[i]`, outputs quantized to at
    /// most `digits` fractional digits.
    pub fn build(domain: &[i64], values: &[BigRational], digits: u32) -> Result<Self> {
        if domain.is_empty() {
            return Err(Error::InvalidArgument("lookup table needs at least one entry".into()));
        }
        if domain.len() != values.len() {
            return Err(Error::DimensionMismatch {
                expected: domain.len(),
                actual: values.len(),
            });
        }
        if domain.len() > MAX_TABLE_SIZE {
            return Err(Error::InvalidArgument(format!(
                "lookup table size {} exceeds {MAX_TABLE_SIZE}",
                domain.len()
            )));
        }
        let mut sorted = domain.to_vec();
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::DuplicateDomain(w[0].to_string()));
        }

        let shift = output_digits(values, digits);
        let scale = BigInt::from(base_pow(shift));
        let outputs: Vec<BigInt> = values
            .iter()
            .map(|y| crate::float::round_half_away(&(y.numer() * &scale), y.denom()))
            .collect();
        let nodes: Vec<BigInt> = domain.iter().map(|&x| BigInt::from(x)).collect();
        let rhs: Vec<BigRational> = outputs
            .iter()
            .map(|y| BigRational::from_integer(y.clone()))
            .collect();
        let coefficients = solve_vandermonde(&nodes, &rhs);
        Ok(LookupTable {
            domain: domain.to_vec(),
            outputs,
            exponent: -(shift as i32),
            coefficients,
        })
    }

    pub fn from_integers(domain: &[i64], values: &[i64]) -> Result<Self> {
        let values: Vec<BigRational> = values
            .iter()
            .map(|&y| BigRational::from_integer(y.into()))
            .collect();
        Self::build(domain, &values, 0)
    }

    pub fn len(&self) -> usize {
        self.domain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domain.is_empty()
    }

    pub fn domain(&self) -> &[i64] {
        &self.domain
    }

    /// Exact coefficient vector `l`.
    pub fn coefficients(&self) -> &[BigRational] {
        &self.coefficients
    }

    /// Exponent attached to every lookup result.
    pub fn exponent(&self) -> i32 {
        self.exponent
    }

    /// Quantized output for domain index `i`.
    pub fn output(&self, i: usize) -> PlainFloat {
        PlainFloat::new(self.outputs[i].clone(), self.exponent)
    }

    /// Coefficients mapped into `Z_N`.
    pub fn residues(&self, pk: &PublicKey) -> Result<Vec<BigUint>> {
        self.coefficients
            .iter()
            .map(|l| {
                let den = pk.reduce(l.denom());
                let inv = den
                    .modinv(pk.n())
                    .ok_or_else(|| Error::NotInvertible(l.denom().to_string()))?;
                Ok((pk.reduce(l.numer()) * inv) % pk.n())
            })
            .collect()
    }

    /// Homomorphic lookup: `sum_i powers[i] ⊗ l_i`. Only ciphertext
    /// multiplication and exponentiation by plaintexts are used.
    pub fn evaluate(&self, input: &EncodedInput, pk: &PublicKey) -> Result<EncFloat> {
        let residues = self.residues(pk)?;
        self.evaluate_with(input, &residues, pk)
    }

    /// Like [`evaluate`](Self::evaluate) with precomputed [`residues`](Self::residues).
    pub fn evaluate_with(
        &self,
        input: &EncodedInput,
        residues: &[BigUint],
        pk: &PublicKey,
    ) -> Result<EncFloat> {
        if input.powers.len() != residues.len() {
            return Err(Error::DimensionMismatch {
                expected: residues.len(),
                actual: input.powers.len(),
            });
        }
        let mut terms = input
            .powers
            .iter()
            .zip(residues)
            .map(|(c, l)| pk.scale_unsigned(c, l));
        let first = terms.next().expect("tables are non-empty");
        let sum = terms.fold(first, |acc, t| pk.add(&acc, &t));
        Ok(EncFloat::new(sum, self.exponent))
    }

    /// Plaintext evaluation of the interpolating polynomial.
    pub fn evaluate_plain(&self, x: i64) -> BigRational {
        let x = BigRational::from_integer(x.into());
        self.coefficients
            .iter()
            .rev()
            .fold(BigRational::zero(), |acc, l| acc * &x + l)
    }

    pub fn to_doc(&self) -> LookupTableDoc {
        LookupTableDoc {
            domain: self.domain.clone(),
            exponent: self.exponent,
            l: self
                .coefficients
                .iter()
                .map(|c| PlainFloat::from_ratio(c, DEFAULT_LUT_DIGITS))
                .collect(),
            l_exact: self
                .coefficients
                .iter()
                .map(|c| RationalDoc {
                    num: c.numer().to_string(),
                    den: c.denom().to_string(),
                })
                .collect(),
        }
    }

    pub fn from_doc(doc: &LookupTableDoc) -> Result<Self> {
        let n = doc.domain.len();
        if n == 0 || doc.l_exact.len() != n {
            return Err(Error::Format("table needs one exact coefficient per domain value".into()));
        }
        let parse = |s: &str| {
            s.parse::<BigInt>()
                .map_err(|_| Error::Format(format!("bad integer {s:?}")))
        };
        let coefficients = doc
            .l_exact
            .iter()
            .map(|r| {
                let den = parse(&r.den)?;
                if den.is_zero() {
                    return Err(Error::Format("zero denominator".into()));
                }
                Ok(BigRational::new(parse(&r.num)?, den))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut table = LookupTable {
            domain: doc.domain.clone(),
            outputs: Vec::new(),
            exponent: doc.exponent,
            coefficients,
        };
        let mut outputs = Vec::with_capacity(n);
        for &x in &doc.domain {
            let y = table.evaluate_plain(x);
            if !y.is_integer() {
                return Err(Error::Format("coefficients do not reproduce integer outputs".into()));
            }
            outputs.push(y.to_integer());
        }
        table.outputs = outputs;
        Ok(table)
    }
}

/// Serialized table: domain, `l` at [`DEFAULT_LUT_DIGITS`] precision for
/// inspection, and the exact rationals the evaluation uses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LookupTableDoc {
    pub domain: Vec<i64>,
    pub exponent: i32,
    pub l: Vec<PlainFloat>,
    pub l_exact: Vec<RationalDoc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RationalDoc {
    pub num: String,
    pub den: String,
}

fn output_digits(values: &[BigRational], max_digits: u32) -> u32 {
    (0..=max_digits)
        .find(|&d| {
            let scale = BigInt::from(base_pow(d));
            values.iter().all(|y| (y * &scale).is_integer())
        })
        .unwrap_or(max_digits)
}

/// Solves `V l = rhs` for the Vandermonde matrix of `nodes` exactly, via
/// Newton divided differences expanded into the monomial basis. O(n²).
pub fn solve_vandermonde(nodes: &[BigInt], rhs: &[BigRational]) -> Vec<BigRational> {
    let n = nodes.len();
    assert_eq!(n, rhs.len(), "one right-hand side per node");
    let mut dd = rhs.to_vec();
    for j in 1..n {
        for i in (j..n).rev() {
            let denom = BigRational::from_integer(&nodes[i] - &nodes[i - j]);
            dd[i] = (&dd[i] - &dd[i - 1]) / denom;
        }
    }

    // p(x) = dd[0] + (x - x0)(dd[1] + (x - x1)(dd[2] + ...))
    let mut poly: Vec<BigRational> = vec![BigRational::zero(); n];
    poly[0] = dd[n - 1].clone();
    for (degree, k) in (0..n - 1).rev().enumerate() {
        let xk = BigRational::from_integer(nodes[k].clone());
        // poly <- poly * (x - xk) + dd[k]
        for i in (0..=degree + 1).rev() {
            let shifted = if i > 0 { poly[i - 1].clone() } else { BigRational::zero() };
            let scaled = if i <= degree { &poly[i] * &xk } else { BigRational::zero() };
            poly[i] = shifted - scaled;
        }
        poly[0] += &dd[k];
    }
    poly
}

/// The encrypted power vector `(1, x, ..., x^(n-1))`, reduced modulo `N`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedInput {
    powers: Vec<Ciphertext>,
}

impl EncodedInput {
    pub fn powers(&self) -> &[Ciphertext] {
        &self.powers
    }

    /// Serialized size: `n` fixed-width ciphertexts.
    pub fn storage_bytes(&self, pk: &PublicKey) -> usize {
        self.powers.len() * pk.ciphertext_width()
    }
}

/// Client-side encoding of `x` for an `n`-entry table.
pub fn encode_input<R: Rng + CryptoRng + ?Sized>(
    x: i64,
    n: usize,
    pk: &PublicKey,
    rng: &mut R,
) -> Result<EncodedInput> {
    if n == 0 {
        return Err(Error::InvalidArgument("table size must be positive".into()));
    }
    let base = pk.reduce(&BigInt::from(x));
    let mut power = BigUint::one();
    let mut powers = Vec::with_capacity(n);
    for _ in 0..n {
        powers.push(pk.encrypt(&power, rng)?);
        power = (power * &base) % pk.n();
    }
    Ok(EncodedInput { powers })
}
