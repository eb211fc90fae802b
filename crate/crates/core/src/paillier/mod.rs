//! The Paillier cryptosystem with generator `g = N + 1`.
//!
//! Plaintexts are residues modulo `N`, ciphertexts residues modulo `N²`.
//! Multiplying ciphertexts adds plaintexts; raising a ciphertext to a
//! plaintext power multiplies the plaintext by it. Nothing else is
//! available on ciphertexts, in particular no comparison.

mod keyfile;
pub mod prime;

pub use keyfile::{PublicKeyFile, SecureKeyFile};

use num_bigint::{BigInt, BigUint, RandBigInt, Sign};
use num_integer::Integer;
use num_traits::One;
use rand::{CryptoRng, Rng};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Production default modulus length.
pub const DEFAULT_KEY_BITS: u64 = 2048;
/// Smallest modulus accepted by key generation.
pub const MIN_KEY_BITS: u64 = 16;

/// An element of `Z*_{N²}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Ciphertext(BigUint);

impl Ciphertext {
    /// Wraps a raw value, checking it lies in `[0, N²)`.
    pub fn from_value(value: BigUint, pk: &PublicKey) -> Result<Self> {
        if value >= pk.n_squared {
            return Err(Error::InvalidCiphertext);
        }
        Ok(Ciphertext(value))
    }

    pub fn value(&self) -> &BigUint {
        &self.0
    }

    pub fn into_value(self) -> BigUint {
        self.0
    }

    /// Fixed-width big-endian encoding, `width` bytes.
    pub fn to_bytes_be(&self, width: usize) -> Vec<u8> {
        let raw = self.0.to_bytes_be();
        let mut out = vec![0u8; width.saturating_sub(raw.len())];
        out.extend_from_slice(&raw);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PublicKey {
    n: BigUint,
    g: BigUint,
    n_squared: BigUint,
    max_plain: BigUint,
}

impl PublicKey {
    /// Builds the public key for modulus `n`; `g` is always `n + 1`.
    pub fn from_modulus(n: BigUint) -> Result<Self> {
        if n.bits() < MIN_KEY_BITS || n.is_even() {
            return Err(Error::InvalidKey(format!(
                "modulus must be odd and at least {MIN_KEY_BITS} bits"
            )));
        }
        let g = &n + 1u32;
        let n_squared = &n * &n;
        let max_plain = (&n - 1u32) / 3u32;
        Ok(PublicKey {
            n,
            g,
            n_squared,
            max_plain,
        })
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn g(&self) -> &BigUint {
        &self.g
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.n_squared
    }

    /// Largest positive plaintext magnitude, `floor((N - 1) / 3)`.
    ///
    /// `[0, max_plain]` holds non-negative values, `[N - max_plain, N)`
    /// negative ones in two's complement, and the middle third is a dead
    /// zone that only arithmetic overflow can reach.
    pub fn max_plain(&self) -> &BigUint {
        &self.max_plain
    }

    pub fn bits(&self) -> u64 {
        self.n.bits()
    }

    /// Bytes of a fixed-width serialized ciphertext: `ceil(2k / 8)`.
    pub fn ciphertext_width(&self) -> usize {
        ciphertext_width(self.bits())
    }

    /// SHA-256 of the big-endian modulus.
    pub fn fingerprint(&self) -> [u8; 32] {
        let digest = Sha256::digest(self.n.to_bytes_be());
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        out
    }

    pub fn fingerprint_hex(&self) -> String {
        hex::encode(self.fingerprint())
    }

    /// Maps a signed integer into `Z_N` using two's complement.
    pub fn encode_signed(&self, v: &BigInt) -> Result<BigUint> {
        let magnitude = v.magnitude();
        if *magnitude > self.max_plain {
            return Err(Error::PlaintextOutOfRange);
        }
        Ok(match v.sign() {
            Sign::Minus => &self.n - magnitude,
            _ => magnitude.clone(),
        })
    }

    /// Inverse of [`encode_signed`](Self::encode_signed); dead-zone residues
    /// are reported as [`Error::Overflow`].
    pub fn decode_signed(&self, m: &BigUint) -> Result<BigInt> {
        if *m >= self.n {
            return Err(Error::PlaintextOutOfRange);
        }
        if *m <= self.max_plain {
            Ok(BigInt::from(m.clone()))
        } else if *m >= &self.n - &self.max_plain {
            Ok(-BigInt::from(&self.n - m))
        } else {
            Err(Error::Overflow)
        }
    }

    /// Residue of an arbitrary signed integer modulo `N`.
    pub fn reduce(&self, v: &BigInt) -> BigUint {
        let n = BigInt::from(self.n.clone());
        v.mod_floor(&n).to_biguint().expect("mod_floor is non-negative")
    }

    /// Encrypts `m` with a fresh obfuscation factor `r^N`.
    pub fn encrypt<R: Rng + CryptoRng + ?Sized>(
        &self,
        m: &BigUint,
        rng: &mut R,
    ) -> Result<Ciphertext> {
        let c = self.encrypt_unobfuscated(m)?;
        Ok(self.obfuscate(&c, rng))
    }

    /// Deterministic encryption with `r = 1`. Not semantically secure: only
    /// for benchmarks and for values obfuscated later.
    pub fn encrypt_unobfuscated(&self, m: &BigUint) -> Result<Ciphertext> {
        if *m >= self.n {
            return Err(Error::PlaintextOutOfRange);
        }
        // g^m = (1 + N)^m = 1 + mN (mod N²)
        let gm = (m * &self.n + 1u32) % &self.n_squared;
        Ok(Ciphertext(gm))
    }

    /// Re-randomizes a ciphertext: `c * r^N mod N²` for fresh `r`.
    pub fn obfuscate<R: Rng + CryptoRng + ?Sized>(&self, c: &Ciphertext, rng: &mut R) -> Ciphertext {
        let r = self.random_unit(rng);
        let rn = r.modpow(&self.n, &self.n_squared);
        Ciphertext((&c.0 * rn) % &self.n_squared)
    }

    /// Uniform `r` in `[1, N)` with `gcd(r, N) = 1`.
    fn random_unit<R: Rng + ?Sized>(&self, rng: &mut R) -> BigUint {
        let one = BigUint::one();
        loop {
            let r = rng.gen_biguint_range(&one, &self.n);
            if r.gcd(&self.n).is_one() {
                return r;
            }
        }
    }

    /// Homomorphic addition: decrypts to `(m1 + m2) mod N`.
    pub fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Ciphertext {
        Ciphertext((&a.0 * &b.0) % &self.n_squared)
    }

    /// Homomorphic plaintext scaling: decrypts to `(m * d) mod N`.
    /// Negative `d` exponentiates the modular inverse.
    pub fn scale(&self, c: &Ciphertext, d: &BigInt) -> Result<Ciphertext> {
        match d.sign() {
            Sign::NoSign => Ok(Ciphertext(BigUint::one())),
            Sign::Plus => Ok(Ciphertext(c.0.modpow(d.magnitude(), &self.n_squared))),
            Sign::Minus => {
                let inv = self.negate(c)?;
                Ok(Ciphertext(inv.0.modpow(d.magnitude(), &self.n_squared)))
            }
        }
    }

    /// Scaling by a non-negative factor.
    pub fn scale_unsigned(&self, c: &Ciphertext, d: &BigUint) -> Ciphertext {
        Ciphertext(c.0.modpow(d, &self.n_squared))
    }

    /// Additive inverse: `c^-1 mod N²` decrypts to `N - m`.
    pub fn negate(&self, c: &Ciphertext) -> Result<Ciphertext> {
        c.0.modinv(&self.n_squared)
            .map(Ciphertext)
            .ok_or(Error::InvalidCiphertext)
    }

    /// `a - b` on plaintexts.
    pub fn sub(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
        Ok(self.add(a, &self.negate(b)?))
    }
}

pub fn ciphertext_width(modulus_bits: u64) -> usize {
    (2 * modulus_bits).div_ceil(8) as usize
}

/// The secret factorization with the constants the CRT decryption needs.
#[cfg(feature = "decrypt")]
#[derive(Clone)]
pub struct SecureKey {
    p: BigUint,
    q: BigUint,
    p_squared: BigUint,
    q_squared: BigUint,
    h_p: BigUint,
    h_q: BigUint,
    p_inv_mod_q: BigUint,
    public: PublicKey,
}

#[cfg(feature = "decrypt")]
impl std::fmt::Debug for SecureKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SecureKey")
            .field("bits", &self.public.bits())
            .finish_non_exhaustive()
    }
}

#[cfg(feature = "decrypt")]
impl SecureKey {
    pub fn from_primes(p: BigUint, q: BigUint) -> Result<Self> {
        if p == q {
            return Err(Error::InvalidKey("p and q must differ".into()));
        }
        if p < BigUint::from(3u32) || q < BigUint::from(3u32) || p.is_even() || q.is_even() {
            return Err(Error::InvalidKey("p and q must be odd primes".into()));
        }
        let public = PublicKey::from_modulus(&p * &q)?;
        let p_squared = &p * &p;
        let q_squared = &q * &q;
        let h_p = h_function(&p, &p_squared, public.g())?;
        let h_q = h_function(&q, &q_squared, public.g())?;
        let p_inv_mod_q = p
            .modinv(&q)
            .ok_or_else(|| Error::InvalidKey("p is not invertible modulo q".into()))?;
        Ok(SecureKey {
            p,
            q,
            p_squared,
            q_squared,
            h_p,
            h_q,
            p_inv_mod_q,
            public,
        })
    }

    pub fn p(&self) -> &BigUint {
        &self.p
    }

    pub fn q(&self) -> &BigUint {
        &self.q
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.public
    }

    /// CRT decryption: `m_p`, `m_q` from the `L`/`H` functions modulo `p²`
    /// and `q²`, recombined as `m_p + ((m_q - m_p) p^-1 mod q) p`.
    pub fn decrypt(&self, c: &Ciphertext) -> Result<BigUint> {
        let n = self.public.n();
        if c.0 >= *self.public.n_squared() || !c.0.gcd(n).is_one() {
            return Err(Error::InvalidCiphertext);
        }
        let m_p = (l_function(&c.0.modpow(&(&self.p - 1u32), &self.p_squared), &self.p)
            * &self.h_p)
            % &self.p;
        let m_q = (l_function(&c.0.modpow(&(&self.q - 1u32), &self.q_squared), &self.q)
            * &self.h_q)
            % &self.q;
        // (m_q - m_p) mod q without leaving the naturals
        let diff = (&m_q + &self.q - (&m_p % &self.q)) % &self.q;
        Ok(m_p + ((diff * &self.p_inv_mod_q) % &self.q) * &self.p)
    }

    /// Decrypts and decodes two's complement.
    pub fn decrypt_signed(&self, c: &Ciphertext) -> Result<BigInt> {
        self.public.decode_signed(&self.decrypt(c)?)
    }
}

#[cfg(feature = "decrypt")]
fn l_function(x: &BigUint, y: &BigUint) -> BigUint {
    (x - 1u32) / y
}

#[cfg(feature = "decrypt")]
fn h_function(x: &BigUint, x_squared: &BigUint, g: &BigUint) -> Result<BigUint> {
    let gx = g.modpow(&(x - 1u32), x_squared);
    l_function(&gx, x)
        .modinv(x)
        .ok_or_else(|| Error::InvalidKey("H function is not invertible".into()))
}

/// Generates a key pair whose modulus has exactly `bits` bits.
#[cfg(feature = "decrypt")]
pub fn generate_keys<R: Rng + CryptoRng + ?Sized>(
    bits: u64,
    rng: &mut R,
) -> Result<(SecureKey, PublicKey)> {
    if bits < MIN_KEY_BITS || !bits.is_multiple_of(2) {
        return Err(Error::InvalidKeyLength(bits));
    }
    loop {
        let p = prime::random_prime(bits / 2, rng);
        let q = loop {
            let q = prime::random_prime(bits / 2, rng);
            if q != p {
                break q;
            }
        };
        if (&p * &q).bits() != bits {
            continue;
        }
        let sk = SecureKey::from_primes(p, q)?;
        let pk = sk.public_key().clone();
        return Ok((sk, pk));
    }
}

/// Helper for callers holding an `i64` factor.
pub fn scale_i64(pk: &PublicKey, c: &Ciphertext, d: i64) -> Result<Ciphertext> {
    pk.scale(c, &BigInt::from(d))
}

#[cfg(all(test, feature = "decrypt"))]
mod tests {
    use super::*;
    use num_traits::{ToPrimitive, Zero};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn keys(bits: u64, seed: u64) -> (SecureKey, PublicKey, ChaCha20Rng) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let (sk, pk) = generate_keys(bits, &mut rng).unwrap();
        (sk, pk, rng)
    }

    /// Textbook decryption with lambda = lcm(p-1, q-1), no CRT.
    fn naive_decrypt(sk: &SecureKey, c: &Ciphertext) -> BigUint {
        let pk = sk.public_key();
        let lambda = (sk.p() - 1u32).lcm(&(sk.q() - 1u32));
        let l = |x: BigUint| (x - 1u32) / pk.n();
        let mu = l(pk.g().modpow(&lambda, pk.n_squared()))
            .modinv(pk.n())
            .unwrap();
        (l(c.value().modpow(&lambda, pk.n_squared())) * mu) % pk.n()
    }

    #[test]
    fn rejects_bad_key_lengths() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        assert!(matches!(
            generate_keys(15, &mut rng),
            Err(Error::InvalidKeyLength(15))
        ));
        assert!(matches!(
            generate_keys(8, &mut rng),
            Err(Error::InvalidKeyLength(8))
        ));
        assert!(matches!(
            generate_keys(65, &mut rng),
            Err(Error::InvalidKeyLength(65))
        ));
    }

    #[test]
    fn modulus_has_exact_length_and_fixed_generator() {
        for (bits, seed) in [(16, 1), (64, 2), (128, 3), (256, 4)] {
            let (sk, pk, _) = keys(bits, seed);
            assert_eq!(pk.bits(), bits);
            assert_eq!(pk.g(), &(pk.n() + 1u32));
            assert_eq!(pk.n_squared(), &(pk.n() * pk.n()));
            assert_ne!(sk.p(), sk.q());
        }
    }

    #[test]
    fn keygen_is_deterministic_under_fixed_seed() {
        let (sk1, pk1, _) = keys(64, 99);
        let (sk2, pk2, _) = keys(64, 99);
        assert_eq!(pk1, pk2);
        assert_eq!(sk1.p(), sk2.p());
        assert_eq!(sk1.q(), sk2.q());
    }

    #[test]
    fn zero_without_obfuscation_is_one() {
        let (_, pk, _) = keys(64, 5);
        let c = pk.encrypt_unobfuscated(&BigUint::zero()).unwrap();
        assert!(c.value().is_one());
    }

    #[test]
    fn roundtrip_and_crt_matches_naive() {
        let (sk, pk, mut rng) = keys(64, 6);
        for i in 0..1000 {
            let m = rng.gen_biguint_below(pk.n());
            let c = pk.encrypt(&m, &mut rng).unwrap();
            assert_eq!(sk.decrypt(&c).unwrap(), m);
            if i < 100 {
                assert_eq!(naive_decrypt(&sk, &c), m);
            }
        }
        assert_eq!(
            sk.decrypt(&pk.encrypt(&BigUint::from(42u32), &mut rng).unwrap())
                .unwrap(),
            BigUint::from(42u32)
        );
    }

    #[test]
    fn rejects_plaintext_at_modulus() {
        let (_, pk, mut rng) = keys(64, 7);
        assert!(matches!(
            pk.encrypt(pk.n(), &mut rng),
            Err(Error::PlaintextOutOfRange)
        ));
    }

    #[test]
    fn decrypt_rejects_non_units() {
        let (sk, pk, _) = keys(64, 8);
        let bad = Ciphertext::from_value(sk.p().clone(), &pk).unwrap();
        assert!(matches!(sk.decrypt(&bad), Err(Error::InvalidCiphertext)));
        assert!(Ciphertext::from_value(pk.n_squared().clone(), &pk).is_err());
    }

    #[test]
    fn obfuscated_encryptions_are_distinct() {
        let (sk, pk, mut rng) = keys(64, 9);
        let m = BigUint::from(1234u32);
        let cs: Vec<_> = (0..100).map(|_| pk.encrypt(&m, &mut rng).unwrap()).collect();
        let unique: std::collections::HashSet<_> = cs.iter().collect();
        assert_eq!(unique.len(), 100);
        assert!(cs.iter().all(|c| sk.decrypt(c).unwrap() == m));
    }

    #[test]
    fn small_homomorphic_cases() {
        let (sk, pk, mut rng) = keys(64, 10);
        let e = |v: u64, rng: &mut ChaCha20Rng| pk.encrypt(&BigUint::from(v), rng).unwrap();
        let dec = |c: &Ciphertext| sk.decrypt(c).unwrap();

        let sum = pk.add(&e(3, &mut rng), &e(4, &mut rng));
        assert_eq!(dec(&sum), BigUint::from(7u32));

        let top = pk.encrypt(&(pk.n() - 1u32), &mut rng).unwrap();
        assert!(dec(&pk.add(&top, &e(1, &mut rng))).is_zero());

        let five = e(5, &mut rng);
        assert_eq!(dec(&scale_i64(&pk, &five, 3).unwrap()), BigUint::from(15u32));
        assert_eq!(dec(&scale_i64(&pk, &five, 1).unwrap()), BigUint::from(5u32));
        assert!(dec(&scale_i64(&pk, &five, 0).unwrap()).is_zero());
        let by_n_minus_one = pk.scale(&five, &BigInt::from(pk.n() - 1u32)).unwrap();
        assert_eq!(dec(&by_n_minus_one), pk.n() - 5u32);
        assert_eq!(dec(&pk.scale(&five, &BigInt::from(-1)).unwrap()), pk.n() - 5u32);

        let m = e(77, &mut rng);
        assert!(dec(&pk.add(&m, &pk.negate(&m).unwrap())).is_zero());
        assert_eq!(dec(&pk.negate(&pk.negate(&m).unwrap()).unwrap()), BigUint::from(77u32));
        let diff = pk.add(&e(9, &mut rng), &pk.negate(&e(4, &mut rng)).unwrap());
        assert_eq!(dec(&diff), BigUint::from(5u32));
    }

    #[test]
    fn folded_sum_matches_plaintext_accumulator() {
        let (sk, pk, mut rng) = keys(64, 11);
        let mut acc_plain = BigUint::zero();
        let mut acc = pk.encrypt_unobfuscated(&BigUint::zero()).unwrap();
        for _ in 0..100 {
            let m = rng.gen_biguint_below(pk.n());
            acc_plain = (acc_plain + &m) % pk.n();
            acc = pk.add(&acc, &pk.encrypt(&m, &mut rng).unwrap());
        }
        assert_eq!(sk.decrypt(&acc).unwrap(), acc_plain);
    }

    #[test]
    fn obfuscate_preserves_plaintext_and_hides_trivial_ciphertext() {
        let (sk, pk, mut rng) = keys(64, 12);
        let c = pk.encrypt(&BigUint::from(31u32), &mut rng).unwrap();
        let mut seen = std::collections::HashSet::new();
        for _ in 0..100 {
            let o = pk.obfuscate(&c, &mut rng);
            assert_ne!(o, c);
            assert_eq!(sk.decrypt(&o).unwrap(), BigUint::from(31u32));
            seen.insert(o);
        }
        assert_eq!(seen.len(), 100);
        let zero = pk.encrypt_unobfuscated(&BigUint::zero()).unwrap();
        assert!(!pk.obfuscate(&zero, &mut rng).value().is_one());
    }

    #[test]
    fn signed_encoding_thirds() {
        let (_, pk, _) = keys(64, 13);
        let mp = BigInt::from(pk.max_plain().clone());
        assert_eq!(pk.decode_signed(&pk.encode_signed(&mp).unwrap()).unwrap(), mp);
        assert_eq!(pk.decode_signed(&pk.encode_signed(&-&mp).unwrap()).unwrap(), -&mp);
        assert!(pk.encode_signed(&(&mp + 1)).is_err());
        assert!(matches!(
            pk.decode_signed(&(pk.max_plain() + 1u32)),
            Err(Error::Overflow)
        ));
        assert_eq!(
            pk.encode_signed(&BigInt::from(-5)).unwrap(),
            pk.n() - 5u32
        );
        assert_eq!(pk.decode_signed(&(pk.n() - 5u32)).unwrap().to_i64(), Some(-5));
    }

    #[test]
    fn ciphertext_order_is_uncorrelated_with_plaintext_order() {
        let (_, pk, mut rng) = keys(64, 14);
        let mut agree = 0;
        for _ in 0..1000 {
            let a = rng.gen_biguint_below(pk.max_plain());
            let b = rng.gen_biguint_below(pk.max_plain());
            let ca = pk.encrypt(&a, &mut rng).unwrap();
            let cb = pk.encrypt(&b, &mut rng).unwrap();
            if (a < b) == (ca.value() < cb.value()) {
                agree += 1;
            }
        }
        let frac = agree as f64 / 1000.0;
        assert!((0.4..=0.6).contains(&frac), "agreement fraction {frac}");
    }
}
