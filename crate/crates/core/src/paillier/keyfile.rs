//! `.pk` / `.sk` key documents: JSON objects with lowercase big-endian hex
//! integers, `{n, g}` for the public key and `{p, q}` for the secure key.

use std::path::Path;

use num_bigint::BigUint;
use num_traits::Num;
use serde::{Deserialize, Serialize};

use super::PublicKey;
#[cfg(feature = "decrypt")]
use super::SecureKey;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicKeyFile {
    pub n: String,
    pub g: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecureKeyFile {
    pub p: String,
    pub q: String,
}

pub(crate) fn to_hex(v: &BigUint) -> String {
    v.to_str_radix(16)
}

pub(crate) fn from_hex(field: &str, s: &str) -> Result<BigUint> {
    if s.is_empty() || s.bytes().any(|b| b.is_ascii_uppercase()) {
        return Err(Error::InvalidKey(format!(
            "field {field} must be non-empty lowercase hex"
        )));
    }
    BigUint::from_str_radix(s, 16)
        .map_err(|_| Error::InvalidKey(format!("field {field} is not valid hex")))
}

impl PublicKey {
    pub fn to_file(&self) -> PublicKeyFile {
        PublicKeyFile {
            n: to_hex(self.n()),
            g: to_hex(self.g()),
        }
    }

    pub fn from_file(doc: &PublicKeyFile) -> Result<Self> {
        let pk = PublicKey::from_modulus(from_hex("n", &doc.n)?)?;
        if from_hex("g", &doc.g)? != *pk.g() {
            return Err(Error::InvalidKey("g must equal n + 1".into()));
        }
        Ok(pk)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("key document serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_file(&serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(feature = "decrypt")]
impl SecureKey {
    pub fn to_file(&self) -> SecureKeyFile {
        SecureKeyFile {
            p: to_hex(self.p()),
            q: to_hex(self.q()),
        }
    }

    pub fn from_file(doc: &SecureKeyFile) -> Result<Self> {
        SecureKey::from_primes(from_hex("p", &doc.p)?, from_hex("q", &doc.q)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("key document serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_file(&serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(all(test, feature = "decrypt"))]
mod tests {
    use super::super::generate_keys;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn documents_use_exact_field_names() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let (sk, pk) = generate_keys(64, &mut rng).unwrap();
        let pk_doc: serde_json::Value = serde_json::from_str(&pk.to_json()).unwrap();
        let sk_doc: serde_json::Value = serde_json::from_str(&sk.to_json()).unwrap();
        let keys = |v: &serde_json::Value| {
            let mut k: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
            k.sort();
            k
        };
        assert_eq!(keys(&pk_doc), ["g", "n"]);
        assert_eq!(keys(&sk_doc), ["p", "q"]);
        assert_eq!(pk_doc["n"].as_str().unwrap(), pk.n().to_str_radix(16));

        let pk2 = PublicKey::from_json(&pk.to_json()).unwrap();
        let sk2 = SecureKey::from_json(&sk.to_json()).unwrap();
        assert_eq!(pk2, pk);
        assert_eq!(sk2.public_key(), &pk);
    }

    #[test]
    fn rejects_malformed_documents() {
        assert!(PublicKey::from_json(r#"{"n":"zz","g":"1"}"#).is_err());
        assert!(PublicKey::from_json(r#"{"n":"ABCD","g":"abce"}"#).is_err());
        assert!(PublicKey::from_json(r#"{"n":"c5b1"}"#).is_err());
        // g != n + 1
        assert!(PublicKey::from_json(r#"{"n":"c5b1","g":"c5b1"}"#).is_err());
        assert!(SecureKey::from_json(r#"{"p":"b","q":"b"}"#).is_err());
    }
}
