use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("key length must be an even number of bits >= 16, got {0}")]
    InvalidKeyLength(u64),
    #[error("invalid key material: {0}")]
    InvalidKey(String),
    #[error("plaintext out of range for the public key modulus")]
    PlaintextOutOfRange,
    #[error("ciphertext is not a unit modulo N (corrupted or foreign ciphertext)")]
    InvalidCiphertext,
    #[error("value {0} is not invertible modulo the key modulus")]
    NotInvertible(String),
    #[error("decrypted mantissa lies in the overflow dead zone")]
    Overflow,
    #[error("precision exhausted: {0}")]
    PrecisionExhausted(String),
    #[error("cannot increase exponent from {from} to {to} on an encrypted mantissa")]
    ExponentIncrease { from: i32, to: i32 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("duplicate lookup-table domain value {0}")]
    DuplicateDomain(String),
    #[error("sample position {0:?} is outside the volume")]
    OutOfBounds([f64; 3]),
    #[error("render mode {mode} is incompatible with encoding dimension {encoding_dim}")]
    ModeMismatch { mode: String, encoding_dim: usize },
    #[error("degenerate camera: {0}")]
    DegenerateCamera(String),
    #[error("key fingerprint mismatch")]
    FingerprintMismatch,
    #[error("malformed container: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
