//! Privacy-preserving volume rendering over Paillier ciphertexts.
//!
//! A trusted client encrypts a volume voxel by voxel ([`volume`]), an
//! untrusted server ray-casts directly on the ciphertexts ([`render`]) using
//! only homomorphic addition and plaintext scaling, and the client decrypts
//! the resulting image ([`image`]).

pub mod error;
pub mod float;
pub mod image;
pub mod lut;
pub mod paillier;
pub mod render;
pub mod volume;

pub use error::{Error, Result};
pub use float::{equalize_exponents, EncFloat, PlainFloat, BASE, DEFAULT_GAMMA};
#[cfg(feature = "decrypt")]
pub use float::decrypt_float;
pub use paillier::{Ciphertext, PublicKey};
#[cfg(feature = "decrypt")]
pub use paillier::{generate_keys, SecureKey};
pub use image::{EncImage, Image, PixelValue};
#[cfg(feature = "decrypt")]
pub use image::decrypt_image;
pub use lut::{encode_input, EncodedInput, LookupTable};
pub use render::{render, render_plaintext, Camera, OpCounts, RenderMode, RenderRequest, TransferNode};
pub use volume::{
    encode_density, encrypt_volume, make_synthetic_volume, storage_size, EncVolume, EncryptOptions, PlainVolume,
    Volume,
};
