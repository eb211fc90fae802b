//! Encrypted and decrypted images.

use std::io::{Read, Write};
use std::path::Path;

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};

use crate::error::{Error, Result};
use crate::float::{round_half_away, PlainFloat, BASE};
use crate::paillier::{ciphertext_width, PublicKey};

#[cfg(feature = "decrypt")]
use crate::paillier::{Ciphertext, SecureKey};

const CIMG_MAGIC: &[u8; 4] = b"CIMG";
const CIMG_VERSION: u16 = 1;

/// Render output: one shared exponent per channel, fixed-width mantissas and
/// the plaintext per-pixel sample counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncImage {
    width: u32,
    height: u32,
    gamma: u32,
    modulus_bits: u64,
    fingerprint: [u8; 32],
    exponents: Vec<i32>,
    mantissas: Vec<Vec<BigUint>>,
    sample_counts: Vec<u32>,
}

impl EncImage {
    pub fn new(
        width: u32,
        height: u32,
        gamma: u32,
        pk: &PublicKey,
        exponents: Vec<i32>,
        mantissas: Vec<Vec<BigUint>>,
        sample_counts: Vec<u32>,
    ) -> Result<Self> {
        let pixels = width as usize * height as usize;
        if !matches!(mantissas.len(), 1 | 3) || exponents.len() != mantissas.len() {
            return Err(Error::InvalidArgument("images have 1 or 3 channels".into()));
        }
        if let Some(bad) = mantissas.iter().find(|c| c.len() != pixels) {
            return Err(Error::DimensionMismatch {
                expected: pixels,
                actual: bad.len(),
            });
        }
        if sample_counts.len() != pixels {
            return Err(Error::DimensionMismatch {
                expected: pixels,
                actual: sample_counts.len(),
            });
        }
        Ok(EncImage {
            width,
            height,
            gamma,
            modulus_bits: pk.bits(),
            fingerprint: pk.fingerprint(),
            exponents,
            mantissas,
            sample_counts,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.mantissas.len()
    }

    pub fn gamma(&self) -> u32 {
        self.gamma
    }

    pub fn modulus_bits(&self) -> u64 {
        self.modulus_bits
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        self.fingerprint
    }

    pub fn matches_key(&self, pk: &PublicKey) -> bool {
        self.fingerprint == pk.fingerprint()
    }

    pub fn exponents(&self) -> &[i32] {
        &self.exponents
    }

    pub fn mantissas(&self, channel: usize) -> &[BigUint] {
        &self.mantissas[channel]
    }

    pub fn mantissas_mut(&mut self, channel: usize) -> &mut [BigUint] {
        &mut self.mantissas[channel]
    }

    pub fn sample_counts(&self) -> &[u32] {
        &self.sample_counts
    }

    /// `CIMG`, version u16, width u32, height u32, channels u8, base u32,
    /// gamma u32, modulus bits u32, key fingerprint, per-channel exponents
    /// i32, mantissas channel-major (big-endian, fixed width), sample counts
    /// u32. Integers other than mantissas are little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CIMG_MAGIC)?;
        w.write_all(&CIMG_VERSION.to_le_bytes())?;
        w.write_all(&self.width.to_le_bytes())?;
        w.write_all(&self.height.to_le_bytes())?;
        w.write_all(&[self.channels() as u8])?;
        w.write_all(&BASE.to_le_bytes())?;
        w.write_all(&self.gamma.to_le_bytes())?;
        w.write_all(&(self.modulus_bits as u32).to_le_bytes())?;
        w.write_all(&self.fingerprint)?;
        for e in &self.exponents {
            w.write_all(&e.to_le_bytes())?;
        }
        let width = ciphertext_width(self.modulus_bits);
        let mut buf = Vec::new();
        for channel in &self.mantissas {
            buf.clear();
            for m in channel {
                let bytes = m.to_bytes_be();
                if bytes.len() > width {
                    return Err(Error::Format("mantissa wider than the modulus allows".into()));
                }
                buf.resize(buf.len() + width - bytes.len(), 0);
                buf.extend_from_slice(&bytes);
            }
            w.write_all(&buf)?;
        }
        buf.clear();
        for c in &self.sample_counts {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        w.write_all(&buf)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != CIMG_MAGIC {
            return Err(Error::Format("not an encrypted image (bad magic)".into()));
        }
        let mut b2 = [0u8; 2];
        read_exact(&mut r, &mut b2)?;
        let version = u16::from_le_bytes(b2);
        if version != CIMG_VERSION {
            return Err(Error::Format(format!("unsupported image version {version}")));
        }
        let width = read_u32(&mut r)?;
        let height = read_u32(&mut r)?;
        let mut ch = [0u8; 1];
        read_exact(&mut r, &mut ch)?;
        let channels = ch[0] as usize;
        if !matches!(channels, 1 | 3) {
            return Err(Error::Format(format!("unsupported channel count {channels}")));
        }
        let base = read_u32(&mut r)?;
        if base != BASE {
            return Err(Error::Format(format!("unsupported base {base}")));
        }
        let gamma = read_u32(&mut r)?;
        let modulus_bits = u64::from(read_u32(&mut r)?);
        if modulus_bits == 0 {
            return Err(Error::Format("zero modulus length".into()));
        }
        let mut fingerprint = [0u8; 32];
        read_exact(&mut r, &mut fingerprint)?;
        let exponents = (0..channels)
            .map(|_| read_u32(&mut r).map(|v| v as i32))
            .collect::<Result<Vec<_>>>()?;
        let pixels = (width as usize)
            .checked_mul(height as usize)
            .ok_or_else(|| Error::Format("image size overflows".into()))?;
        let cw = ciphertext_width(modulus_bits);
        let mut mantissas = Vec::with_capacity(channels);
        for _ in 0..channels {
            let mut bytes = vec![0u8; pixels * cw];
            read_exact(&mut r, &mut bytes)?;
            mantissas.push(bytes.chunks_exact(cw).map(BigUint::from_bytes_be).collect());
        }
        let mut counts = vec![0u8; pixels * 4];
        read_exact(&mut r, &mut counts)?;
        let sample_counts = counts
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after image".into()));
        }
        Ok(EncImage {
            width,
            height,
            gamma,
            modulus_bits,
            fingerprint,
            exponents,
            mantissas,
            sample_counts,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// A decoded pixel channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PixelValue {
    Value(PlainFloat),
    /// The residue fell between the positive and negative ranges, which
    /// only happens for a wrong key or a tampered ciphertext. The low byte
    /// of the residue is kept as the displayed value.
    Overflow(u8),
    /// The mantissa is not a ciphertext under the key at all.
    Invalid,
}

impl PixelValue {
    pub fn value(&self) -> Option<&PlainFloat> {
        match self {
            PixelValue::Value(v) => Some(v),
            _ => None,
        }
    }

    /// Linear map of `[0, 1]` to `0..=255`, clamped, rounded half away.
    pub fn to_u8(&self) -> u8 {
        match self {
            PixelValue::Value(v) => tone_map(v),
            PixelValue::Overflow(b) => *b,
            PixelValue::Invalid => 0,
        }
    }
}

pub fn tone_map(v: &PlainFloat) -> u8 {
    let r = v.to_ratio();
    if r <= BigRational::zero() {
        return 0;
    }
    if r >= BigRational::one() {
        return 255;
    }
    let scaled = r * BigRational::from_integer(BigInt::from(255));
    round_half_away(scaled.numer(), scaled.denom())
        .to_u8()
        .expect("value in [0, 255]")
}

/// Decrypted or plaintext-rendered image, channel-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: u32,
    height: u32,
    pixels: Vec<Vec<PixelValue>>,
    sample_counts: Vec<u32>,
}

impl Image {
    pub fn new(
        width: u32,
        height: u32,
        pixels: Vec<Vec<PixelValue>>,
        sample_counts: Vec<u32>,
    ) -> Result<Self> {
        let n = width as usize * height as usize;
        if !matches!(pixels.len(), 1 | 3) || pixels.iter().any(|c| c.len() != n) || sample_counts.len() != n {
            return Err(Error::InvalidArgument("image shape mismatch".into()));
        }
        Ok(Image {
            width,
            height,
            pixels,
            sample_counts,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.pixels.len()
    }

    pub fn channel(&self, c: usize) -> &[PixelValue] {
        &self.pixels[c]
    }

    pub fn sample_counts(&self) -> &[u32] {
        &self.sample_counts
    }

    pub fn get(&self, channel: usize, x: u32, y: u32) -> &PixelValue {
        &self.pixels[channel][(y * self.width + x) as usize]
    }

    pub fn overflow_count(&self) -> usize {
        self.pixels
            .iter()
            .flatten()
            .filter(|p| !matches!(p, PixelValue::Value(_)))
            .count()
    }

    /// Channel values as `f64`; overflowed pixels become NaN.
    pub fn to_f64(&self, channel: usize) -> Vec<f64> {
        self.pixels[channel]
            .iter()
            .map(|p| p.value().map_or(f64::NAN, PlainFloat::to_f64))
            .collect()
    }

    /// Tone-mapped bytes, channels interleaved per pixel.
    pub fn to_u8(&self) -> Vec<u8> {
        let n = self.width as usize * self.height as usize;
        let mut out = Vec::with_capacity(n * self.channels());
        for i in 0..n {
            for c in &self.pixels {
                out.push(c[i].to_u8());
            }
        }
        out
    }

    /// Binary PGM for one channel, binary PPM for three.
    pub fn to_netpbm(&self) -> Vec<u8> {
        let tag = if self.channels() == 1 { "P5" } else { "P6" };
        let mut out = format!("{tag}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.to_u8());
        out
    }

    pub fn save_netpbm(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_netpbm())?;
        Ok(())
    }
}

#[cfg(feature = "decrypt")]
fn decrypt_pixel(m: &BigUint, exponent: i32, sk: &SecureKey) -> PixelValue {
    let pk = sk.public_key();
    let Ok(c) = Ciphertext::from_value(m.clone(), pk) else {
        return PixelValue::Invalid;
    };
    let Ok(residue) = sk.decrypt(&c) else {
        return PixelValue::Invalid;
    };
    match pk.decode_signed(&residue) {
        Ok(v) => PixelValue::Value(PlainFloat::new(v, exponent)),
        Err(_) => PixelValue::Overflow(residue.iter_u32_digits().next().unwrap_or(0) as u8),
    }
}

/// Decrypts every pixel. A key that does not match the image's fingerprint
/// is not rejected here; the result is noise. Check [`EncImage::matches_key`]
/// first when that matters.
#[cfg(feature = "decrypt")]
pub fn decrypt_image(image: &EncImage, sk: &SecureKey) -> Image {
    use rayon::prelude::*;
    let pixels = image
        .mantissas
        .iter()
        .zip(&image.exponents)
        .map(|(channel, &e)| channel.par_iter().map(|m| decrypt_pixel(m, e, sk)).collect())
        .collect();
    Image {
        width: image.width,
        height: image.height,
        pixels,
        sample_counts: image.sample_counts.clone(),
    }
}

/// Pearson correlation of two equally long samples; `None` when either is
/// constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated stream".into()),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
