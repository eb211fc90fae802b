//! Plaintext volumes, the density-to-vector encoding, volume encryption and
//! the `.cvol` container.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use num_bigint::{BigInt, BigUint};
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::{CryptoRng, Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::float::{base_pow, EncFloat, PlainFloat, BASE};
use crate::paillier::{Ciphertext, PublicKey};

pub const MIN_BIT_DEPTH: u8 = 8;
pub const MAX_BIT_DEPTH: u8 = 16;

const CVOL_MAGIC: &[u8; 4] = b"CVOL";
const CVOL_VERSION: u16 = 1;
const RAW_MAGIC: &[u8; 4] = b"RVOL";
const RAW_VERSION: u16 = 1;
const ENCRYPT_CHUNK: usize = 2048;

/// Scalar voxel grid, x fastest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Volume {
    dims: [usize; 3],
    bit_depth: u8,
    voxels: Vec<u16>,
}

impl Volume {
    pub fn new(dims: [usize; 3], bit_depth: u8, voxels: Vec<u16>) -> Result<Self> {
        if !(MIN_BIT_DEPTH..=MAX_BIT_DEPTH).contains(&bit_depth) {
            return Err(Error::InvalidArgument(format!("bit depth {bit_depth} outside 8..=16")));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidArgument("volume dimensions must be positive".into()));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if voxels.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: voxels.len(),
            });
        }
        let max = max_voxel(bit_depth);
        if let Some(v) = voxels.iter().find(|&&v| u32::from(v) > max) {
            return Err(Error::InvalidArgument(format!(
                "voxel value {v} does not fit in {bit_depth} bits"
            )));
        }
        Ok(Volume {
            dims,
            bit_depth,
            voxels,
        })
    }

    pub fn filled(dims: [usize; 3], bit_depth: u8, value: u16) -> Result<Self> {
        Self::new(dims, bit_depth, vec![value; dims[0] * dims[1] * dims[2]])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn bit_depth(&self) -> u8 {
        self.bit_depth
    }

    pub fn voxels(&self) -> &[u16] {
        &self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        linear_index(self.dims, x, y, z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u16 {
        self.voxels[self.index(x, y, z)]
    }

    /// Voxel value mapped to `[0, 1]` by dividing by `2^bit_depth - 1`.
    pub fn normalized(&self, i: usize) -> BigRational {
        BigRational::new(
            BigInt::from(self.voxels[i]),
            BigInt::from(max_voxel(self.bit_depth)),
        )
    }

    pub fn histogram(&self) -> BTreeMap<u16, usize> {
        let mut h = BTreeMap::new();
        for &v in &self.voxels {
            *h.entry(v).or_insert(0) += 1;
        }
        h
    }

    /// Raw container: `RVOL`, version, dims, bit depth, little-endian voxels
    /// (one byte each up to 8 bits, two bytes otherwise).
    pub fn write_raw<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(RAW_MAGIC)?;
        w.write_all(&RAW_VERSION.to_le_bytes())?;
        for d in self.dims {
            w.write_all(&dim_u32(d)?.to_le_bytes())?;
        }
        w.write_all(&[self.bit_depth])?;
        if self.bit_depth <= 8 {
            let bytes: Vec<u8> = self.voxels.iter().map(|&v| v as u8).collect();
            w.write_all(&bytes)?;
        } else {
            let mut bytes = Vec::with_capacity(self.voxels.len() * 2);
            for v in &self.voxels {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn read_raw<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != RAW_MAGIC {
            return Err(Error::Format("not a raw volume (bad magic)".into()));
        }
        let version = read_u16(&mut r)?;
        if version != RAW_VERSION {
            return Err(Error::Format(format!("unsupported raw volume version {version}")));
        }
        let dims = [read_u32(&mut r)?, read_u32(&mut r)?, read_u32(&mut r)?].map(|d| d as usize);
        let mut bd = [0u8; 1];
        read_exact(&mut r, &mut bd)?;
        let count = checked_voxels(dims)?;
        let voxels = if bd[0] <= 8 {
            let mut bytes = vec![0u8; count];
            read_exact(&mut r, &mut bytes)?;
            bytes.into_iter().map(u16::from).collect()
        } else {
            let mut bytes = vec![0u8; count * 2];
            read_exact(&mut r, &mut bytes)?;
            bytes
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect()
        };
        Volume::new(dims, bd[0], voxels)
    }

    pub fn save_raw(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_raw(std::io::BufWriter::new(f))
    }

    pub fn load_raw(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_raw(std::io::BufReader::new(f))
    }
}

fn max_voxel(bit_depth: u8) -> u32 {
    (1u32 << bit_depth) - 1
}

pub(crate) fn linear_index(dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

pub const PHANTOM_CUBE: u16 = 230;
pub const PHANTOM_SPHERE: u16 = 80;
pub const PHANTOM_CORNER: u16 = 160;

/// Centre of the phantom's corner sphere, in voxel coordinates.
pub fn phantom_corner_center(size: usize) -> [f64; 3] {
    let s = size as f64;
    [0.15 * s, 0.85 * s, 0.15 * s]
}

/// 8-bit test phantom: a cube inside a concentric sphere, plus a small sphere
/// near the corner at low x, high y, low z.
pub fn make_synthetic_volume(size: usize) -> Result<Volume> {
    if size < 16 {
        return Err(Error::InvalidArgument(format!("phantom size {size} is below 16")));
    }
    let s = size as f64;
    let c = (s - 1.0) / 2.0;
    let half_edge = 0.15 * s;
    let sphere_r2 = (0.35 * s).powi(2);
    let corner = phantom_corner_center(size);
    let corner_r2 = (0.1 * s).powi(2);
    let mut voxels = Vec::with_capacity(size * size * size);
    for z in 0..size {
        for y in 0..size {
            for x in 0..size {
                let p = [x as f64, y as f64, z as f64];
                let d2 = |q: [f64; 3]| (0..3).map(|i| (p[i] - q[i]).powi(2)).sum::<f64>();
                let v = if p.iter().all(|&a| (a - c).abs() <= half_edge) {
                    PHANTOM_CUBE
                } else if d2([c; 3]) <= sphere_r2 {
                    PHANTOM_SPHERE
                } else if d2(corner) <= corner_r2 {
                    PHANTOM_CORNER
                } else {
                    0
                };
                voxels.push(v);
            }
        }
    }
    Volume::new([size; 3], 8, voxels)
}

/// Unit vector encoding of a normalized density.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityVector(Vec<f64>);

impl DensityVector {
    pub fn components(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &DensityVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Components quantized to `digits` fractional digits.
    pub fn quantized(&self, digits: u32) -> Vec<PlainFloat> {
        self.0
            .iter()
            .map(|&c| PlainFloat::from_f64(c, digits).expect("components are finite"))
            .collect()
    }
}

pub fn encode_density(density: f64, dim: usize) -> Result<DensityVector> {
    let exact = BigRational::from_float(density)
        .ok_or_else(|| Error::InvalidArgument(format!("density {density} is not finite")))?;
    encode_density_exact(&exact, dim)
}

/// Hat-function encoding: at most two adjacent nonzero components, then
/// normalized. `s`, `f` and the fractional part are exact rationals.
pub fn encode_density_exact(density: &BigRational, dim: usize) -> Result<DensityVector> {
    if dim < 2 {
        return Err(Error::InvalidArgument(format!("encoding dimension {dim} is below 2")));
    }
    if density < &BigRational::zero() || density > &BigRational::one() {
        return Err(Error::InvalidArgument(format!("density {density} outside [0, 1]")));
    }
    let s = density * BigRational::from_integer(BigInt::from(2 * (dim - 1)));
    let floor_s = s.floor().to_integer();
    let frac = &s - BigRational::from_integer(floor_s.clone());
    // f = (floor(s) + 1) / 2 is an integer exactly when floor(s) is odd
    let d = ((&floor_s + 1u32) / 2u32).to_usize().expect("index below dim");
    let f_is_integer = floor_s.is_odd();

    let mut v = vec![BigRational::zero(); dim];
    v[d] = BigRational::one();
    if d > 0 && f_is_integer {
        v[d - 1] = BigRational::one() - &frac;
    } else if d + 1 < dim && !f_is_integer {
        v[d + 1] = frac;
    }
    let v: Vec<f64> = v.iter().map(|c| c.to_f64().unwrap_or(0.0)).collect();
    let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
    Ok(DensityVector(v.into_iter().map(|c| c / norm).collect()))
}

/// Plaintext payload: per voxel, the `d` fixed-point values that get
/// encrypted. The plaintext renderer runs on this directly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlainVolume {
    dims: [usize; 3],
    encoding_dim: usize,
    gamma: u32,
    payload: Vec<PlainFloat>,
}

impl PlainVolume {
    pub fn encode(volume: &Volume, encoding_dim: usize, gamma: u32) -> Result<Self> {
        if encoding_dim == 0 {
            return Err(Error::InvalidArgument("encoding dimension must be positive".into()));
        }
        let payload: Vec<PlainFloat> = if encoding_dim == 1 {
            (0..volume.len())
                .into_par_iter()
                .map(|i| at_exponent(PlainFloat::from_ratio(&volume.normalized(i), gamma), gamma))
                .collect()
        } else {
            let levels = max_voxel(volume.bit_depth()) as usize + 1;
            let codes = (0..levels)
                .map(|v| {
                    let rho = BigRational::new(BigInt::from(v), BigInt::from(levels - 1));
                    Ok(encode_density_exact(&rho, encoding_dim)?
                        .quantized(gamma)
                        .into_iter()
                        .map(|c| at_exponent(c, gamma))
                        .collect::<Vec<_>>())
                })
                .collect::<Result<Vec<_>>>()?;
            volume
                .voxels()
                .iter()
                .flat_map(|&v| codes[v as usize].iter().cloned())
                .collect()
        };
        Ok(PlainVolume {
            dims: volume.dims(),
            encoding_dim,
            gamma,
            payload,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn encoding_dim(&self) -> usize {
        self.encoding_dim
    }

    pub fn gamma(&self) -> u32 {
        self.gamma
    }

    pub fn payload(&self) -> &[PlainFloat] {
        &self.payload
    }

    pub fn voxel(&self, i: usize) -> &[PlainFloat] {
        &self.payload[i * self.encoding_dim..(i + 1) * self.encoding_dim]
    }
}

/// Every payload value carries exponent `-gamma`, so the plaintext exponent
/// sidecar says nothing about the voxel.
fn at_exponent(v: PlainFloat, gamma: u32) -> PlainFloat {
    v.with_exponent(-(gamma as i32))
        .expect("quantized values have at most gamma fractional digits")
}

/// Encrypted voxel grid plus the plaintext metadata the server works with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncVolume {
    dims: [usize; 3],
    encoding_dim: usize,
    gamma: u32,
    public_key: PublicKey,
    payload: Vec<EncFloat>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncryptOptions {
    pub obfuscate: bool,
}

impl Default for EncryptOptions {
    fn default() -> Self {
        EncryptOptions { obfuscate: true }
    }
}

/// Encrypts every payload value. Chunks run in parallel, each with its own
/// generator seeded from `rng`, so the output only depends on `rng`.
pub fn encrypt_volume<R: Rng + CryptoRng + ?Sized>(
    plain: &PlainVolume,
    pk: &PublicKey,
    options: EncryptOptions,
    rng: &mut R,
) -> Result<EncVolume> {
    if base_pow(plain.gamma) > *pk.max_plain() {
        return Err(Error::PrecisionExhausted(format!(
            "a {}-bit key cannot hold {} fractional digits",
            pk.bits(),
            plain.gamma
        )));
    }
    let chunks: Vec<(&[PlainFloat], [u8; 32])> = plain
        .payload
        .chunks(ENCRYPT_CHUNK)
        .map(|c| (c, rng.gen()))
        .collect();
    let parts = chunks
        .into_par_iter()
        .map(|(chunk, seed)| {
            let mut local = ChaCha20Rng::from_seed(seed);
            chunk
                .iter()
                .map(|v| {
                    if options.obfuscate {
                        EncFloat::encrypt(v, pk, &mut local)
                    } else {
                        EncFloat::encrypt_unobfuscated(v, pk)
                    }
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EncVolume {
        dims: plain.dims,
        encoding_dim: plain.encoding_dim,
        gamma: plain.gamma,
        public_key: pk.clone(),
        payload: parts.into_iter().flatten().collect(),
    })
}

impl EncVolume {
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn encoding_dim(&self) -> usize {
        self.encoding_dim
    }

    pub fn gamma(&self) -> u32 {
        self.gamma
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.public_key
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        self.public_key.fingerprint()
    }

    pub fn payload(&self) -> &[EncFloat] {
        &self.payload
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn voxel(&self, i: usize) -> &[EncFloat] {
        &self.payload[i * self.encoding_dim..(i + 1) * self.encoding_dim]
    }

    /// Offset of the mantissa region in the serialized container.
    pub fn payload_offset(&self) -> usize {
        cvol_header_len(self.public_key.bits())
    }

    /// Size of the mantissa region in the serialized container.
    pub fn payload_len(&self) -> usize {
        self.payload.len() * self.public_key.ciphertext_width()
    }

    pub fn serialized_len(&self) -> usize {
        self.payload_offset() + self.payload_len() + 4 * self.payload.len()
    }

    /// `.cvol` layout, integers little-endian unless noted:
    /// magic, version u16, width/height/depth/dim/base/gamma/modulus bits
    /// u32, key fingerprint (32 bytes), modulus N (big-endian, fixed width),
    /// mantissas (big-endian, fixed width, voxel-major), exponents i32.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let pk = &self.public_key;
        w.write_all(CVOL_MAGIC)?;
        w.write_all(&CVOL_VERSION.to_le_bytes())?;
        for v in self.dims {
            w.write_all(&dim_u32(v)?.to_le_bytes())?;
        }
        w.write_all(&dim_u32(self.encoding_dim)?.to_le_bytes())?;
        w.write_all(&BASE.to_le_bytes())?;
        w.write_all(&self.gamma.to_le_bytes())?;
        w.write_all(&(pk.bits() as u32).to_le_bytes())?;
        w.write_all(&pk.fingerprint())?;
        w.write_all(&fixed_be(pk.n(), modulus_width(pk.bits())))?;
        let width = pk.ciphertext_width();
        let mut buf = Vec::with_capacity(width * 1024);
        for chunk in self.payload.chunks(1024) {
            buf.clear();
            for e in chunk {
                buf.extend_from_slice(&e.mantissa().to_bytes_be(width));
            }
            w.write_all(&buf)?;
        }
        buf.clear();
        for e in &self.payload {
            buf.extend_from_slice(&e.exponent().to_le_bytes());
        }
        w.write_all(&buf)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != CVOL_MAGIC {
            return Err(Error::Format("not an encrypted volume (bad magic)".into()));
        }
        let version = read_u16(&mut r)?;
        if version != CVOL_VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let dims = [read_u32(&mut r)?, read_u32(&mut r)?, read_u32(&mut r)?].map(|d| d as usize);
        let encoding_dim = read_u32(&mut r)? as usize;
        let base = read_u32(&mut r)?;
        let gamma = read_u32(&mut r)?;
        let bits = u64::from(read_u32(&mut r)?);
        if base != BASE {
            return Err(Error::Format(format!("unsupported base {base}")));
        }
        if encoding_dim == 0 {
            return Err(Error::Format("encoding dimension is zero".into()));
        }
        let mut fingerprint = [0u8; 32];
        read_exact(&mut r, &mut fingerprint)?;
        let mut modulus = vec![0u8; modulus_width(bits)];
        read_exact(&mut r, &mut modulus)?;
        let pk = PublicKey::from_modulus(BigUint::from_bytes_be(&modulus))
            .map_err(|e| Error::Format(format!("bad modulus: {e}")))?;
        if pk.bits() != bits {
            return Err(Error::Format("modulus length disagrees with header".into()));
        }
        if pk.fingerprint() != fingerprint {
            return Err(Error::FingerprintMismatch);
        }
        let count = checked_voxels(dims)?
            .checked_mul(encoding_dim)
            .ok_or_else(|| Error::Format("payload size overflows".into()))?;
        let width = pk.ciphertext_width();
        let mut mantissas = Vec::with_capacity(count);
        let mut buf = vec![0u8; width * 1024];
        let mut remaining = count;
        while remaining > 0 {
            let n = remaining.min(1024);
            let bytes = &mut buf[..n * width];
            read_exact(&mut r, bytes)?;
            for c in bytes.chunks_exact(width) {
                let c = Ciphertext::from_value(BigUint::from_bytes_be(c), &pk)
                    .map_err(|_| Error::Format("ciphertext outside [0, N²)".into()))?;
                mantissas.push(c);
            }
            remaining -= n;
        }
        let mut exps = vec![0u8; 4 * count];
        read_exact(&mut r, &mut exps)?;
        let payload = mantissas
            .into_iter()
            .zip(exps.chunks_exact(4))
            .map(|(m, e)| EncFloat::new(m, i32::from_le_bytes([e[0], e[1], e[2], e[3]])))
            .collect();
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after payload".into()));
        }
        Ok(EncVolume {
            dims,
            encoding_dim,
            gamma,
            public_key: pk,
            payload,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len());
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn cvol_header_len(bits: u64) -> usize {
    4 + 2 + 7 * 4 + 32 + modulus_width(bits)
}

fn modulus_width(bits: u64) -> usize {
    bits.div_ceil(8) as usize
}

fn fixed_be(v: &BigUint, width: usize) -> Vec<u8> {
    let bytes = v.to_bytes_be();
    let mut out = vec![0u8; width - bytes.len()];
    out.extend_from_slice(&bytes);
    out
}

/// Bytes of ciphertext payload: `voxels · d · 2k / 8`.
pub fn storage_size(dims: [usize; 3], modulus_bits: u64, encoding_dim: usize) -> u64 {
    let voxels: u64 = dims.iter().map(|&d| d as u64).product();
    voxels * encoding_dim as u64 * 2 * modulus_bits / 8
}

/// Bytes of an 8-bit plaintext volume with the same encoding.
pub fn plain_storage_size(dims: [usize; 3], encoding_dim: usize) -> u64 {
    dims.iter().map(|&d| d as u64).product::<u64>() * encoding_dim as u64
}

/// Decimal megabytes (10⁶ bytes).
pub fn to_megabytes(bytes: u64) -> f64 {
    bytes as f64 / 1e6
}

fn dim_u32(d: usize) -> Result<u32> {
    u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))
}

fn checked_voxels(dims: [usize; 3]) -> Result<usize> {
    if dims.contains(&0) {
        return Err(Error::Format("zero volume dimension".into()));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("volume dimensions overflow".into()))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated stream".into()),
        _ => Error::Io(e),
    })
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
