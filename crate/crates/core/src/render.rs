//! Ray casting over encrypted (or plaintext) voxel grids.
//!
//! The pipeline is written once against [`Arithmetic`] and [`VoxelGrid`];
//! the encrypted renderer and the plaintext reference renderer are two
//! instantiations of it, so they perform the same operations in the same
//! order on the same fixed-point operands.

use std::ops::AddAssign;

use num_bigint::BigUint;
use rand::{CryptoRng, Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::{base_pow, EncFloat, PlainFloat, DEFAULT_GAMMA};
use crate::image::{EncImage, Image, PixelValue};
use crate::paillier::PublicKey;
use crate::volume::{encode_density, linear_index, EncVolume, PlainVolume};

pub const DEFAULT_STEP_SIZE: f64 = 0.5;
pub const MIN_STEP_SIZE: f64 = 0.01;
/// Largest precision accepted in a request.
pub const MAX_GAMMA: u32 = 30;

type Vec3 = [f64; 3];

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add_scaled(a: Vec3, b: Vec3, s: f64) -> Vec3 {
    [a[0] + b[0] * s, a[1] + b[1] * s, a[2] + b[2] * s]
}

fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: Vec3) -> Option<Vec3> {
    let n = dot3(a, a).sqrt();
    (n.is_finite() && n > 1e-12).then(|| [a[0] / n, a[1] / n, a[2] / n])
}

/// Pinhole camera in voxel coordinates. `fov` is the vertical opening angle
/// in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub eye: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    pub fov: f64,
    pub resolution: [u32; 2],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Camera {
    /// Camera on the +z side of a cubic volume looking at its centre.
    pub fn facing_volume(dims: [usize; 3], resolution: [u32; 2]) -> Self {
        let c = dims.map(|d| (d as f64 - 1.0) / 2.0);
        let extent = dims.iter().copied().max().unwrap_or(1) as f64;
        Camera {
            eye: [c[0], c[1], c[2] + 2.0 * extent],
            look_at: c,
            up: [0.0, 1.0, 0.0],
            fov: 30.0,
            resolution,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.resolution[0] as usize * self.resolution[1] as usize
    }

    fn basis(&self) -> Result<[Vec3; 3]> {
        let bad = |m: &str| Err(Error::DegenerateCamera(m.into()));
        if !(self.fov > 0.0 && self.fov < 180.0) {
            return bad("field of view must lie strictly between 0 and 180 degrees");
        }
        if self.resolution.contains(&0) {
            return bad("resolution must be positive");
        }
        if self.eye.iter().chain(&self.look_at).chain(&self.up).any(|v| !v.is_finite()) {
            return bad("camera vectors must be finite");
        }
        let Some(forward) = normalize(sub(self.look_at, self.eye)) else {
            return bad("eye and look_at coincide");
        };
        let Some(right) = normalize(cross(forward, self.up)) else {
            return bad("up is parallel to the view direction");
        };
        Ok([forward, right, cross(right, forward)])
    }

    pub fn validate(&self) -> Result<()> {
        self.basis().map(|_| ())
    }
}

/// One ray per pixel, row-major from the top-left. Pixel `(w/2, h/2)` looks
/// straight at `look_at`.
pub fn generate_rays(camera: &Camera) -> Result<Vec<Ray>> {
    let [forward, right, up] = camera.basis()?;
    let [w, h] = camera.resolution.map(f64::from);
    let t = (camera.fov.to_radians() / 2.0).tan();
    let mut rays = Vec::with_capacity(camera.pixel_count());
    for j in 0..camera.resolution[1] {
        for i in 0..camera.resolution[0] {
            let px = 2.0 * (f64::from(i) - w / 2.0) / h * t;
            let py = 2.0 * (h / 2.0 - f64::from(j)) / h * t;
            let d = add_scaled(add_scaled(forward, right, px), up, py);
            rays.push(Ray {
                origin: camera.eye,
                dir: normalize(d).expect("forward component is 1"),
            });
        }
    }
    Ok(rays)
}

/// Entry and exit distances of a ray through the voxel box
/// `[-0.5, dim - 0.5]³`, slab method. `None` when the ray misses.
pub fn box_intersection(ray: &Ray, dims: [usize; 3]) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for (a, &dim) in dims.iter().enumerate() {
        let (lo, hi) = (-0.5, dim as f64 - 0.5);
        if ray.dir[a].abs() < 1e-15 {
            if ray.origin[a] < lo || ray.origin[a] > hi {
                return None;
            }
            continue;
        }
        let ta = (lo - ray.origin[a]) / ray.dir[a];
        let tb = (hi - ray.origin[a]) / ray.dir[a];
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    let t0 = t0.max(0.0);
    (t0 <= t1).then_some((t0, t1))
}

/// Equidistant sample positions from the entry point, clamped into the box.
pub fn sample_positions(ray: &Ray, dims: [usize; 3], step: f64) -> Vec<Vec3> {
    let Some((t0, t1)) = box_intersection(ray, dims) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    let mut k = 0u32;
    loop {
        let t = t0 + f64::from(k) * step;
        if t > t1 {
            break;
        }
        let p = add_scaled(ray.origin, ray.dir, t);
        out.push([0, 1, 2].map(|a| p[a].clamp(-0.5, dims[a] as f64 - 0.5)));
        k += 1;
    }
    out
}

fn check_bounds(pos: Vec3, dims: [usize; 3]) -> Result<()> {
    let inside = (0..3).all(|a| pos[a] >= -0.5 && pos[a] <= dims[a] as f64 - 0.5);
    if inside {
        Ok(())
    } else {
        Err(Error::OutOfBounds(pos))
    }
}

/// Index of the nearest voxel, rounding halves up.
pub fn nn_index(pos: Vec3, dims: [usize; 3]) -> Result<usize> {
    check_bounds(pos, dims)?;
    let idx = [0, 1, 2].map(|a| ((pos[a] + 0.5).floor().max(0.0) as usize).min(dims[a] - 1));
    Ok(linear_index(dims, idx[0], idx[1], idx[2]))
}

/// Trilinear neighbours with weights quantized to `gamma` digits; zero
/// weights are dropped. Outside `[0, dim - 1]` on any axis the sample falls
/// back to its nearest voxel.
pub fn trilinear_weights(pos: Vec3, dims: [usize; 3], gamma: u32) -> Result<Vec<(usize, PlainFloat)>> {
    check_bounds(pos, dims)?;
    if (0..3).any(|a| pos[a] < 0.0 || pos[a] > (dims[a] - 1) as f64) {
        return Ok(vec![(nn_index(pos, dims)?, PlainFloat::one())]);
    }
    let base = [0, 1, 2].map(|a| (pos[a].floor() as usize).min(dims[a].saturating_sub(2)));
    let frac = [0, 1, 2].map(|a| pos[a] - base[a] as f64);
    let mut out = Vec::with_capacity(8);
    for corner in 0..8 {
        let off = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let w: f64 = (0..3)
            .map(|a| if off[a] == 1 { frac[a] } else { 1.0 - frac[a] })
            .product();
        let q = PlainFloat::from_f64(w, gamma)?;
        if q.is_zero() {
            continue;
        }
        out.push((
            linear_index(dims, base[0] + off[0], base[1] + off[1], base[2] + off[2]),
            q,
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    /// Ciphertext additions (mantissa products).
    pub he_add: u64,
    /// Plaintext scalings, including exponent alignment.
    pub he_scale: u64,
    /// Approximate divisions.
    pub divisions: u64,
}

impl AddAssign for OpCounts {
    fn add_assign(&mut self, o: OpCounts) {
        self.he_add += o.he_add;
        self.he_scale += o.he_scale;
        self.divisions += o.divisions;
    }
}

/// The operations a renderer may apply to voxel values.
pub trait Arithmetic: Sync {
    type Value: Clone + Send + Sync;
    fn zero(&self) -> Self::Value;
    fn add(&self, a: &Self::Value, b: &Self::Value, ops: &mut OpCounts) -> Result<Self::Value>;
    fn mul_plain(&self, a: &Self::Value, k: &PlainFloat, ops: &mut OpCounts) -> Result<Self::Value>;
    fn div_plain(&self, a: &Self::Value, n: u64, digits: u32, ops: &mut OpCounts) -> Result<Self::Value>;
}

/// Arithmetic on encrypted floats. Holds only the public key.
pub struct Encrypted<'a> {
    pk: &'a PublicKey,
}

impl<'a> Encrypted<'a> {
    pub fn new(pk: &'a PublicKey) -> Self {
        Encrypted { pk }
    }
}

impl Arithmetic for Encrypted<'_> {
    type Value = EncFloat;

    fn zero(&self) -> EncFloat {
        EncFloat::zero(self.pk)
    }

    fn add(&self, a: &EncFloat, b: &EncFloat, ops: &mut OpCounts) -> Result<EncFloat> {
        ops.he_add += 1;
        if a.exponent() != b.exponent() {
            ops.he_scale += 1;
        }
        a.add(b, self.pk)
    }

    fn mul_plain(&self, a: &EncFloat, k: &PlainFloat, ops: &mut OpCounts) -> Result<EncFloat> {
        ops.he_scale += 1;
        a.mul_plain(k, self.pk)
    }

    fn div_plain(&self, a: &EncFloat, n: u64, digits: u32, ops: &mut OpCounts) -> Result<EncFloat> {
        ops.divisions += 1;
        a.div_plain(n, digits, self.pk)
    }
}

/// Exact arithmetic on plaintext floats, mirroring [`Encrypted`].
pub struct Plain;

impl Arithmetic for Plain {
    type Value = PlainFloat;

    fn zero(&self) -> PlainFloat {
        PlainFloat::zero()
    }

    fn add(&self, a: &PlainFloat, b: &PlainFloat, ops: &mut OpCounts) -> Result<PlainFloat> {
        ops.he_add += 1;
        if a.exponent() != b.exponent() {
            ops.he_scale += 1;
        }
        Ok(a.add(b))
    }

    fn mul_plain(&self, a: &PlainFloat, k: &PlainFloat, ops: &mut OpCounts) -> Result<PlainFloat> {
        ops.he_scale += 1;
        Ok(a.mul(k))
    }

    fn div_plain(&self, a: &PlainFloat, n: u64, digits: u32, ops: &mut OpCounts) -> Result<PlainFloat> {
        ops.divisions += 1;
        Ok(a.mul(&PlainFloat::reciprocal(n, digits)?))
    }
}

/// A read-only voxel source with `encoding_dim` values per voxel.
pub trait VoxelGrid: Sync {
    type Value;
    fn dims(&self) -> [usize; 3];
    fn encoding_dim(&self) -> usize;
    fn voxel(&self, i: usize) -> &[Self::Value];
}

impl VoxelGrid for EncVolume {
    type Value = EncFloat;
    fn dims(&self) -> [usize; 3] {
        EncVolume::dims(self)
    }
    fn encoding_dim(&self) -> usize {
        EncVolume::encoding_dim(self)
    }
    fn voxel(&self, i: usize) -> &[EncFloat] {
        EncVolume::voxel(self, i)
    }
}

impl VoxelGrid for PlainVolume {
    type Value = PlainFloat;
    fn dims(&self) -> [usize; 3] {
        PlainVolume::dims(self)
    }
    fn encoding_dim(&self) -> usize {
        PlainVolume::encoding_dim(self)
    }
    fn voxel(&self, i: usize) -> &[PlainFloat] {
        PlainVolume::voxel(self, i)
    }
}

pub fn sample_nn<G: VoxelGrid>(grid: &G, pos: Vec3) -> Result<&[G::Value]> {
    Ok(grid.voxel(nn_index(pos, grid.dims())?))
}

/// Per-component weighted sum of the trilinear neighbours.
pub fn sample_trilinear<G, A>(
    grid: &G,
    arith: &A,
    pos: Vec3,
    gamma: u32,
    ops: &mut OpCounts,
) -> Result<Vec<A::Value>>
where
    G: VoxelGrid<Value = A::Value>,
    A: Arithmetic,
{
    let weights = trilinear_weights(pos, grid.dims(), gamma)?;
    (0..grid.encoding_dim())
        .map(|c| {
            let terms = weights
                .iter()
                .map(|(i, w)| arith.mul_plain(&grid.voxel(*i)[c], w, ops))
                .collect::<Result<Vec<_>>>()?;
            Ok(fold_sum(arith, terms, ops)?.unwrap_or_else(|| arith.zero()))
        })
        .collect()
}

fn fold_sum<A: Arithmetic>(
    arith: &A,
    terms: impl IntoIterator<Item = A::Value>,
    ops: &mut OpCounts,
) -> Result<Option<A::Value>> {
    let mut acc: Option<A::Value> = None;
    for t in terms {
        acc = Some(match acc {
            None => t,
            Some(a) => arith.add(&a, &t, ops)?,
        });
    }
    Ok(acc)
}

/// Dot product with a plaintext vector; zero components are skipped.
fn dot<A: Arithmetic>(
    arith: &A,
    values: &[A::Value],
    target: &[PlainFloat],
    ops: &mut OpCounts,
) -> Result<A::Value> {
    let terms = values
        .iter()
        .zip(target)
        .filter(|(_, t)| !t.is_zero())
        .map(|(v, t)| arith.mul_plain(v, t, ops))
        .collect::<Result<Vec<_>>>()?;
    Ok(fold_sum(arith, terms, ops)?.unwrap_or_else(|| arith.zero()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderMode {
    XrayNn,
    XrayTrilinear,
    Emphasize,
    ColorTf,
}

impl RenderMode {
    pub fn name(self) -> &'static str {
        match self {
            RenderMode::XrayNn => "xray_nn",
            RenderMode::XrayTrilinear => "xray_trilinear",
            RenderMode::Emphasize => "emphasize",
            RenderMode::ColorTf => "color_tf",
        }
    }

    pub fn channels(self) -> usize {
        if self == RenderMode::ColorTf {
            3
        } else {
            1
        }
    }

    fn is_xray(self) -> bool {
        matches!(self, RenderMode::XrayNn | RenderMode::XrayTrilinear)
    }
}

impl std::str::FromStr for RenderMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [
            RenderMode::XrayNn,
            RenderMode::XrayTrilinear,
            RenderMode::Emphasize,
            RenderMode::ColorTf,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown render mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferNode {
    pub density: f64,
    pub color: [f64; 3],
}

fn default_step() -> f64 {
    DEFAULT_STEP_SIZE
}

fn default_gamma() -> u32 {
    DEFAULT_GAMMA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderRequest {
    pub camera: Camera,
    pub mode: RenderMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emphasize_density: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tf_nodes: Option<Vec<TransferNode>>,
    #[serde(default = "default_step")]
    pub step_size: f64,
    #[serde(default = "default_gamma")]
    pub gamma: u32,
}

impl RenderRequest {
    pub fn new(camera: Camera, mode: RenderMode) -> Self {
        RenderRequest {
            camera,
            mode,
            emphasize_density: None,
            tf_nodes: None,
            step_size: DEFAULT_STEP_SIZE,
            gamma: DEFAULT_GAMMA,
        }
    }

    /// Checks the request on its own and against a volume's encoding.
    pub fn validate(&self, encoding_dim: usize) -> Result<()> {
        self.camera.validate()?;
        if !(self.step_size.is_finite() && self.step_size >= MIN_STEP_SIZE) {
            return Err(Error::InvalidArgument(format!(
                "step size must be at least {MIN_STEP_SIZE}"
            )));
        }
        if self.gamma > MAX_GAMMA {
            return Err(Error::InvalidArgument(format!("gamma above {MAX_GAMMA}")));
        }
        let mismatch = (self.mode.is_xray() && encoding_dim != 1)
            || (!self.mode.is_xray() && encoding_dim < 2);
        if mismatch {
            return Err(Error::ModeMismatch {
                mode: self.mode.name().into(),
                encoding_dim,
            });
        }
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        match self.mode {
            RenderMode::Emphasize => match self.emphasize_density {
                Some(d) if unit(d) => {}
                Some(d) => return Err(Error::InvalidArgument(format!("density {d} outside [0, 1]"))),
                None => return Err(Error::InvalidArgument("emphasize needs emphasize_density".into())),
            },
            RenderMode::ColorTf => {
                let nodes = self.tf_nodes.as_deref().unwrap_or_default();
                if nodes.is_empty() {
                    return Err(Error::InvalidArgument("color_tf needs at least one node".into()));
                }
                for (i, n) in nodes.iter().enumerate() {
                    if !unit(n.density) || !n.color.iter().all(|&c| unit(c)) {
                        return Err(Error::InvalidArgument(format!("node {i} outside [0, 1]")));
                    }
                    if nodes[..i].iter().any(|m| m.density == n.density) {
                        return Err(Error::InvalidArgument(format!(
                            "duplicate node density {}",
                            n.density
                        )));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Upper bound on samples along any ray through a box of `dims`.
    pub fn max_samples(&self, dims: [usize; 3]) -> u64 {
        let diag = dims.iter().map(|&d| (d as f64).powi(2)).sum::<f64>().sqrt();
        (diag / self.step_size).floor() as u64 + 1
    }
}

/// Everything the per-pixel loop needs, quantized once.
struct Plan {
    mode: RenderMode,
    gamma: u32,
    step: f64,
    targets: Vec<Vec<PlainFloat>>,
    colors: Vec<[PlainFloat; 3]>,
}

impl Plan {
    fn new(req: &RenderRequest, encoding_dim: usize) -> Result<Self> {
        req.validate(encoding_dim)?;
        let g = req.gamma;
        let (targets, colors) = match req.mode {
            RenderMode::Emphasize => {
                let d = req.emphasize_density.expect("validated");
                (vec![encode_density(d, encoding_dim)?.quantized(g)], Vec::new())
            }
            RenderMode::ColorTf => {
                let nodes = req.tf_nodes.as_deref().expect("validated");
                let targets = nodes
                    .iter()
                    .map(|n| Ok(encode_density(n.density, encoding_dim)?.quantized(g)))
                    .collect::<Result<Vec<_>>>()?;
                let colors = nodes
                    .iter()
                    .map(|n| {
                        let [r, gr, b] = n.color;
                        Ok([
                            PlainFloat::from_f64(r, g)?,
                            PlainFloat::from_f64(gr, g)?,
                            PlainFloat::from_f64(b, g)?,
                        ])
                    })
                    .collect::<Result<Vec<_>>>()?;
                (targets, colors)
            }
            _ => (Vec::new(), Vec::new()),
        };
        Ok(Plan {
            mode: req.mode,
            gamma: g,
            step: req.step_size,
            targets,
            colors,
        })
    }

    fn divisor_factor(&self) -> u64 {
        if self.mode == RenderMode::ColorTf {
            self.colors.len() as u64
        } else {
            1
        }
    }

    /// Per-channel values of one sample.
    fn sample<G, A>(&self, grid: &G, arith: &A, pos: Vec3, ops: &mut OpCounts) -> Result<Vec<A::Value>>
    where
        G: VoxelGrid<Value = A::Value>,
        A: Arithmetic,
    {
        match self.mode {
            RenderMode::XrayNn => Ok(vec![sample_nn(grid, pos)?[0].clone()]),
            RenderMode::XrayTrilinear => sample_trilinear(grid, arith, pos, self.gamma, ops),
            RenderMode::Emphasize => {
                let v = sample_nn(grid, pos)?;
                Ok(vec![dot(arith, v, &self.targets[0], ops)?])
            }
            RenderMode::ColorTf => {
                let v = sample_nn(grid, pos)?;
                let responses = self
                    .targets
                    .iter()
                    .map(|t| dot(arith, v, t, ops))
                    .collect::<Result<Vec<_>>>()?;
                (0..3)
                    .map(|ch| {
                        let terms = responses
                            .iter()
                            .zip(&self.colors)
                            .filter(|(_, c)| !c[ch].is_zero())
                            .map(|(r, c)| arith.mul_plain(r, &c[ch], ops))
                            .collect::<Result<Vec<_>>>()?;
                        Ok(fold_sum(arith, terms, ops)?.unwrap_or_else(|| arith.zero()))
                    })
                    .collect()
            }
        }
    }

    fn pixel<G, A>(&self, grid: &G, arith: &A, ray: &Ray) -> Result<(Vec<A::Value>, u32, OpCounts)>
    where
        G: VoxelGrid<Value = A::Value>,
        A: Arithmetic,
    {
        let mut ops = OpCounts::default();
        let channels = self.mode.channels();
        let positions = sample_positions(ray, grid.dims(), self.step);
        if positions.is_empty() {
            return Ok((vec![arith.zero(); channels], 0, ops));
        }
        let mut sums: Option<Vec<A::Value>> = None;
        for p in &positions {
            let s = self.sample(grid, arith, *p, &mut ops)?;
            sums = Some(match sums {
                None => s,
                Some(acc) => acc
                    .iter()
                    .zip(&s)
                    .map(|(a, b)| arith.add(a, b, &mut ops))
                    .collect::<Result<Vec<_>>>()?,
            });
        }
        let n = positions.len() as u64;
        let out = sums
            .expect("at least one sample")
            .iter()
            .map(|s| arith.div_plain(s, n * self.divisor_factor(), self.gamma, &mut ops))
            .collect::<Result<Vec<_>>>()?;
        Ok((out, n as u32, ops))
    }
}

/// Composited, not yet equalized pixel values, channel-major.
#[derive(Debug, Clone)]
pub struct RawRender<V> {
    pub width: u32,
    pub height: u32,
    pub channels: Vec<Vec<V>>,
    pub sample_counts: Vec<u32>,
    pub ops: OpCounts,
}

/// The shared pipeline: rays, sampling, compositing per mode.
pub fn render_with<G, A>(grid: &G, arith: &A, req: &RenderRequest) -> Result<RawRender<A::Value>>
where
    G: VoxelGrid<Value = A::Value>,
    A: Arithmetic,
{
    let plan = Plan::new(req, grid.encoding_dim())?;
    let rays = generate_rays(&req.camera)?;
    let pixels = rays
        .par_iter()
        .map(|ray| plan.pixel(grid, arith, ray))
        .collect::<Result<Vec<_>>>()?;
    let channels = req.mode.channels();
    let mut out: Vec<Vec<A::Value>> = (0..channels).map(|_| Vec::with_capacity(pixels.len())).collect();
    let mut counts = Vec::with_capacity(pixels.len());
    let mut ops = OpCounts::default();
    for (values, n, o) in pixels {
        for (c, v) in values.into_iter().enumerate() {
            out[c].push(v);
        }
        counts.push(n);
        ops += o;
    }
    Ok(RawRender {
        width: req.camera.resolution[0],
        height: req.camera.resolution[1],
        channels: out,
        sample_counts: counts,
        ops,
    })
}

/// Rejects requests whose intermediate mantissas could leave the signed
/// plaintext range of `pk`, which would silently wrap modulo `N`.
pub fn check_precision(vol: &EncVolume, req: &RenderRequest) -> Result<()> {
    let plan = Plan::new(req, vol.encoding_dim())?;
    let g = req.gamma;
    // lowest exponent of a single sample and a bound on its value
    let (sample_digits, sample_bound) = match plan.mode {
        RenderMode::XrayNn => (vol.gamma(), 1u64),
        RenderMode::XrayTrilinear | RenderMode::Emphasize => (vol.gamma() + g, 2),
        RenderMode::ColorTf => (vol.gamma() + 2 * g, 2 * plan.colors.len() as u64),
    };
    let n = req.max_samples(vol.dims());
    let m = plan.divisor_factor();
    let unit = base_pow(sample_digits);
    let sum = &unit * sample_bound * n;
    let divided = &unit * sample_bound * (base_pow(g) / m + n + 1u32);
    let rescale = base_pow(sample_digits + g);
    let worst = sum.max(divided).max(rescale);
    if worst > *vol.public_key().max_plain() {
        return Err(Error::PrecisionExhausted(format!(
            "{} at gamma {g} needs about {} plaintext bits, the {}-bit key offers {}",
            plan.mode.name(),
            worst.bits(),
            vol.public_key().bits(),
            vol.public_key().max_plain().bits()
        )));
    }
    Ok(())
}

/// Composites every pixel over the encrypted volume without the final
/// exponent equalization and obfuscation.
pub fn render_raw(vol: &EncVolume, req: &RenderRequest) -> Result<RawRender<EncFloat>> {
    check_precision(vol, req)?;
    render_with(vol, &Encrypted::new(vol.public_key()), req)
}

/// Lowers every pixel of every channel to the image's smallest exponent and
/// obfuscates every mantissa.
pub fn finish<R: Rng + CryptoRng + ?Sized>(
    raw: RawRender<EncFloat>,
    gamma: u32,
    pk: &PublicKey,
    rng: &mut R,
) -> Result<EncImage> {
    let all: Vec<EncFloat> = raw.channels.concat();
    let (mut equalized, e) = crate::float::equalize_exponents(&all, pk)?;
    let mut exponents = Vec::new();
    let mut mantissas = Vec::new();
    for channel in &raw.channels {
        let rest = equalized.split_off(channel.len());
        let ms = std::mem::replace(&mut equalized, rest);
        let seeds: Vec<[u8; 32]> = (0..ms.len().div_ceil(256)).map(|_| rng.gen()).collect();
        let obfuscated: Vec<BigUint> = ms
            .par_chunks(256)
            .zip(seeds)
            .flat_map_iter(|(chunk, seed)| {
                let mut local = ChaCha20Rng::from_seed(seed);
                chunk
                    .iter()
                    .map(|c| pk.obfuscate(c, &mut local).into_value())
                    .collect::<Vec<_>>()
            })
            .collect();
        exponents.push(e);
        mantissas.push(obfuscated);
    }
    EncImage::new(raw.width, raw.height, gamma, pk, exponents, mantissas, raw.sample_counts)
}

/// Renders `req` over the encrypted volume.
pub fn render<R: Rng + CryptoRng + ?Sized>(vol: &EncVolume, req: &RenderRequest, rng: &mut R) -> Result<EncImage> {
    Ok(render_with_stats(vol, req, rng)?.0)
}

pub fn render_with_stats<R: Rng + CryptoRng + ?Sized>(
    vol: &EncVolume,
    req: &RenderRequest,
    rng: &mut R,
) -> Result<(EncImage, OpCounts)> {
    let raw = render_raw(vol, req)?;
    let ops = raw.ops;
    Ok((finish(raw, req.gamma, vol.public_key(), rng)?, ops))
}

/// Reference render over the plaintext payload, with the same operations
/// and the same final exponent.
pub fn render_plaintext(vol: &PlainVolume, req: &RenderRequest) -> Result<Image> {
    let raw = render_with(vol, &Plain, req)?;
    let e = raw.channels.iter().flatten().map(PlainFloat::exponent).min().unwrap_or(0);
    let channels = raw
        .channels
        .iter()
        .map(|c| c.iter().map(|v| v.with_exponent(e).map(PixelValue::Value)).collect())
        .collect::<Result<Vec<_>>>()?;
    Image::new(raw.width, raw.height, channels, raw.sample_counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{make_synthetic_volume, Volume};

    fn cam(res: [u32; 2]) -> Camera {
        Camera::facing_volume([8, 8, 8], res)
    }

    #[test]
    fn center_ray_hits_look_at() {
        let c = cam([4, 4]);
        let rays = generate_rays(&c).unwrap();
        assert_eq!(rays.len(), 16);
        let centre = rays[2 * 4 + 2];
        let expect = normalize(sub(c.look_at, c.eye)).unwrap();
        for a in 0..3 {
            assert!((centre.dir[a] - expect[a]).abs() < 1e-12);
        }
        assert_eq!(generate_rays(&cam([150, 150])).unwrap().len(), 22_500);
    }

    #[test]
    fn mirrored_pixels_are_symmetric() {
        let c = cam([8, 6]);
        let rays = generate_rays(&c).unwrap();
        let axis = normalize(sub(c.look_at, c.eye)).unwrap();
        let at = |i: usize, j: usize| rays[j * 8 + i].dir;
        for (i, j) in [(1, 1), (2, 5), (3, 2)] {
            let a = at(i, j);
            let b = at(8 - i, 6 - j);
            assert!((dot3(a, axis) - dot3(b, axis)).abs() < 1e-12);
            let sum = [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
            let perp = sub(sum, [axis[0] * dot3(sum, axis), axis[1] * dot3(sum, axis), axis[2] * dot3(sum, axis)]);
            assert!(dot3(perp, perp).sqrt() < 1e-12);
        }
    }

    #[test]
    fn degenerate_cameras() {
        let mut c = cam([4, 4]);
        c.up = [0.0, 0.0, 1.0];
        assert!(matches!(generate_rays(&c), Err(Error::DegenerateCamera(_))));
        let mut c = cam([4, 4]);
        c.eye = c.look_at;
        assert!(generate_rays(&c).is_err());
        for fov in [0.0, 180.0, f64::NAN] {
            let mut c = cam([4, 4]);
            c.fov = fov;
            assert!(generate_rays(&c).is_err());
        }
        let mut c = cam([4, 4]);
        c.resolution = [0, 4];
        assert!(generate_rays(&c).is_err());
    }

    #[test]
    fn slab_intersection() {
        let ray = Ray { origin: [1.0, 1.0, -10.0], dir: [0.0, 0.0, 1.0] };
        let (t0, t1) = box_intersection(&ray, [4, 4, 4]).unwrap();
        assert!((t0 - 9.5).abs() < 1e-12 && (t1 - 13.5).abs() < 1e-12);
        let miss = Ray { origin: [10.0, 1.0, -10.0], dir: [0.0, 0.0, 1.0] };
        assert!(box_intersection(&miss, [4, 4, 4]).is_none());
        let inside = Ray { origin: [1.0, 1.0, 1.0], dir: [1.0, 0.0, 0.0] };
        assert_eq!(box_intersection(&inside, [4, 4, 4]).unwrap(), (0.0, 2.5));
        assert_eq!(sample_positions(&ray, [4, 4, 4], 0.5).len(), 9);
        assert!(sample_positions(&miss, [4, 4, 4], 0.5).is_empty());
    }

    #[test]
    fn nearest_neighbour_rounding() {
        let dims = [4, 4, 4];
        assert_eq!(nn_index([0.4, 0.4, 0.4], dims).unwrap(), 0);
        assert_eq!(nn_index([0.5, 0.0, 0.0], dims).unwrap(), 1);
        assert_eq!(nn_index([2.0, 3.0, 1.0], dims).unwrap(), linear_index(dims, 2, 3, 1));
        assert_eq!(nn_index([3.5, 3.5, 3.5], dims).unwrap(), 63);
        assert!(matches!(nn_index([4.0, 0.0, 0.0], dims), Err(Error::OutOfBounds(_))));
    }

    #[test]
    fn trilinear_weight_cases() {
        let dims = [4, 4, 4];
        let w = trilinear_weights([1.0, 2.0, 3.0], dims, 6).unwrap();
        assert_eq!(w, vec![(linear_index(dims, 1, 2, 3), PlainFloat::one())]);
        let w = trilinear_weights([1.5, 1.5, 1.5], dims, 6).unwrap();
        assert_eq!(w.len(), 8);
        assert!(w.iter().all(|(_, q)| q.value_eq(&PlainFloat::new(125, -3))));
        let w = trilinear_weights([1.25, 0.0, 0.0], dims, 6).unwrap();
        assert_eq!(w.len(), 2);
        // border half-voxel falls back to the nearest voxel
        let w = trilinear_weights([-0.3, 1.5, 1.5], dims, 6).unwrap();
        assert_eq!(w, vec![(linear_index(dims, 0, 2, 2), PlainFloat::one())]);
        assert!(trilinear_weights([0.0, 9.0, 0.0], dims, 6).is_err());
    }

    #[test]
    fn request_json_shape() {
        let json = r#"{
            "camera": {"eye": [0, 0, 40], "look_at": [0, 0, 0], "up": [0, 1, 0], "fov": 30, "resolution": [16, 8]},
            "mode": "color_tf",
            "tf_nodes": [{"density": 0.3, "color": [1, 0, 0]}, {"density": 0.9, "color": [0, 0, 1]}]
        }"#;
        let req: RenderRequest = serde_json::from_str(json).unwrap();
        assert_eq!(req.mode, RenderMode::ColorTf);
        assert_eq!(req.step_size, DEFAULT_STEP_SIZE);
        assert_eq!(req.gamma, DEFAULT_GAMMA);
        assert_eq!(req.tf_nodes.as_ref().unwrap().len(), 2);
        let back: RenderRequest = serde_json::from_str(&serde_json::to_string(&req).unwrap()).unwrap();
        assert_eq!(back, req);
        for m in ["xray_nn", "xray_trilinear", "emphasize", "color_tf"] {
            assert_eq!(m.parse::<RenderMode>().unwrap().name(), m);
        }
    }

    #[test]
    fn request_validation() {
        let mut req = RenderRequest::new(cam([4, 4]), RenderMode::XrayNn);
        assert!(req.validate(1).is_ok());
        assert!(matches!(req.validate(4), Err(Error::ModeMismatch { .. })));
        req.mode = RenderMode::Emphasize;
        assert!(matches!(req.validate(1), Err(Error::ModeMismatch { .. })));
        assert!(req.validate(4).is_err());
        req.emphasize_density = Some(0.5);
        assert!(req.validate(4).is_ok());
        req.mode = RenderMode::ColorTf;
        assert!(req.validate(4).is_err());
        let node = |d: f64| TransferNode { density: d, color: [1.0, 0.5, 0.0] };
        req.tf_nodes = Some(vec![node(0.2), node(0.2)]);
        assert!(req.validate(4).is_err());
        req.tf_nodes = Some(vec![node(0.2), node(0.7)]);
        assert!(req.validate(4).is_ok());
        req.step_size = 0.0;
        assert!(req.validate(4).is_err());
    }

    fn plain(v: &Volume, d: usize) -> PlainVolume {
        PlainVolume::encode(v, d, 6).unwrap()
    }

    #[test]
    fn plaintext_constant_and_zero_volumes() {
        let mut wide = cam([12, 12]);
        wide.fov = 70.0;
        let req = RenderRequest::new(wide, RenderMode::XrayTrilinear);
        let zero = render_plaintext(&plain(&Volume::filled([8; 3], 8, 0).unwrap(), 1), &req).unwrap();
        assert!(zero.channel(0).iter().all(|p| p.value().unwrap().is_zero()));
        let c = render_plaintext(&plain(&Volume::filled([8; 3], 8, 51).unwrap(), 1), &req).unwrap();
        for (p, &n) in c.channel(0).iter().zip(c.sample_counts()) {
            let v = p.value().unwrap().to_f64();
            if n == 0 {
                assert_eq!(v, 0.0);
            } else {
                assert!((v - 0.2).abs() < 1e-5, "{v}");
            }
        }
        assert!(c.sample_counts().contains(&0));
    }

    #[test]
    fn xray_nn_op_budget() {
        let v = plain(&make_synthetic_volume(16).unwrap(), 1);
        let req = RenderRequest::new(Camera::facing_volume([16; 3], [8, 8]), RenderMode::XrayNn);
        let raw = render_with(&v, &Plain, &req).unwrap();
        let hits = raw.sample_counts.iter().filter(|&&n| n > 0).count() as u64;
        let samples: u64 = raw.sample_counts.iter().map(|&n| u64::from(n)).sum();
        assert_eq!(raw.ops.he_add, samples - hits);
        assert_eq!(raw.ops.divisions, hits);
    }

    /// Straightforward f64 renderer: unquantized weights, true division.
    fn naive(vol: &Volume, req: &RenderRequest, d: usize) -> Vec<Vec<f64>> {
        let dims = vol.dims();
        let norm = |i: usize| f64::from(vol.voxels()[i]) / 255.0;
        let enc = |i: usize| encode_density(norm(i), d).unwrap();
        let rays = generate_rays(&req.camera).unwrap();
        let channels = req.mode.channels();
        let mut out = vec![Vec::new(); channels];
        for ray in &rays {
            let pos = sample_positions(ray, dims, req.step_size);
            let mut acc = vec![0.0; channels];
            for p in &pos {
                let idx = nn_index(*p, dims).unwrap();
                match req.mode {
                    RenderMode::XrayNn => acc[0] += norm(idx),
                    RenderMode::XrayTrilinear => {
                        let inside = (0..3).all(|a| p[a] >= 0.0 && p[a] <= (dims[a] - 1) as f64);
                        if !inside {
                            acc[0] += norm(idx);
                            continue;
                        }
                        let b = [0, 1, 2].map(|a| (p[a].floor() as usize).min(dims[a] - 2));
                        let f = [0, 1, 2].map(|a| p[a] - b[a] as f64);
                        for corner in 0..8usize {
                            let o = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
                            let w: f64 = (0..3).map(|a| if o[a] == 1 { f[a] } else { 1.0 - f[a] }).product();
                            acc[0] += w * norm(linear_index(dims, b[0] + o[0], b[1] + o[1], b[2] + o[2]));
                        }
                    }
                    RenderMode::Emphasize => {
                        let t = encode_density(req.emphasize_density.unwrap(), d).unwrap();
                        acc[0] += enc(idx).dot(&t);
                    }
                    RenderMode::ColorTf => {
                        for node in req.tf_nodes.as_ref().unwrap() {
                            let r = enc(idx).dot(&encode_density(node.density, d).unwrap());
                            for c in 0..3 {
                                acc[c] += r * node.color[c];
                            }
                        }
                    }
                }
            }
            let div = pos.len().max(1) as f64 * req.tf_nodes.as_ref().map_or(1, Vec::len) as f64;
            for c in 0..channels {
                out[c].push(acc[c] / div);
            }
        }
        out
    }

    #[test]
    fn fixed_point_pipeline_tracks_float_reference() {
        let vol = make_synthetic_volume(16).unwrap();
        let mut cam = Camera::facing_volume([16; 3], [16, 16]);
        cam.eye = [30.0, 25.0, 40.0];
        let mut reqs = vec![
            (RenderRequest::new(cam.clone(), RenderMode::XrayNn), 1),
            (RenderRequest::new(cam.clone(), RenderMode::XrayTrilinear), 1),
        ];
        let mut e = RenderRequest::new(cam.clone(), RenderMode::Emphasize);
        e.emphasize_density = Some(80.0 / 255.0);
        reqs.push((e, 4));
        let mut tf = RenderRequest::new(cam, RenderMode::ColorTf);
        tf.tf_nodes = Some(vec![
            TransferNode { density: 0.3, color: [0.0, 1.0, 0.0] },
            TransferNode { density: 0.9, color: [1.0, 0.0, 0.25] },
        ]);
        reqs.push((tf, 4));
        for (req, d) in reqs {
            let img = render_plaintext(&plain(&vol, d), &req).unwrap();
            let reference = naive(&vol, &req, d);
            for c in 0..img.channels() {
                let got = img.to_f64(c);
                let worst = got
                    .iter()
                    .zip(&reference[c])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(worst < 1e-4, "{:?} channel {c}: {worst}", req.mode);
            }
        }
    }
}
