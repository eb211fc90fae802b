//! Timing and storage reports for the encrypted pipeline, shaped as tables
//! with a plaintext column followed by one column per key size.

use std::fmt::Write as _;
use std::time::Instant;

use cipherray_core::image::decrypt_image;
use cipherray_core::paillier::{generate_keys, SecureKey};
use cipherray_core::render::{render, render_plaintext, Camera, RenderMode, RenderRequest, TransferNode};
use cipherray_core::volume::{
    encrypt_volume, make_synthetic_volume, plain_storage_size, storage_size, to_megabytes, EncryptOptions,
    PlainVolume,
};
use cipherray_core::{PublicKey, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub const DEFAULT_BITS: [u64; 3] = [64, 128, 256];

#[derive(Debug, Clone)]
pub struct BenchConfig {
    /// Edge length of the cubic phantom.
    pub size: usize,
    /// Edge length of the square image.
    pub resolution: u32,
    /// Fractional digits for the volume and for rendering.
    pub gamma: u32,
    /// Each cell is the fastest of this many runs.
    pub repeats: usize,
    pub workers: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            size: 32,
            resolution: 64,
            gamma: 3,
            repeats: 3,
            workers: 1,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub label: String,
    pub cells: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub title: String,
    pub unit: String,
    pub columns: Vec<String>,
    pub rows: Vec<Row>,
    pub meta: Vec<(String, String)>,
}

impl Table {
    fn new(title: &str, unit: &str, bits: &[u64]) -> Self {
        let mut columns = vec!["plain".to_owned()];
        columns.extend(bits.iter().map(|b| bit_column(*b)));
        Table {
            title: title.to_owned(),
            unit: unit.to_owned(),
            columns,
            rows: Vec::new(),
            meta: Vec::new(),
        }
    }

    fn row_mut(&mut self, label: &str) -> &mut Row {
        if let Some(i) = self.rows.iter().position(|r| r.label == label) {
            return &mut self.rows[i];
        }
        self.rows.push(Row {
            label: label.to_owned(),
            cells: vec![None; self.columns.len()],
        });
        self.rows.last_mut().unwrap()
    }

    fn set(&mut self, label: &str, column: usize, value: f64) {
        self.row_mut(label).cells[column] = Some(value);
    }

    pub fn get(&self, label: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|r| r.label == label)?.cells[c]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.meta {
            let _ = writeln!(out, "# {k}: {v}");
        }
        let _ = writeln!(out, "{},{}", self.unit, self.columns.join(","));
        for row in &self.rows {
            let cells: Vec<String> = row.cells.iter().map(|c| c.map(format_value).unwrap_or_default()).collect();
            let _ = writeln!(out, "{},{}", row.label, cells.join(","));
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("### {}\n\n", self.title);
        for (k, v) in &self.meta {
            let _ = writeln!(out, "- {k}: {v}");
        }
        if !self.meta.is_empty() {
            out.push('\n');
        }
        let _ = writeln!(out, "| {} | {} |", self.unit, self.columns.join(" | "));
        let _ = writeln!(out, "|---|{}", "---:|".repeat(self.columns.len()));
        for row in &self.rows {
            let cells: Vec<String> = row
                .cells
                .iter()
                .map(|c| c.map(format_value).unwrap_or_else(|| "-".into()))
                .collect();
            let _ = writeln!(out, "| {} | {} |", row.label, cells.join(" | "));
        }
        out
    }
}

fn format_value(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{v:.0}")
    } else {
        format!("{v:.4}")
    }
}

pub fn bit_column(bits: u64) -> String {
    format!("{bits}bit")
}

pub fn render_row(mode: RenderMode) -> String {
    format!("render {}", mode.name())
}

pub fn encrypt_row(obfuscate: bool) -> String {
    if obfuscate {
        "encrypt".into()
    } else {
        "encrypt (no obfuscation)".into()
    }
}

pub fn tf_encrypt_row(dim: usize) -> String {
    format!("encrypt {dim}-dim")
}

pub fn tf_render_row(dim: usize, nodes: usize) -> String {
    format!("render {dim}-dim {nodes} colors")
}

fn pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool")
}

/// Fastest wall time of `repeats` runs, with the last result.
fn timed<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<(f64, T)> {
    let mut best = f64::INFINITY;
    let mut last = None;
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        let out = f()?;
        best = best.min(start.elapsed().as_secs_f64());
        last = Some(out);
    }
    Ok((best, last.unwrap()))
}

fn keys(bits: u64, seed: u64) -> Result<(SecureKey, PublicKey)> {
    generate_keys(bits, &mut ChaCha20Rng::seed_from_u64(seed ^ bits))
}

fn camera(cfg: &BenchConfig) -> Camera {
    let mut cam = Camera::facing_volume([cfg.size; 3], [cfg.resolution; 2]);
    let s = cfg.size as f64;
    cam.eye = [s * 1.6, s * 1.2, s * 2.0];
    cam.fov = 35.0;
    cam
}

fn metadata(cfg: &BenchConfig, table: &mut Table) {
    table.meta = vec![
        ("volume".into(), format!("{0}x{0}x{0}", cfg.size)),
        ("image".into(), format!("{0}x{0}", cfg.resolution)),
        ("gamma".into(), cfg.gamma.to_string()),
        ("workers".into(), cfg.workers.to_string()),
        ("repeats".into(), cfg.repeats.to_string()),
    ];
}

/// Encryption, rendering and decryption times for the X-ray modes, in
/// seconds. The plain column holds the plaintext encoding and render.
pub fn run_xray_bench(cfg: &BenchConfig, bits: &[u64], obfuscation: &[bool], modes: &[RenderMode]) -> Result<Table> {
    let mut table = Table::new("X-ray rendering", "seconds", bits);
    metadata(cfg, &mut table);
    let pool = pool(cfg.workers);
    pool.install(|| {
        let vol = make_synthetic_volume(cfg.size)?;
        let (t, plain) = timed(cfg.repeats, || PlainVolume::encode(&vol, 1, cfg.gamma))?;
        for &o in obfuscation {
            table.set(&encrypt_row(o), 0, t);
        }
        let cam = camera(cfg);
        for &mode in modes {
            let mut req = RenderRequest::new(cam.clone(), mode);
            req.gamma = cfg.gamma;
            let (t, _) = timed(cfg.repeats, || render_plaintext(&plain, &req))?;
            table.set(&render_row(mode), 0, t);
        }
        for (i, &b) in bits.iter().enumerate() {
            let (sk, pk) = keys(b, cfg.seed)?;
            let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
            let mut enc = None;
            for &o in obfuscation {
                let (t, v) = timed(cfg.repeats, || {
                    encrypt_volume(&plain, &pk, EncryptOptions { obfuscate: o }, &mut rng)
                })?;
                table.set(&encrypt_row(o), i + 1, t);
                enc = Some(v);
            }
            let enc = match enc {
                Some(v) => v,
                None => encrypt_volume(&plain, &pk, EncryptOptions::default(), &mut rng)?,
            };
            let mut image = None;
            for &mode in modes {
                let mut req = RenderRequest::new(cam.clone(), mode);
                req.gamma = cfg.gamma;
                let (t, img) = timed(cfg.repeats, || render(&enc, &req, &mut rng))?;
                table.set(&render_row(mode), i + 1, t);
                image.get_or_insert(img);
            }
            if let Some(img) = image {
                let (t, _) = timed(cfg.repeats, || Ok(decrypt_image(&img, &sk)))?;
                table.set("decrypt", i + 1, t);
            }
        }
        Ok(table)
    })
}

/// Evenly spread nodes with no zero color component, so every node costs
/// the same number of scalings.
pub fn tf_nodes(count: usize) -> Vec<TransferNode> {
    const PALETTE: [[f64; 3]; 4] = [[0.9, 0.3, 0.2], [0.2, 0.9, 0.3], [0.3, 0.2, 0.9], [0.7, 0.7, 0.4]];
    (0..count)
        .map(|i| TransferNode {
            density: (i + 1) as f64 / (count + 1) as f64,
            color: PALETTE[i % PALETTE.len()],
        })
        .collect()
}

/// Encryption and color transfer function rendering times per encoding
/// dimension and node count, in seconds.
pub fn run_tf_bench(cfg: &BenchConfig, dims: &[usize], nodes: &[usize], bits: &[u64]) -> Result<Table> {
    let mut table = Table::new("Color transfer function", "seconds", bits);
    metadata(cfg, &mut table);
    let pool = pool(cfg.workers);
    pool.install(|| {
        let vol = make_synthetic_volume(cfg.size)?;
        let cam = camera(cfg);
        let keys: Vec<_> = bits.iter().map(|&b| keys(b, cfg.seed)).collect::<Result<_>>()?;
        for &d in dims {
            let (t, plain) = timed(cfg.repeats, || PlainVolume::encode(&vol, d, cfg.gamma))?;
            table.set(&tf_encrypt_row(d), 0, t);
            let requests: Vec<(usize, RenderRequest)> = nodes
                .iter()
                .map(|&k| {
                    let mut req = RenderRequest::new(cam.clone(), RenderMode::ColorTf);
                    req.gamma = cfg.gamma;
                    req.tf_nodes = Some(tf_nodes(k));
                    (k, req)
                })
                .collect();
            for (k, req) in &requests {
                let (t, _) = timed(cfg.repeats, || render_plaintext(&plain, req))?;
                table.set(&tf_render_row(d, *k), 0, t);
            }
            for (i, (_, pk)) in keys.iter().enumerate() {
                let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
                let (t, enc) = timed(cfg.repeats, || {
                    encrypt_volume(&plain, pk, EncryptOptions::default(), &mut rng)
                })?;
                table.set(&tf_encrypt_row(d), i + 1, t);
                for (k, req) in &requests {
                    let (t, _) = timed(cfg.repeats, || render(&enc, req, &mut rng))?;
                    table.set(&tf_render_row(d, *k), i + 1, t);
                }
            }
        }
        Ok(table)
    })
}

/// Storage cells in decimal megabytes for 100³ voxels, reference values.
pub const REFERENCE_STORAGE_MB: [[u64; 7]; 4] = [
    [1, 16, 32, 64, 128, 256, 512],
    [2, 32, 64, 128, 256, 512, 1024],
    [3, 48, 96, 192, 384, 768, 1536],
    [4, 64, 128, 256, 512, 1024, 2048],
];

pub const REFERENCE_STORAGE_BITS: [u64; 6] = [64, 128, 256, 512, 1024, 2048];

#[derive(Debug, Clone)]
pub struct StorageReport {
    pub table: Table,
    /// Dimensions, key bits and encoding of the measured container.
    pub measured: ([usize; 3], u64, usize),
    pub predicted_bytes: u64,
    pub measured_bytes: u64,
}

/// Predicted payload sizes in megabytes, plus one real container whose
/// payload is measured against the prediction.
pub fn run_storage_report(
    dims: [usize; 3],
    bits: &[u64],
    encoding_dims: &[usize],
    measured: ([usize; 3], u64, usize),
) -> Result<StorageReport> {
    let mut table = Table::new(
        &format!("Storage for {}x{}x{} voxels", dims[0], dims[1], dims[2]),
        "MB",
        bits,
    );
    for &d in encoding_dims {
        let label = if d == 1 { "scalar".to_owned() } else { format!("{d}-dim") };
        table.set(&label, 0, to_megabytes(plain_storage_size(dims, d)));
        for (i, &b) in bits.iter().enumerate() {
            table.set(&label, i + 1, to_megabytes(storage_size(dims, b, d)));
        }
    }
    let (mdims, mbits, mdim) = measured;
    let (_, pk) = keys(mbits, 0)?;
    let voxels = mdims.iter().product::<usize>();
    let vol = cipherray_core::Volume::new(mdims, 8, (0..voxels).map(|i| (i % 256) as u16).collect())?;
    let plain = PlainVolume::encode(&vol, mdim, 3)?;
    let enc = encrypt_volume(
        &plain,
        &pk,
        EncryptOptions { obfuscate: false },
        &mut ChaCha20Rng::seed_from_u64(0),
    )?;
    let bytes = enc.to_bytes();
    let measured_bytes = (bytes.len() - enc.payload_offset() - 4 * enc.payload().len()) as u64;
    table.meta = vec![(
        "measured".into(),
        format!(
            "{}x{}x{} {}bit {}-dim container: {} payload bytes",
            mdims[0], mdims[1], mdims[2], mbits, mdim, measured_bytes
        ),
    )];
    Ok(StorageReport {
        table,
        measured,
        predicted_bytes: storage_size(mdims, mbits, mdim),
        measured_bytes,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn strictly_increasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[0] < w[1])
}

fn column_values(table: &Table, row: &str, columns: &[String]) -> Option<Vec<f64>> {
    columns.iter().map(|c| table.get(row, c)).collect()
}

/// Scaling checks over an X-ray table that has both obfuscation settings
/// and both X-ray modes.
pub fn xray_checks(table: &Table, bits: &[u64]) -> Vec<Check> {
    let cols: Vec<String> = bits.iter().map(|&b| bit_column(b)).collect();
    let mut out = Vec::new();
    for mode in [RenderMode::XrayNn, RenderMode::XrayTrilinear] {
        let row = render_row(mode);
        let values = column_values(table, &row, &cols);
        out.push(Check {
            name: format!("{} time increases with key bits", mode.name()),
            passed: values.as_deref().is_some_and(strictly_increasing),
            detail: format!("{values:?}"),
        });
    }
    let nn = column_values(table, &render_row(RenderMode::XrayNn), &cols);
    let tri = column_values(table, &render_row(RenderMode::XrayTrilinear), &cols);
    out.push(Check {
        name: "trilinear slower than nearest neighbour".into(),
        passed: matches!((&nn, &tri), (Some(a), Some(b)) if a.iter().zip(b).all(|(x, y)| y > x)),
        detail: format!("nn {nn:?} trilinear {tri:?}"),
    });
    let smallest = bit_column(bits.iter().copied().min().unwrap_or(64));
    let with = table.get(&encrypt_row(true), &smallest);
    let without = table.get(&encrypt_row(false), &smallest);
    out.push(Check {
        name: format!("obfuscated encryption over 3x unobfuscated at {smallest}"),
        passed: matches!((with, without), (Some(a), Some(b)) if a > 3.0 * b),
        detail: format!("{with:?} vs {without:?}"),
    });
    out
}

/// Render cost must grow with the node count for every dimension and key.
pub fn tf_checks(table: &Table, dims: &[usize], nodes: &[usize], bits: &[u64]) -> Vec<Check> {
    let mut out = Vec::new();
    for &d in dims {
        for &b in bits {
            let col = bit_column(b);
            let values: Option<Vec<f64>> = nodes.iter().map(|&k| table.get(&tf_render_row(d, k), &col)).collect();
            out.push(Check {
                name: format!("{d}-dim {col} render time increases with node count"),
                passed: values.as_deref().is_some_and(strictly_increasing),
                detail: format!("{values:?}"),
            });
        }
    }
    out
}
