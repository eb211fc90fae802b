//! The trusted client. Everything that touches the secure key lives here.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, ensure, Context};
use cipherray_bench::{
    run_storage_report, run_tf_bench, run_xray_bench, tf_checks, xray_checks, BenchConfig, Check, Table,
    REFERENCE_STORAGE_BITS,
};
use cipherray_core::image::decrypt_image;
use cipherray_core::paillier::{generate_keys, SecureKey, MIN_KEY_BITS};
use cipherray_core::render::{Camera, RenderMode, RenderRequest, TransferNode};
use cipherray_core::volume::{encrypt_volume, make_synthetic_volume, EncryptOptions, PlainVolume};
use cipherray_core::{EncImage, EncVolume, Image, PublicKey, Volume, DEFAULT_GAMMA};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::rngs::OsRng;

pub mod client;

pub use client::Client;

#[derive(Debug, Parser)]
#[command(name = "cipherray", version, about = "Client for privacy-preserving volume rendering")]
pub struct Cli {
    /// Render server base URL.
    #[arg(long, global = true, env = "CIPHERRAY_SERVER", default_value = "http://127.0.0.1:8080")]
    pub server: String,
    /// Public key file.
    #[arg(long, global = true, env = "CIPHERRAY_PK")]
    pub pk: Option<PathBuf>,
    /// Secure key file.
    #[arg(long, global = true, env = "CIPHERRAY_SK")]
    pub sk: Option<PathBuf>,
    /// Fractional decimal digits for encoding and rendering.
    #[arg(long, global = true, default_value_t = DEFAULT_GAMMA)]
    pub gamma: u32,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a key pair and write it to --pk and --sk.
    Keygen {
        #[arg(long, default_value_t = 2048, value_parser = parse_bits)]
        bits: u64,
    },
    /// Write the synthetic three-object test volume.
    Phantom {
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Encrypt a raw volume with the public key.
    Encrypt {
        #[arg(long, short)]
        input: PathBuf,
        /// Density encoding dimension; 1 stores scalars.
        #[arg(long, default_value_t = 1)]
        dim: usize,
        #[arg(long, short)]
        out: PathBuf,
        /// Skip the random factor (benchmarks only).
        #[arg(long)]
        no_obfuscate: bool,
    },
    /// Upload an encrypted volume and print its id.
    Upload {
        #[arg(long, short)]
        input: PathBuf,
    },
    /// Request a render, decrypt it and write a PGM/PPM image.
    Render(RenderArgs),
    /// Decrypt a stored encrypted image.
    DecryptImage {
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Run the timing and storage reports.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Volume id returned by upload.
    #[arg(long)]
    pub id: String,
    #[arg(long, default_value = "xray_nn", value_parser = parse_mode)]
    pub mode: RenderMode,
    /// Image size as WIDTHxHEIGHT.
    #[arg(long, default_value = "64x64", value_parser = parse_resolution)]
    pub resolution: [u32; 2],
    /// Camera position as x,y,z; defaults to a view along -z.
    #[arg(long, value_parser = parse_vec3)]
    pub eye: Option<[f64; 3]>,
    #[arg(long, value_parser = parse_vec3)]
    pub look_at: Option<[f64; 3]>,
    #[arg(long, value_parser = parse_vec3, default_value = "0,1,0")]
    pub up: [f64; 3],
    /// Vertical field of view in degrees.
    #[arg(long, default_value_t = 30.0)]
    pub fov: f64,
    /// Target density for the emphasize mode.
    #[arg(long)]
    pub density: Option<f64>,
    /// Transfer function node as density:r,g,b; repeat for more nodes.
    #[arg(long = "node", value_parser = parse_node)]
    pub nodes: Vec<TransferNode>,
    #[arg(long, default_value_t = cipherray_core::render::DEFAULT_STEP_SIZE)]
    pub step: f64,
    #[arg(long, short)]
    pub out: PathBuf,
    /// Also keep the encrypted image.
    #[arg(long)]
    pub save_encrypted: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutFormat {
    Csv,
    Md,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Volume edge lengths.
    #[arg(long, value_delimiter = ',', default_value = "32")]
    pub sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "64,128,256", value_parser = parse_bits)]
    pub bits: Vec<u64>,
    /// Any of xray_nn, xray_trilinear, color_tf, storage.
    #[arg(long, value_delimiter = ',', default_value = "xray_nn,xray_trilinear,color_tf,storage")]
    pub modes: Vec<String>,
    #[arg(long, value_enum, default_value = "md")]
    pub out_format: OutFormat,
    #[arg(long, default_value_t = 64)]
    pub resolution: u32,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// Encoding dimensions for the transfer function report.
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    pub dims: Vec<usize>,
    /// Node counts for the transfer function report.
    #[arg(long = "node-counts", value_delimiter = ',', default_value = "1,2,3,4")]
    pub node_counts: Vec<usize>,
}

fn parse_bits(s: &str) -> Result<u64, String> {
    let bits: u64 = s.parse().map_err(|e| format!("{e}"))?;
    if !bits.is_multiple_of(2) || bits < MIN_KEY_BITS {
        return Err(format!("key size must be even and at least {MIN_KEY_BITS}"));
    }
    Ok(bits)
}

fn parse_mode(s: &str) -> Result<RenderMode, String> {
    RenderMode::from_str(s).map_err(|e| e.to_string())
}

fn parse_resolution(s: &str) -> Result<[u32; 2], String> {
    let (w, h) = s.split_once('x').ok_or("expected WIDTHxHEIGHT")?;
    Ok([w.parse().map_err(|e| format!("{e}"))?, h.parse().map_err(|e| format!("{e}"))?])
}

fn parse_vec3(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{e}")))
        .collect::<Result<_, _>>()?;
    parts.try_into().map_err(|_| "expected x,y,z".to_owned())
}

fn parse_node(s: &str) -> Result<TransferNode, String> {
    let (density, color) = s.split_once(':').ok_or("expected density:r,g,b")?;
    Ok(TransferNode {
        density: density.parse().map_err(|e| format!("{e}"))?,
        color: parse_vec3(color)?,
    })
}

fn need<'a>(path: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a Path> {
    path.as_deref().with_context(|| format!("--{flag} is required for this command"))
}

pub fn load_public_key(path: &Path) -> anyhow::Result<PublicKey> {
    PublicKey::load(path).with_context(|| format!("reading public key {}", path.display()))
}

pub fn load_secure_key(path: &Path) -> anyhow::Result<SecureKey> {
    SecureKey::load(path).with_context(|| format!("reading secure key {}", path.display()))
}

impl RenderArgs {
    /// Builds the request; the default camera needs the volume dimensions.
    pub fn request(&self, dims: [usize; 3], gamma: u32) -> RenderRequest {
        let mut camera = Camera::facing_volume(dims, self.resolution);
        if let Some(eye) = self.eye {
            camera.eye = eye;
        }
        if let Some(at) = self.look_at {
            camera.look_at = at;
        }
        camera.up = self.up;
        camera.fov = self.fov;
        let mut req = RenderRequest::new(camera, self.mode);
        req.emphasize_density = self.density;
        req.tf_nodes = (!self.nodes.is_empty()).then(|| self.nodes.clone());
        req.step_size = self.step;
        req.gamma = gamma;
        req
    }
}

/// Decrypts an image and reports pixels that did not decode.
pub fn decrypt_checked(image: &EncImage, sk: &SecureKey, err: &mut impl Write) -> anyhow::Result<Image> {
    if !image.matches_key(sk.public_key()) {
        writeln!(err, "warning: image was rendered under a different key; output will be noise")?;
    }
    let img = decrypt_image(image, sk);
    let bad = img.overflow_count();
    if bad > 0 {
        writeln!(
            err,
            "warning: {bad} pixel value(s) fell outside the plaintext range (wrong key or tampered data)"
        )?;
    }
    Ok(img)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    run_with(cli, &mut std::io::stdout(), &mut std::io::stderr())
}

pub fn run_with(cli: Cli, out: &mut impl Write, err: &mut impl Write) -> anyhow::Result<()> {
    match &cli.command {
        Command::Keygen { bits } => {
            let (pk_path, sk_path) = (need(&cli.pk, "pk")?, need(&cli.sk, "sk")?);
            let (sk, pk) = generate_keys(*bits, &mut OsRng)?;
            pk.save(pk_path)?;
            sk.save(sk_path)?;
            writeln!(out, "{}", pk.fingerprint_hex())?;
        }
        Command::Phantom { size, out: path } => {
            make_synthetic_volume(*size)?.save_raw(path)?;
        }
        Command::Encrypt {
            input,
            dim,
            out: path,
            no_obfuscate,
        } => {
            let pk = load_public_key(need(&cli.pk, "pk")?)?;
            let vol = Volume::load_raw(input).with_context(|| format!("reading volume {}", input.display()))?;
            let plain = PlainVolume::encode(&vol, *dim, cli.gamma)?;
            let options = EncryptOptions {
                obfuscate: !no_obfuscate,
            };
            let enc = encrypt_volume(&plain, &pk, options, &mut OsRng)?;
            enc.save(path)?;
            writeln!(out, "{} bytes", enc.serialized_len())?;
        }
        Command::Upload { input } => {
            let bytes = std::fs::read(input).with_context(|| format!("reading {}", input.display()))?;
            ensure!(!bytes.is_empty(), "{} is empty", input.display());
            writeln!(out, "{}", Client::new(&cli.server).upload(&bytes)?)?;
        }
        Command::Render(args) => {
            let sk = load_secure_key(need(&cli.sk, "sk")?)?;
            let client = Client::new(&cli.server);
            let dims = client.volume_dims(&args.id)?;
            let req = args.request(dims, cli.gamma);
            let enc = client.render(&args.id, &req)?;
            if let Some(path) = &args.save_encrypted {
                enc.save(path)?;
            }
            decrypt_checked(&enc, &sk, err)?.save_netpbm(&args.out)?;
        }
        Command::DecryptImage { input, out: path } => {
            let sk = load_secure_key(need(&cli.sk, "sk")?)?;
            let bytes = std::fs::read(input).with_context(|| format!("reading {}", input.display()))?;
            ensure!(!bytes.is_empty(), "{} is empty", input.display());
            let enc = EncImage::from_bytes(&bytes)?;
            decrypt_checked(&enc, &sk, err)?.save_netpbm(path)?;
        }
        Command::Bench(args) => bench(args, out)?,
    }
    Ok(())
}

fn emit(table: &Table, format: OutFormat, out: &mut impl Write) -> std::io::Result<()> {
    match format {
        OutFormat::Csv => writeln!(out, "{}", table.to_csv()),
        OutFormat::Md => writeln!(out, "{}", table.to_markdown()),
    }
}

fn bench(args: &BenchArgs, out: &mut impl Write) -> anyhow::Result<()> {
    let mut xray_modes = Vec::new();
    let (mut tf, mut storage) = (false, false);
    for m in &args.modes {
        match m.as_str() {
            "storage" => storage = true,
            "color_tf" => tf = true,
            other => match RenderMode::from_str(other)? {
                mode @ (RenderMode::XrayNn | RenderMode::XrayTrilinear) => xray_modes.push(mode),
                _ => bail!("bench mode {other} is not supported"),
            },
        }
    }
    let mut checks: Vec<Check> = Vec::new();
    for &size in &args.sizes {
        let cfg = BenchConfig {
            size,
            resolution: args.resolution,
            workers: args.workers,
            repeats: args.repeats,
            ..Default::default()
        };
        if !xray_modes.is_empty() {
            let table = run_xray_bench(&cfg, &args.bits, &[true, false], &xray_modes)?;
            emit(&table, args.out_format, out)?;
            if xray_modes.len() == 2 {
                checks.extend(xray_checks(&table, &args.bits));
            }
        }
        if tf {
            let table = run_tf_bench(&cfg, &args.dims, &args.node_counts, &args.bits)?;
            emit(&table, args.out_format, out)?;
            checks.extend(tf_checks(&table, &args.dims, &args.node_counts, &args.bits));
        }
    }
    if storage {
        let report = run_storage_report([100; 3], &REFERENCE_STORAGE_BITS, &[1, 2, 3, 4], ([16; 3], 64, 1))?;
        emit(&report.table, args.out_format, out)?;
    }
    for c in &checks {
        writeln!(out, "{} {} {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail)?;
    }
    ensure!(checks.iter().all(|c| c.passed), "benchmark scaling checks failed");
    Ok(())
}

/// Reads an encrypted volume, mostly for callers that want its metadata.
pub fn load_volume(path: &Path) -> anyhow::Result<EncVolume> {
    EncVolume::load(path).with_context(|| format!("reading {}", path.display()))
}
