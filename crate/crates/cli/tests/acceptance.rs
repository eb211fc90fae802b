//! Acceptance suite: one PASS/FAIL line per criterion. Runs as a plain
//! binary so criteria keep going after a failure and report in order.

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use cipherray_bench::{
    run_tf_bench, run_xray_bench, tf_checks, xray_checks, BenchConfig, REFERENCE_STORAGE_BITS, REFERENCE_STORAGE_MB,
};
use cipherray_cli::{load_secure_key, run_with, Cli};
use cipherray_core::image::decrypt_image;
use cipherray_core::lut::{encode_input, LookupTable};
use cipherray_core::paillier::{generate_keys, SecureKey};
use cipherray_core::render::{
    finish, render, render_plaintext, render_raw, Camera, RenderMode, RenderRequest, TransferNode,
};
use cipherray_core::volume::{
    encode_density, encrypt_volume, make_synthetic_volume, storage_size, EncryptOptions, PlainVolume,
};
use cipherray_core::{decrypt_float, EncFloat, EncVolume, Image, PlainFloat, PublicKey};
use clap::Parser;
use num_bigint::{BigInt, BigUint, RandBigInt};
use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn keys(bits: u64, seed: u64) -> (SecureKey, PublicKey) {
    generate_keys(bits, &mut ChaCha20Rng::seed_from_u64(seed)).unwrap()
}

fn single_worker<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

fn homomorphism() -> Outcome {
    let start = Instant::now();
    let (sk, pk) = keys(256, 1);
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    for i in 0..1000 {
        let m1 = rng.gen_biguint_below(pk.n());
        let m2 = rng.gen_biguint_below(pk.n());
        let d = rng.gen_biguint_below(pk.n());
        let c1 = pk.encrypt(&m1, &mut rng).unwrap();
        let c2 = pk.encrypt(&m2, &mut rng).unwrap();
        check!(sk.decrypt(&pk.add(&c1, &c2)).unwrap() == (&m1 + &m2) % pk.n(), "sum {i}");
        let scaled = pk.scale(&c1, &BigInt::from(d.clone())).unwrap();
        check!(sk.decrypt(&scaled).unwrap() == (&m1 * &d) % pk.n(), "scale {i}");
    }
    let secs = start.elapsed().as_secs_f64();
    check!(secs < 30.0, "took {secs:.1} s");
    Ok(format!("1000 sums and scalings exact at 256 bits in {secs:.2} s"))
}

fn oblique(size: usize, res: u32) -> Camera {
    let s = size as f64;
    let mut cam = Camera::facing_volume([size; 3], [res, res]);
    cam.eye = [s * 1.8, s * 1.3, s * 2.2];
    cam.fov = 38.0;
    cam
}

fn max_relative_error(got: &Image, want: &Image) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for c in 0..want.channels() {
        let w = want.to_f64(c);
        let (lo, hi) = w.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let range = if hi > lo { hi - lo } else { 1.0 };
        for (p, &o) in got.channel(c).iter().zip(&w) {
            let v = p.value().ok_or("pixel failed to decode")?.to_f64();
            worst = worst.max((v - o).abs() / range);
        }
    }
    Ok(worst)
}

fn render_equivalence() -> Outcome {
    let start = Instant::now();
    let (sk, pk) = keys(128, 2);
    let vol = make_synthetic_volume(32).unwrap();
    let cam = oblique(32, 64);
    let mut emphasize = RenderRequest::new(cam.clone(), RenderMode::Emphasize);
    emphasize.emphasize_density = Some(230.0 / 255.0);
    let mut tf = RenderRequest::new(cam.clone(), RenderMode::ColorTf);
    tf.tf_nodes = Some(vec![
        TransferNode { density: 80.0 / 255.0, color: [0.0, 1.0, 0.0] },
        TransferNode { density: 230.0 / 255.0, color: [1.0, 0.0, 0.3] },
    ]);
    let cases = [
        (RenderRequest::new(cam.clone(), RenderMode::XrayNn), 1),
        (RenderRequest::new(cam, RenderMode::XrayTrilinear), 1),
        (emphasize, 4),
        (tf, 4),
    ];
    let mut rng = ChaCha20Rng::seed_from_u64(12);
    let mut report = Vec::new();
    for (req, dim) in cases {
        check!(req.gamma == 6, "gamma {}", req.gamma);
        let plain = PlainVolume::encode(&vol, dim, 6).unwrap();
        let enc = encrypt_volume(&plain, &pk, Default::default(), &mut rng).unwrap();
        let img = single_worker(|| render(&enc, &req, &mut rng)).map_err(|e| e.to_string())?;
        let got = decrypt_image(&img, &sk);
        let want = render_plaintext(&plain, &req).unwrap();
        let err = max_relative_error(&got, &want)?;
        check!(err <= 1e-3, "{} error {err:e}", req.mode.name());
        report.push(format!("{} {err:.1e}", req.mode.name()));
    }
    let secs = start.elapsed().as_secs_f64();
    check!(secs < 600.0, "took {secs:.0} s");
    Ok(format!("32^3, 64x64, 128 bits: {} ({secs:.1} s, one worker)", report.join(", ")))
}

fn storage_accounting() -> Outcome {
    for (d, row) in REFERENCE_STORAGE_MB.iter().enumerate() {
        let dim = d + 1;
        check!(
            cipherray_core::volume::plain_storage_size([100; 3], dim) == row[0] * 1_000_000,
            "plain {dim}"
        );
        for (&bits, &mb) in REFERENCE_STORAGE_BITS.iter().zip(&row[1..]) {
            let got = storage_size([100; 3], bits, dim);
            check!(got == mb * 1_000_000, "{dim}-dim {bits} bit: {got} bytes, expected {mb} MB");
        }
    }
    let (_, pk) = keys(64, 3);
    let plain = PlainVolume::encode(&make_synthetic_volume(100).unwrap(), 1, 3).unwrap();
    let enc = encrypt_volume(&plain, &pk, EncryptOptions { obfuscate: false }, &mut ChaCha20Rng::seed_from_u64(3))
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.cvol");
    enc.save(&path).unwrap();
    let file_len = std::fs::metadata(&path).unwrap().len();
    let exponent_sidecar = 4 * 1_000_000;
    let payload = file_len - enc.payload_offset() as u64 - exponent_sidecar;
    check!(payload == 16_000_000, "payload {payload} bytes");
    Ok(format!("28 cells exact; 100^3 scalar 64-bit file carries {payload} payload bytes"))
}

fn division_bound() -> Outcome {
    let (sk, pk) = keys(128, 4);
    let mut rng = ChaCha20Rng::seed_from_u64(14);
    for i in 0..1000 {
        let x = PlainFloat::new(rng.gen_range(-10_000_000i64..=10_000_000), -rng.gen_range(0..4));
        let n: u64 = rng.gen_range(1..=5000);
        let gamma = if rng.gen() { 3 } else { 6 };
        let c = EncFloat::encrypt(&x, &pk, &mut rng).unwrap();
        let q = decrypt_float(&c.div_plain(n, gamma, &pk).unwrap(), &sk).unwrap().to_ratio();
        let exact = x.to_ratio() / BigRational::from_integer(BigInt::from(n));
        let bound = x.to_ratio() / BigRational::from_integer(BigInt::from(10u32).pow(gamma));
        let err = q - exact;
        check!(err.clone() * err.clone() <= bound.clone() * bound, "case {i}: {x:?} / {n} at {gamma}");
    }
    let ten = EncFloat::encrypt(&PlainFloat::from_integer(10), &pk, &mut rng).unwrap();
    let q = decrypt_float(&ten.div_plain(4, 3, &pk).unwrap(), &sk).unwrap();
    check!(q.value_eq(&PlainFloat::new(25, -1)), "10/4 gave {q:?}");
    Ok("1000 quotients within |x|*10^-gamma; 10/4 at gamma 3 is exactly 2.5".into())
}

fn lookup_table() -> Outcome {
    let start = Instant::now();
    let (sk, pk) = keys(128, 5);
    let mut rng = ChaCha20Rng::seed_from_u64(15);
    let domain: Vec<i64> = (0..256).collect();
    let outputs: Vec<i64> = domain.iter().map(|_| rng.gen_range(-100_000..=100_000)).collect();
    let table = LookupTable::from_integers(&domain, &outputs).map_err(|e| e.to_string())?;
    let residues = table.residues(&pk).unwrap();
    for (&x, &y) in domain.iter().zip(&outputs) {
        let input = encode_input(x, 256, &pk, &mut rng).unwrap();
        let got = decrypt_float(&table.evaluate_with(&input, &residues, &pk).unwrap(), &sk).unwrap();
        check!(got == PlainFloat::from_integer(y), "x = {x}: {got:?} != {y}");
    }
    let secs = start.elapsed().as_secs_f64();
    check!(secs < 60.0, "took {secs:.1} s");
    Ok(format!("256 of 256 lookups exact at 128 bits in {secs:.2} s"))
}

fn density_encoding() -> Outcome {
    let grid: Vec<f64> = (0..1000).map(|i| f64::from(i) / 999.0).collect();
    let response = |a: f64, b: f64, d: usize| encode_density(a, d).unwrap().dot(&encode_density(b, d).unwrap());
    for d in 2..=8 {
        for &rho in &grid {
            let n = encode_density(rho, d).unwrap().norm();
            check!((n - 1.0).abs() <= 1e-9, "norm {n} at {rho}, dim {d}");
        }
        for &rho0 in grid.iter().step_by(37) {
            let best = grid
                .iter()
                .copied()
                .max_by(|&a, &b| response(a, rho0, d).total_cmp(&response(b, rho0, d)))
                .unwrap();
            check!(
                response(best, rho0, d) <= response(rho0, rho0, d) + 1e-12,
                "dim {d}: argmax {best} for {rho0}"
            );
        }
    }
    let fwhm = |rho0: f64, d: usize| {
        let above: Vec<f64> = grid.iter().copied().filter(|&r| response(r, rho0, d) >= 0.5).collect();
        above.last().unwrap() - above.first().unwrap()
    };
    for rho0 in [0.2, 0.5, 0.8] {
        check!(fwhm(rho0, 6) < fwhm(rho0, 3), "FWHM at {rho0}");
    }
    Ok(format!(
        "unit norms, self-response maxima, FWHM {:.3} (dim 6) < {:.3} (dim 3)",
        fwhm(0.5, 6),
        fwhm(0.5, 3)
    ))
}

fn exponent_equalization() -> Outcome {
    let (sk, pk) = keys(128, 6);
    let mut rng = ChaCha20Rng::seed_from_u64(16);
    let plain = PlainVolume::encode(&make_synthetic_volume(16).unwrap(), 3, 6).unwrap();
    let enc = encrypt_volume(&plain, &pk, Default::default(), &mut rng).unwrap();
    let mut req = RenderRequest::new(oblique(16, 12), RenderMode::ColorTf);
    req.tf_nodes = Some(vec![
        TransferNode { density: 0.3, color: [0.2, 1.0, 0.0] },
        TransferNode { density: 0.9, color: [1.0, 0.5, 0.25] },
    ]);
    let raw = render_raw(&enc, &req).unwrap();
    let min = raw.channels.iter().flatten().map(EncFloat::exponent).min().unwrap();
    let distinct: HashSet<i32> = raw.channels.iter().flatten().map(EncFloat::exponent).collect();
    let before: Vec<Vec<PlainFloat>> = raw
        .channels
        .iter()
        .map(|c| c.iter().map(|v| decrypt_float(v, &sk).unwrap()).collect())
        .collect();
    let img = finish(raw, req.gamma, &pk, &mut rng).unwrap();
    check!(img.exponents().iter().all(|&e| e == min), "{:?} vs {min}", img.exponents());
    let after = decrypt_image(&img, &sk);
    for (c, values) in before.iter().enumerate() {
        for (p, b) in after.channel(c).iter().zip(values) {
            check!(p.value().is_some_and(|v| v.value_eq(b)), "channel {c} changed");
        }
    }
    Ok(format!(
        "{} pre-pass exponents lowered to {min} on all 3 channels, values unchanged",
        distinct.len()
    ))
}

fn probabilistic_encryption() -> Outcome {
    let (sk, pk) = keys(128, 7);
    let mut rng = ChaCha20Rng::seed_from_u64(17);
    let m = BigUint::from(123_456_789u32);
    let cts: HashSet<BigUint> = (0..100).map(|_| pk.encrypt(&m, &mut rng).unwrap().into_value()).collect();
    check!(cts.len() == 100, "{} distinct of 100", cts.len());
    let plain = PlainVolume::encode(&make_synthetic_volume(16).unwrap(), 1, 6).unwrap();
    let enc = encrypt_volume(&plain, &pk, Default::default(), &mut rng).unwrap();
    let req = RenderRequest::new(oblique(16, 16), RenderMode::XrayTrilinear);
    let a = render(&enc, &req, &mut rng).unwrap();
    let b = render(&enc, &req, &mut rng).unwrap();
    let same = a.mantissas(0).iter().zip(b.mantissas(0)).filter(|(x, y)| x == y).count();
    check!(same == 0, "{same} ciphertexts repeated");
    check!(decrypt_image(&a, &sk) == decrypt_image(&b, &sk), "images differ");
    Ok("100 distinct ciphertexts; two renders share no ciphertext and decrypt identically".into())
}

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_owned();
    let mut config = cipherray_server::Config::new(dir.path().join("server"));
    config.workers = 2;
    let addr = cipherray_server::spawn(config).map_err(|e| e.to_string())?;
    let server = format!("http://{addr}");
    let run = |args: &[&str]| -> Result<String, String> {
        let mut full = vec!["cipherray", "--server", &server, "--gamma", "6"];
        let (pk, sk) = (p("k.pk"), p("k.sk"));
        full.extend(["--pk", &pk, "--sk", &sk]);
        full.extend_from_slice(args);
        let cli = Cli::try_parse_from(full).map_err(|e| e.to_string())?;
        let mut out = Vec::new();
        run_with(cli, &mut out, &mut Vec::new()).map_err(|e| format!("{e:#}"))?;
        Ok(String::from_utf8(out).unwrap())
    };
    run(&["keygen", "--bits", "128"])?;
    run(&["phantom", "--size", "24", "--out", &p("v.rvol")])?;
    run(&["encrypt", "-i", &p("v.rvol"), "-o", &p("v.cvol")])?;
    let id = run(&["upload", "-i", &p("v.cvol")])?.trim().to_owned();
    run(&[
        "render", "--id", &id, "--mode", "xray_trilinear", "--resolution", "24x20", "--eye", "40,30,50", "--look-at",
        "11.5,11.5,11.5", "--fov", "35", "-o", &p("remote.pgm"),
    ])?;

    let sk = load_secure_key(std::path::Path::new(&p("k.sk"))).unwrap();
    let enc = EncVolume::load(p("v.cvol")).unwrap();
    let mut cam = Camera::facing_volume([24; 3], [24, 20]);
    cam.eye = [40.0, 30.0, 50.0];
    cam.look_at = [11.5; 3];
    cam.fov = 35.0;
    let req = RenderRequest::new(cam, RenderMode::XrayTrilinear);
    let local = decrypt_image(&render(&enc, &req, &mut ChaCha20Rng::seed_from_u64(19)).unwrap(), &sk);
    let remote = std::fs::read(p("remote.pgm")).unwrap();
    check!(remote == local.to_netpbm(), "remote image differs from the in-process render");
    let plain = PlainVolume::encode(&make_synthetic_volume(24).unwrap(), 1, 6).unwrap();
    check!(local.to_u8() == render_plaintext(&plain, &req).unwrap().to_u8(), "differs from plaintext render");
    let lit = local.to_u8().iter().filter(|&&v| v > 0).count();
    Ok(format!("CLI over HTTP equals in-process render on all 480 pixels ({lit} non-zero)"))
}

fn benchmark_structure() -> Outcome {
    let bits = [64, 128, 256];
    let cfg = BenchConfig {
        size: 24,
        resolution: 32,
        repeats: 3,
        ..Default::default()
    };
    let xray = run_xray_bench(
        &cfg,
        &bits,
        &[true, false],
        &[RenderMode::XrayNn, RenderMode::XrayTrilinear],
    )
    .map_err(|e| e.to_string())?;
    let tf = run_tf_bench(&cfg, &[3], &[1, 2, 3], &[64]).map_err(|e| e.to_string())?;
    let checks: Vec<_> = xray_checks(&xray, &bits).into_iter().chain(tf_checks(&tf, &[3], &[1, 2, 3], &[64])).collect();
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| format!("{} {}", c.name, c.detail)).collect();
    check!(failed.is_empty(), "{}", failed.join("; "));
    Ok(format!("{} scaling checks hold on 24^3 / 32x32, one worker", checks.len()))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("homomorphism", homomorphism),
        ("render equivalence", render_equivalence),
        ("storage accounting", storage_accounting),
        ("division bound", division_bound),
        ("lookup table exactness", lookup_table),
        ("density encoding", density_encoding),
        ("exponent equalization", exponent_equalization),
        ("probabilistic encryption", probabilistic_encryption),
        ("end-to-end protocol", end_to_end),
        ("benchmark structure", benchmark_structure),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|w| name.contains(w.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {:>2} {name} [{secs:.1}s]: {detail}", i + 1),
            Err(detail) => {
                failures += 1;
                println!("FAIL criterion {:>2} {name} [{secs:.1}s]: {detail}", i + 1);
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
