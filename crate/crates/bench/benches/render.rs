use cipherray_core::paillier::generate_keys;
use cipherray_core::render::{render, Camera, RenderMode, RenderRequest};
use cipherray_core::volume::{encrypt_volume, make_synthetic_volume, PlainVolume};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn renders(c: &mut Criterion) {
    let mut group = c.benchmark_group("render_16c_8px");
    group.sample_size(10);
    let vol = make_synthetic_volume(16).unwrap();
    for bits in [64u64, 128] {
        let mut rng = ChaCha20Rng::seed_from_u64(bits);
        let (_, pk) = generate_keys(bits, &mut rng).unwrap();
        for (mode, dim) in [(RenderMode::XrayNn, 1), (RenderMode::XrayTrilinear, 1), (RenderMode::Emphasize, 4)] {
            let plain = PlainVolume::encode(&vol, dim, 3).unwrap();
            let enc = encrypt_volume(&plain, &pk, Default::default(), &mut rng).unwrap();
            let mut req = RenderRequest::new(Camera::facing_volume([16; 3], [8, 8]), mode);
            req.gamma = 3;
            req.emphasize_density = (mode == RenderMode::Emphasize).then_some(0.5);
            group.bench_with_input(BenchmarkId::new(mode.name(), bits), &bits, |b, _| {
                b.iter(|| render(&enc, &req, &mut rng).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, renders);
criterion_main!(benches);
