//! Forward-path benchmarks: rayon rows vs. the sequential fallback, the
//! patch-size independence of hard inference, and hard vs. soft cost.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use convtab_core::fern::SoftConfig;
use convtab_core::layer::{forward_hard, forward_hard_serial, forward_soft};
use convtab_core::network::{LayerSpec, Network, NetworkSpec};
use convtab_core::tensor::Tensor3;
use convtab_core::Layer;

fn random_image(h: usize, w: usize, d: usize, seed: u64) -> Tensor3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..h * w * d).map(|_| rng.gen_range(0.0..1.0)).collect();
    Tensor3::from_data(h, w, d, data).unwrap()
}

fn layer_with_patch(l: usize) -> Network {
    let spec = NetworkSpec {
        input: (32, 32, 3),
        layers: vec![
            LayerSpec::ct(l, 8, 8, 32),
            LayerSpec::AvgPool { l: 32 - l + 1, stride: 1 },
        ],
        classes: 32,
    };
    Network::build(&spec, 42).unwrap()
}

fn bench_parallel_vs_serial(c: &mut Criterion) {
    let net = layer_with_patch(5);
    let Layer::Ct(ct) = &net.layers()[0] else { unreachable!() };
    let image = random_image(32, 32, 3, 7);
    let mut group = c.benchmark_group("forward_hard");
    group.bench_function("parallel", |b| b.iter(|| forward_hard(&image, ct).unwrap()));
    group.bench_function("serial", |b| b.iter(|| forward_hard_serial(&image, ct).unwrap()));
    group.finish();
}

fn bench_patch_size_independence(c: &mut Criterion) {
    let image = random_image(32, 32, 3, 7);
    let mut group = c.benchmark_group("hard_by_patch_size");
    for l in [3usize, 9] {
        let net = layer_with_patch(l);
        let Layer::Ct(ct) = &net.layers()[0] else { unreachable!() };
        let ct = ct.clone();
        // normalize by location count so l=3 and l=9 figures are comparable
        let locations = ((32 - l + 1) * (32 - l + 1)) as u64;
        group.throughput(criterion::Throughput::Elements(locations));
        group.bench_with_input(BenchmarkId::from_parameter(l), &ct, |b, ct| {
            b.iter(|| forward_hard_serial(&image, ct).unwrap())
        });
    }
    group.finish();
}

fn bench_hard_vs_soft(c: &mut Criterion) {
    let net = layer_with_patch(5);
    let Layer::Ct(ct) = &net.layers()[0] else { unreachable!() };
    let image = random_image(32, 32, 3, 7);
    // half-width chosen to leave roughly a fifth of the bits ambiguous
    let cfg = SoftConfig::new(0.35, 1e-8).unwrap();
    let mut group = c.benchmark_group("hard_vs_soft");
    group.bench_function("hard", |b| b.iter(|| forward_hard_serial(&image, ct).unwrap()));
    group.bench_function("soft", |b| b.iter(|| forward_soft(&image, ct, &cfg).unwrap()));
    group.finish();
}

criterion_group!(benches, bench_parallel_vs_serial, bench_patch_size_independence, bench_hard_vs_soft);
criterion_main!(benches);
