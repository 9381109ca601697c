//! Sequential vs rayon execution of the hot loops. On a single-core host
//! the parallel rows measure scheduling overhead only.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mocolab::augment::{view_batch, AugConfig, AugKind};
use mocolab::compute::kernels::matmul_nn;
use mocolab::compute::Tensor;
use mocolab::encoder::{embeddings, EncoderConfig, ModelParams};
use mocolab::mechanisms::{moco_step, MoCoState};
use mocolab::par::{set_exec_mode, ExecMode};
use mocolab::rng::{Domain, StreamKey};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn modes() -> Vec<(&'static str, ExecMode)> {
    let mut m = vec![("sequential", ExecMode::Sequential)];
    if cfg!(feature = "parallel") {
        m.push(("parallel", ExecMode::Parallel));
    }
    m
}

fn encoder() -> EncoderConfig {
    EncoderConfig { input_hw: 16, channels: vec![16, 32, 64], ..EncoderConfig::default() }
}

fn images(rng: &mut ChaCha8Rng, n: usize, side: usize) -> Tensor {
    Tensor::from_fn(&[n, 3, side, side], |_| rng.random_range(0.0..1.0f32))
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 256;
    let a: Vec<f32> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f32> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut g = c.benchmark_group("matmul_256");
    for (name, mode) in modes() {
        set_exec_mode(mode).unwrap();
        g.bench_function(BenchmarkId::from_parameter(name), |bch| bch.iter(|| matmul_nn(&a, &b, n, n, n)));
    }
    g.finish();
}

fn bench_encoder(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = ModelParams::init(&encoder(), 0).unwrap();
    let x = images(&mut rng, 32, 16);
    let mut g = c.benchmark_group("embed_b32");
    for (name, mode) in modes() {
        set_exec_mode(mode).unwrap();
        g.bench_function(BenchmarkId::from_parameter(name), |bch| bch.iter(|| embeddings(&params, &x).unwrap()));
    }
    g.finish();
}

fn bench_views(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = images(&mut rng, 64, 32);
    let idx: Vec<usize> = (0..64).collect();
    let cfg = AugConfig::new(AugKind::Plus);
    let key = StreamKey::new(Domain::Augment, 0);
    let mut g = c.benchmark_group("views_b64");
    for (name, mode) in modes() {
        set_exec_mode(mode).unwrap();
        g.bench_function(BenchmarkId::from_parameter(name), |bch| bch.iter(|| view_batch(&x, &idx, &cfg, key).unwrap()));
    }
    g.finish();
}

fn bench_moco_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (vq, vk) = (images(&mut rng, 32, 16), images(&mut rng, 32, 16));
    let mut st = MoCoState::new(ModelParams::init(&encoder(), 0).unwrap(), 256, 0.99, 0.2).unwrap();
    while !st.queue.is_filled() {
        moco_step(&mut st, &vq, &vk).unwrap();
    }
    let mut g = c.benchmark_group("moco_step_b32");
    g.sample_size(10);
    for (name, mode) in modes() {
        set_exec_mode(mode).unwrap();
        g.bench_function(BenchmarkId::from_parameter(name), |bch| bch.iter(|| moco_step(&mut st, &vq, &vk).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, bench_matmul, bench_encoder, bench_views, bench_moco_step);
criterion_main!(benches);
