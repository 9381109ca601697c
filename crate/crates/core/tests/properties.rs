use mocolab::compute::kernels::{matmul_nn, matmul_nt};
use mocolab::compute::{Graph, Tensor};
use mocolab::contrastive::{infonce_loss, ContrastiveBatch};
use mocolab::encoder::{EncoderConfig, HeadKind, ModelParams};
use mocolab::mechanisms::{momentum_update, NegativeQueue};
use mocolab::par::{set_exec_mode, ExecMode};
use mocolab::trainer::{lr_at, Schedule};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-3 {
                break v.iter().map(|x| x / n).collect();
            }
        })
        .collect()
}

fn brute(q: &[Vec<f64>], k: &[Vec<f64>], n: &[Vec<f64>], tau: f64) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    q.iter()
        .zip(k)
        .map(|(qi, ki)| {
            let pos = (dot(qi, ki) / tau).exp();
            let all = pos + n.iter().map(|nj| (dot(qi, nj) / tau).exp()).sum::<f64>();
            -(pos / all).ln()
        })
        .sum::<f64>()
        / q.len() as f64
}

fn tiny() -> EncoderConfig {
    EncoderConfig { input_hw: 8, channels: vec![2, 3, 4], head_kind: HeadKind::Mlp, head_hidden: 5, embed_dim: 3 }
}

fn dist(a: &ModelParams, b: &ModelParams) -> f64 {
    a.iter()
        .zip(b.iter())
        .flat_map(|((_, x), (_, y))| x.data().iter().zip(y.data()).map(|(&u, &v)| (u as f64 - v as f64).powi(2)))
        .sum::<f64>()
        .sqrt()
}

proptest! {
    #[test]
    fn infonce_equals_brute_force(seed in any::<u64>(), b in 1usize..8, n in 1usize..64, d in 2usize..12, tau in 0.05f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, k, neg) = (unit_rows(&mut rng, b, d), unit_rows(&mut rng, b, d), unit_rows(&mut rng, n, d));
        let mut g = Graph::<f64>::new();
        let qv = g.constant(Tensor::from_rows(&q).unwrap());
        let kv = g.constant(Tensor::from_rows(&k).unwrap());
        let nv = g.constant(Tensor::from_rows(&neg).unwrap());
        let batch = ContrastiveBatch::new(&g, qv, kv, nv, tau).unwrap();
        let l = infonce_loss(&mut g, &batch).unwrap();
        prop_assert!((g.value(l).item() - brute(&q, &k, &neg, tau)).abs() < 1e-9);
    }

    #[test]
    fn queue_matches_replay(seed in any::<u64>(), b in 1usize..5, r in 1usize..6, d in 1usize..4, pushes in 0usize..25) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut q = NegativeQueue::new(b * r, d).unwrap();
        let mut replay: Vec<f32> = Vec::new();
        for _ in 0..pushes {
            let keys: Tensor = Tensor::from_rows(&unit_rows(&mut rng, b, d)).unwrap().cast();
            q.enqueue(&keys).unwrap();
            replay.extend_from_slice(keys.data());
        }
        let keep = (b * r * d).min(replay.len());
        let contents = q.contents();
        prop_assert_eq!(contents.data(), &replay[replay.len() - keep..]);
        prop_assert_eq!(q.len(), keep / d);
        prop_assert_eq!(q.is_filled(), pushes >= r);
    }

    #[test]
    fn ema_contracts_toward_the_query(seed in 0u64..1000, m in 0.0f64..1.0) {
        let q = ModelParams::init(&tiny(), seed).unwrap();
        let mut k = ModelParams::init(&tiny(), seed + 1).unwrap();
        let before = dist(&k, &q);
        momentum_update(&mut k, &q, m).unwrap();
        prop_assert!((dist(&k, &q) - m * before).abs() < 1e-6);
    }

    #[test]
    fn lr_never_increases(lr0 in 0.001f64..1.0, total in 1usize..400, cos in any::<bool>()) {
        let s = if cos { Schedule::Cos } else { Schedule::Step };
        let mut prev = f64::INFINITY;
        for t in 0..=total {
            let lr = lr_at(s, lr0, t, total).unwrap();
            prop_assert!(lr <= prev && lr >= 0.0 && lr <= lr0);
            prev = lr;
        }
    }
}

#[test]
fn step_schedule_has_two_drops() {
    let lrs: Vec<f64> = (0..=100).map(|t| lr_at(Schedule::Step, 0.1, t, 100).unwrap()).collect();
    let drops = lrs.windows(2).filter(|w| w[1] < w[0]).count();
    assert_eq!(drops, 2);
    assert!((lrs[100] - 0.001).abs() < 1e-12);
    assert!(lr_at(Schedule::Cos, 0.1, 101, 100).is_err());
}

#[cfg(feature = "parallel")]
#[test]
fn sequential_and_parallel_are_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (m, k, n) = (67, 45, 129);
    let a: Vec<f32> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f32> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let bt: Vec<f32> = (0..n * k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let cfg = EncoderConfig { input_hw: 16, channels: vec![8, 16, 16], ..EncoderConfig::default() };
    let params = ModelParams::init(&cfg, 1).unwrap();
    let images = Tensor::from_fn(&[6, 3, 16, 16], |_| rng.random_range(0.0..1.0f32));

    let run = |mode| {
        set_exec_mode(mode).unwrap();
        let out = (
            matmul_nn(&a, &b, m, k, n),
            matmul_nt(&a, &bt, m, k, n),
            mocolab::encoder::embeddings(&params, &images).unwrap(),
        );
        set_exec_mode(ExecMode::Parallel).unwrap();
        out
    };
    let seq = run(ExecMode::Sequential);
    let par = run(ExecMode::Parallel);
    assert_eq!(seq.0, par.0);
    assert_eq!(seq.1, par.1);
    assert_eq!(seq.2, par.2);
}
