//! Dense tensors and a reverse-mode autodiff graph, sized for a small conv
//! encoder and the contrastive loss.

mod graph;
pub mod gradcheck;
pub mod kernels;
mod tensor;

pub use graph::{Graph, OpKind, Var, NORM_FLOOR};
pub use gradcheck::{grad_check, GradCheckReport};
pub use tensor::{Real, Tensor};

#[cfg(test)]
mod tests {
    use super::gradcheck::{analytic_gradients, compare, numeric_gradients};
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Naive triple loop, independent of the blocked kernel.
    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k) = a.dims2().unwrap();
        let n = b.dims2().unwrap().1;
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    c[i * n + j] += a.data()[i * k + t] * b.data()[t * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_known_product_and_identity() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = g.constant(Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);

        let m = Tensor::from_fn(&[3, 3], |i| i as f32 * 0.5 - 1.0);
        let i3 = g.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let mv = g.constant(m.clone());
        let p = g.matmul(i3, mv).unwrap();
        assert_eq!(g.value(p), &m);
    }

    #[test]
    fn matmul_matches_naive_on_odd_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &(m, k, n) in &[(1, 1, 1), (9, 17, 300), (13, 5, 257), (2, 40, 3)] {
            let a = rand_t(&mut rng, &[m, k]);
            let b = rand_t(&mut rng, &[k, n]);
            let got = kernels::matmul_nn(a.data(), b.data(), m, k, n);
            for (x, y) in got.iter().zip(naive_matmul(&a, &b)) {
                assert!((x - y).abs() < 1e-12);
            }
            let bt = kernels::transpose(b.data(), k, n);
            assert_eq!(kernels::matmul_nt(a.data(), &bt, m, k, n), got);
        }
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Dimension(_)));
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_grad_check() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = [rand_t(&mut rng, &[2, 3]), rand_t(&mut rng, &[3, 2])];
            let r = grad_check(
                |g, v| {
                    let c = g.matmul(v[0], v[1])?;
                    g.sum(c)
                },
                &params,
                1e-3,
                1e-4,
            )
            .unwrap();
            assert!(r.passed(), "{r}");
            assert_eq!(r.checked, 12);
        }
    }

    #[test]
    fn matmul_nt_and_row_ops_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = [rand_t(&mut rng, &[3, 4]), rand_t(&mut rng, &[5, 4]), rand_t(&mut rng, &[3, 4]), rand_t(&mut rng, &[6])];
        let w = rand_t(&mut rng, &[3, 6]);
        let r = grad_check(
            |g, v| {
                let s = g.matmul_nt(v[0], v[1])?;
                let d = g.row_dot(v[0], v[2])?;
                let c = g.concat_cols(d, s)?;
                let c = g.add_row_bias(c, v[3])?;
                let c = g.scale(c, 1.7)?;
                let wv = g.constant(w.clone());
                let p = g.row_dot(c, wv)?;
                g.mean(p)
            },
            &params,
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn conv_identity_and_box_filter() {
        let mut g = Graph::<f32>::new();
        let x = Tensor::from_fn(&[2, 1, 4, 5], |i| i as f32 * 0.1);
        let xv = g.constant(x.clone());
        let w = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let y = g.conv2d(xv, w, 1, 0).unwrap();
        assert_eq!(g.value(y), &x);

        let c = g.constant(Tensor::full(&[1, 1, 5, 5], 0.7));
        let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0));
        let y = g.conv2d(c, k, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 3, 3]);
        assert!(g.value(y).data().iter().all(|v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn conv_non_integral_extent_is_config_error() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 6, 6]));
        let w = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(matches!(g.conv2d(x, w, 2, 0), Err(Error::Config(_))));
    }

    #[test]
    fn conv_grad_check() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = [rand_t(&mut rng, &[1, 2, 5, 5]), rand_t(&mut rng, &[3, 2, 3, 3])];
            let proj = rand_t(&mut rng, &[1, 3, 3, 3]);
            let r = grad_check(
                |g, v| {
                    let y = g.conv2d(v[0], v[1], 1, 0)?;
                    let p = g.constant(proj.clone());
                    let z = g.add(y, p)?;
                    let z = g.relu(z)?;
                    g.sum(z)
                },
                &params,
                1e-3,
                1e-4,
            )
            .unwrap();
            assert!(r.passed(), "{r}");
        }
        // strided, padded
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = [rand_t(&mut rng, &[2, 2, 6, 6]), rand_t(&mut rng, &[3, 2, 3, 3]), rand_t(&mut rng, &[3])];
        let r = grad_check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], 2, 1)?;
                let y = g.add_channel_bias(y, v[2])?;
                let y = g.global_avg_pool(y)?;
                let y = g.l2_normalize(y)?;
                let w = g.constant(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5));
                let d = g.row_dot(y, w)?;
                g.sum(d)
            },
            &params,
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn relu_and_pool_cases() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap(), true);
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let c = g.constant(Tensor::new(vec![2, 3, 1, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let p = g.global_avg_pool(c).unwrap();
        assert_eq!(g.value(p).shape(), &[2, 3]);
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn add_shape_mismatch() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[4]));
        assert!(matches!(g.add(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn add_relu_grad_check() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 20);
            let params = [rand_t(&mut rng, &[4, 5]), rand_t(&mut rng, &[4, 5])];
            let r = grad_check(
                |g, v| {
                    let s = g.add(v[0], v[1])?;
                    let s = g.relu(s)?;
                    g.sum(s)
                },
                &params,
                1e-3,
                1e-4,
            )
            .unwrap();
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn l2_normalize_values_and_grads() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![0.0, 1.0]]).unwrap());
        let y = g.l2_normalize(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.6, 0.8, 0.0, 1.0]);

        let z = g.constant(Tensor::zeros(&[1, 3]));
        let zn = g.l2_normalize(z).unwrap();
        assert_eq!(g.value(zn).data(), &[0.0; 3]);
        assert_eq!(g.zero_norm_rows(), 1);

        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_t(&mut rng, &[4, 8]);
            let mut g = Graph::<f32>::new();
            let xv = g.constant(x.cast());
            let y = g.l2_normalize(xv).unwrap();
            for r in 0..4 {
                let n: f64 = g.value(y).row(r).iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6);
            }
            let proj = rand_t(&mut rng, &[4, 8]);
            let r = grad_check(
                |g, v| {
                    let y = g.l2_normalize(v[0])?;
                    let p = g.constant(proj.clone());
                    let d = g.row_dot(y, p)?;
                    g.sum(d)
                },
                &[x],
                1e-3,
                1e-4,
            )
            .unwrap();
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn backward_linear_unused_and_reuse() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::full(&[2, 3], 0.3), true);
        let unused = g.leaf(Tensor::full(&[4], 1.0), true);
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(g.grad(unused).unwrap().data().iter().all(|&v| v == 0.0));

        // reuse accumulates: d/dx [sum(x) + sum(2x)] = 3
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::full(&[3], 0.5), true);
        let a = g.sum(x).unwrap();
        let x2 = g.scale(x, 2.0).unwrap();
        let b = g.sum(x2).unwrap();
        let ab = g.add(a, b).unwrap();
        g.backward(ab).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(&[2]), true);
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn composite_relu_matmul_grad_check() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 40);
            let params = [rand_t(&mut rng, &[4, 3]), rand_t(&mut rng, &[3, 5])];
            let r = grad_check(
                |g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    let y = g.relu(y)?;
                    g.sum(y)
                },
                &params,
                1e-3,
                1e-4,
            )
            .unwrap();
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn cross_entropy_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = [rand_t(&mut rng, &[3, 5])];
        let r = grad_check(|g, v| g.cross_entropy(v[0], &[0, 3, 4]), &params, 1e-3, 1e-4).unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn checker_catches_scaled_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = [rand_t(&mut rng, &[2, 3]), rand_t(&mut rng, &[3, 2])];
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let c = g.matmul(v[0], v[1])?;
            g.sum(c)
        };
        let mut analytic = analytic_gradients(&f, &params).unwrap();
        for t in &mut analytic {
            for v in t.data_mut() {
                *v *= 1.01;
            }
        }
        let numeric = numeric_gradients(&f, &params, 1e-3).unwrap();
        assert!(!compare(&analytic, &numeric, 1e-4).passed());
    }

    #[test]
    fn checker_constant_function_passes() {
        let params = [Tensor::<f64>::full(&[3], 0.2)];
        let r = grad_check(
            |g, v| {
                let z = g.scale(v[0], 0.0)?;
                g.sum(z)
            },
            &params,
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(r.passed());
        assert_eq!(r.max_rel_err, 0.0);
    }

    #[test]
    fn checker_reports_non_finite_coordinate() {
        let params = [Tensor::<f64>::full(&[2], 1.0)];
        let r = grad_check(
            |g, v| {
                let z = g.scale(v[0], f64::INFINITY)?;
                g.sum(z)
            },
            &params,
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed());
        assert!(r.non_finite.unwrap().contains("coordinate 0"));
    }

    #[test]
    fn ops_are_bit_deterministic_across_exec_modes() {
        use crate::par::{exec_mode, set_exec_mode, ExecMode};
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Tensor<f32> = rand_t(&mut rng, &[3, 4, 9, 9]).cast();
        let w: Tensor<f32> = rand_t(&mut rng, &[6, 4, 3, 3]).cast();
        let run = || {
            let mut g = Graph::<f32>::new();
            let xv = g.leaf(x.clone(), true);
            let wv = g.leaf(w.clone(), true);
            let y = g.conv2d(xv, wv, 2, 1).unwrap();
            let s = g.sum(y).unwrap();
            g.backward(s).unwrap();
            (g.value(y).clone(), g.grad(xv).unwrap().clone(), g.grad(wv).unwrap().clone())
        };
        let prev = exec_mode();
        let a = run();
        let b = run();
        assert_eq!(a, b);
        if cfg!(feature = "parallel") {
            set_exec_mode(ExecMode::Sequential).unwrap();
            let s = run();
            set_exec_mode(ExecMode::Parallel).unwrap();
            let p = run();
            set_exec_mode(prev).unwrap();
            assert_eq!(s, p);
        }
    }

    #[test]
    fn retained_bytes_excludes_detached_paths() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let w = g.leaf(Tensor::zeros(&[2, 1, 3, 3]), true);
        let wc = g.constant(Tensor::zeros(&[2, 1, 3, 3]));
        let mark = g.len();
        let y = g.conv2d(x, w, 1, 1).unwrap();
        let _ = g.relu(y).unwrap();
        let with_grad = g.retained_activation_bytes(mark..g.len());
        // cols 9×16 + relu output 2×16
        assert_eq!(with_grad, (9 * 16 + 2 * 16) * 4);
        let mark = g.len();
        let y = g.conv2d(x, wc, 1, 1).unwrap();
        let _ = g.relu(y).unwrap();
        assert_eq!(g.retained_activation_bytes(mark..g.len()), 0);
    }
}
