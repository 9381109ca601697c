//! InfoNCE over one positive key and a set of negative keys per query.
//!
//! Logits are laid out with the positive in column 0 and the negatives in
//! columns `1..=N`, all divided by the temperature. The loss is the batch
//! mean of `−log softmax(logits)[0]`.

use crate::compute::{Graph, Real, Tensor, Var};
use crate::encoder::HeadKind;
use crate::error::{config_err, dim_err, Error, Result};

/// Tolerance on the unit-norm precondition.
pub const NORM_TOL: f64 = 1e-5;

/// Temperature for the fc head.
pub const TAU_FC: f64 = 0.07;
/// Temperature for the MLP head.
pub const TAU_MLP: f64 = 0.2;

pub fn default_tau(head: HeadKind) -> f64 {
    match head {
        HeadKind::Fc => TAU_FC,
        HeadKind::Mlp => TAU_MLP,
    }
}

/// Queries, positive keys and negatives on one graph.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveBatch {
    pub q: Var,
    pub k_pos: Var,
    pub negatives: Var,
    pub tau: f64,
}

fn check_unit_rows<T: Real>(g: &Graph<T>, v: Var, what: &str) -> Result<()> {
    let t = g.value(v);
    let (rows, _) = t.dims2()?;
    for r in 0..rows {
        let n = t.row(r).iter().map(|x| x.to_f64() * x.to_f64()).sum::<f64>().sqrt();
        if (n - 1.0).abs() > NORM_TOL {
            return Err(Error::Contract(format!(
                "{what} row {r} has norm {n}, expected 1 ± {NORM_TOL}"
            )));
        }
    }
    Ok(())
}

impl ContrastiveBatch {
    /// Validates shapes, unit-norm rows and `tau > 0`.
    pub fn new<T: Real>(g: &Graph<T>, q: Var, k_pos: Var, negatives: Var, tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(config_err!("temperature must be positive, got {tau}"));
        }
        let (b, d) = g.value(q).dims2()?;
        if g.value(k_pos).shape() != [b, d] {
            return Err(dim_err!(
                "positive keys {:?} do not match queries {:?}",
                g.value(k_pos).shape(),
                g.value(q).shape()
            ));
        }
        let (_, dn) = g.value(negatives).dims2()?;
        if dn != d {
            return Err(dim_err!(
                "negatives {:?} do not match query width {d}",
                g.value(negatives).shape()
            ));
        }
        check_unit_rows(g, q, "query")?;
        check_unit_rows(g, k_pos, "positive key")?;
        check_unit_rows(g, negatives, "negative key")?;
        Ok(ContrastiveBatch { q, k_pos, negatives, tau })
    }
}

/// `[B×(1+N)]` logits: column 0 is `q_i·k⁺_i/τ`, column `1+j` is `q_i·k⁻_j/τ`.
pub fn similarity_logits<T: Real>(g: &mut Graph<T>, b: &ContrastiveBatch) -> Result<Var> {
    let pos = g.row_dot(b.q, b.k_pos)?;
    let neg = g.matmul_nt(b.q, b.negatives)?;
    let sims = g.concat_cols(pos, neg)?;
    g.scale(sims, 1.0 / b.tau)
}

/// Cross-entropy with target class 0 on already-built logits.
pub fn infonce_from_logits<T: Real>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    let rows = g.value(logits).dims2()?.0;
    let loss = g.cross_entropy(logits, &vec![0; rows])?;
    if !g.value(loss).all_finite() {
        return Err(Error::NonFinite("InfoNCE loss".into()));
    }
    Ok(loss)
}

/// Scalar InfoNCE loss, differentiable through every graph-attached input.
pub fn infonce_loss<T: Real>(g: &mut Graph<T>, b: &ContrastiveBatch) -> Result<Var> {
    let logits = similarity_logits(g, b)?;
    infonce_from_logits(g, logits)
}

/// Loss value for plain tensors (no gradients kept).
pub fn infonce_value(q: &Tensor, k_pos: &Tensor, negatives: &Tensor, tau: f64) -> Result<f64> {
    let mut g = Graph::<f32>::new();
    let qv = g.constant(q.clone());
    let kv = g.constant(k_pos.clone());
    let nv = g.constant(negatives.clone());
    let b = ContrastiveBatch::new(&g, qv, kv, nv, tau)?;
    let loss = infonce_loss(&mut g, &b)?;
    Ok(g.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::grad_check;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        if rows.is_empty() {
            return Tensor::zeros(&[0, 2]);
        }
        Tensor::from_rows(rows).unwrap()
    }

    fn loss64(q: &Tensor<f64>, k: &Tensor<f64>, n: &Tensor<f64>, tau: f64) -> f64 {
        let mut g = Graph::<f64>::new();
        let (qv, kv, nv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(n.clone()));
        let b = ContrastiveBatch::new(&g, qv, kv, nv, tau).unwrap();
        let l = infonce_loss(&mut g, &b).unwrap();
        g.value(l).item()
    }

    #[test]
    fn orthonormal_logits() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(t(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]));
        let k = g.constant(t(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]));
        let n = g.constant(t(&[vec![0.0, 0.0, 1.0], vec![0.0, 0.0, -1.0]]));
        let b = ContrastiveBatch::new(&g, q, k, n, 1.0).unwrap();
        let l = similarity_logits(&mut g, &b).unwrap();
        assert_eq!(g.value(l).data(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let b2 = ContrastiveBatch { tau: 0.5, ..b };
        let l2 = similarity_logits(&mut g, &b2).unwrap();
        for (a, c) in g.value(l2).data().iter().zip(g.value(l).data()) {
            assert_eq!(*a, 2.0 * c);
        }
    }

    #[test]
    fn equal_similarities_give_ln_n_plus_one() {
        // q = e1, every key at 60 degrees
        let q = t(&[vec![1.0, 0.0, 0.0, 0.0]]);
        let c = 0.5f64;
        let s = (1.0 - c * c).sqrt();
        let k = t(&[vec![c, s, 0.0, 0.0]]);
        let n = t(&[vec![c, 0.0, s, 0.0], vec![c, 0.0, 0.0, s], vec![c, -s, 0.0, 0.0]]);
        assert!((loss64(&q, &k, &n, 0.2) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn no_negatives_is_exactly_zero() {
        let q = t(&[unit(&[1.0, 2.0])]);
        let k = t(&[unit(&[2.0, -1.0])]);
        assert_eq!(loss64(&q, &k, &Tensor::zeros(&[0, 2]), 0.07), 0.0);
    }

    #[test]
    fn single_negative_direct_softmax() {
        let q = t(&[vec![1.0, 0.0]]);
        let n = t(&[vec![0.0, 1.0]]);
        let expected = (1.0 + (-1f64).exp()).ln();
        assert!((loss64(&q, &q, &n, 1.0) - expected).abs() < 1e-12);
        assert!((expected - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn rejects_unnormalized_and_bad_tau() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(t(&[vec![2.0, 0.0]]));
        let k = g.constant(t(&[vec![1.0, 0.0]]));
        let n = g.constant(t(&[vec![0.0, 1.0]]));
        assert!(matches!(ContrastiveBatch::new(&g, q, k, n, 1.0), Err(Error::Contract(_))));
        assert!(matches!(ContrastiveBatch::new(&g, k, k, n, 0.0), Err(Error::Config(_))));
        let wide = g.constant(t(&[vec![0.0, 0.0, 1.0]]));
        assert!(matches!(ContrastiveBatch::new(&g, k, k, wide, 1.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn gradient_wrt_query_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        for seed in 0..3 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut rows = |n: usize| -> Tensor<f64> {
                t(&(0..n).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect::<Vec<_>>())
            };
            let raw_q = rows(3);
            let k = rows(3);
            let n = rows(5);
            let report = grad_check(
                |g, v| {
                    let q = g.l2_normalize(v[0])?;
                    let k = g.l2_normalize(v[1])?;
                    let n = g.l2_normalize(v[2])?;
                    let b = ContrastiveBatch::new(g, q, k, n, 0.5)?;
                    infonce_loss(g, &b)
                },
                &[raw_q, k, n],
                1e-3,
                1e-4,
            )
            .unwrap();
            assert!(report.passed(), "{report}");
        }
    }
}
