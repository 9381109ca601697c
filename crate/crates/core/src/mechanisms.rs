//! The two ways of feeding negatives to InfoNCE.
//!
//! * MoCo: a key encoder tracks the query encoder as an exponential moving
//!   average and its (detached) keys populate a FIFO queue of negatives.
//!   Only the query encoder receives gradient, and the number of negatives is
//!   the queue capacity regardless of batch size.
//! * End-to-end: one encoder embeds both views; for each query the other
//!   keys of the batch are the negatives, and gradient flows through both
//!   paths.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::compute::{Graph, Tensor, Var};
use crate::contrastive::{infonce_from_logits, similarity_logits, ContrastiveBatch, NORM_TOL};
use crate::encoder::{embed, ModelParams};
use crate::error::{config_err, contract_err, dim_err, Error, Result};

pub type ParamGrads = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mechanism {
    Moco,
    E2e,
}

impl Mechanism {
    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::Moco => "moco",
            Mechanism::E2e => "e2e",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moco" => Ok(Mechanism::Moco),
            "e2e" | "end-to-end" => Ok(Mechanism::E2e),
            _ => Err(config_err!("unknown mechanism {s:?} (expected moco or e2e)")),
        }
    }
}

/// Fixed-capacity FIFO of unit-norm key embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeQueue {
    storage: Tensor,
    write_ptr: usize,
    filled: bool,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(config_err!("queue capacity and dim must be positive"));
        }
        Ok(NegativeQueue {
            storage: Tensor::zeros(&[capacity, dim]),
            write_ptr: 0,
            filled: false,
        })
    }

    /// Rebuild from checkpointed parts.
    pub fn from_parts(storage: Tensor, write_ptr: usize, filled: bool) -> Result<Self> {
        let (k, d) = storage.dims2()?;
        if k == 0 || d == 0 || write_ptr >= k {
            return Err(contract_err!(
                "queue parts inconsistent: storage {:?}, write_ptr {write_ptr}",
                storage.shape()
            ));
        }
        Ok(NegativeQueue {
            storage,
            write_ptr,
            filled,
        })
    }

    pub fn capacity(&self) -> usize {
        self.storage.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.storage.shape()[1]
    }

    pub fn write_ptr(&self) -> usize {
        self.write_ptr
    }

    pub fn is_filled(&self) -> bool {
        self.filled
    }

    pub fn storage(&self) -> &Tensor {
        &self.storage
    }

    /// Number of valid rows.
    pub fn len(&self) -> usize {
        if self.filled {
            self.capacity()
        } else {
            self.write_ptr
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fill_fraction(&self) -> f64 {
        self.len() as f64 / self.capacity() as f64
    }

    pub fn byte_len(&self) -> usize {
        self.storage.byte_len()
    }

    /// Valid rows, oldest first.
    pub fn contents(&self) -> Tensor {
        let d = self.dim();
        let data = self.storage.data();
        let mut out = Vec::with_capacity(self.len() * d);
        if self.filled {
            out.extend_from_slice(&data[self.write_ptr * d..]);
        }
        out.extend_from_slice(&data[..self.write_ptr * d]);
        Tensor::new(vec![self.len(), d], out).expect("queue contents shape")
    }

    /// Batch sizes must divide the capacity so writes never wrap mid-batch.
    pub fn check_batch(&self, batch: usize) -> Result<()> {
        let k = self.capacity();
        if batch == 0 || batch > k || !k.is_multiple_of(batch) {
            return Err(config_err!(
                "queue capacity {k} must be a positive multiple of the batch size {batch}"
            ));
        }
        Ok(())
    }

    /// Overwrite the oldest `B` rows with `keys[B×D]`.
    pub fn enqueue(&mut self, keys: &Tensor) -> Result<()> {
        let (b, d) = keys.dims2()?;
        if d != self.dim() {
            return Err(dim_err!(
                "keys {:?} do not match queue width {}",
                keys.shape(),
                self.dim()
            ));
        }
        self.check_batch(b)?;
        for r in 0..b {
            let n = keys.row(r).iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            if (n - 1.0).abs() > NORM_TOL {
                return Err(contract_err!("enqueued key row {r} has norm {n}"));
            }
        }
        let start = self.write_ptr * d;
        self.storage.data_mut()[start..start + b * d].copy_from_slice(keys.data());
        self.write_ptr = (self.write_ptr + b) % self.capacity();
        if self.write_ptr == 0 {
            self.filled = true;
        }
        Ok(())
    }
}

/// `θ_k ← m·θ_k + (1−m)·θ_q`, elementwise, outside any graph.
pub fn momentum_update(key: &mut ModelParams, query: &ModelParams, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(config_err!("momentum coefficient {m} outside [0, 1]"));
    }
    if !key.congruent(query) {
        return Err(contract_err!("key and query encoders are not structurally congruent"));
    }
    for ((_, k), (_, q)) in key.iter_mut().zip(query.iter()) {
        for (kv, &qv) in k.data_mut().iter_mut().zip(q.data()) {
            *kv = (m * *kv as f64 + (1.0 - m) * qv as f64) as f32;
        }
    }
    Ok(())
}

/// Query encoder, momentum key encoder and queue.
#[derive(Clone, Debug)]
pub struct MoCoState {
    pub q_params: ModelParams,
    pub k_params: ModelParams,
    pub queue: NegativeQueue,
    pub m: f64,
    pub tau: f64,
}

impl MoCoState {
    /// The key encoder starts as a copy of the query encoder.
    pub fn new(q_params: ModelParams, queue_capacity: usize, m: f64, tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&m) {
            return Err(config_err!("momentum coefficient {m} outside [0, 1]"));
        }
        if !(tau > 0.0) {
            return Err(config_err!("temperature must be positive, got {tau}"));
        }
        let queue = NegativeQueue::new(queue_capacity, q_params.cfg.embed_dim)?;
        Ok(MoCoState {
            k_params: q_params.clone(),
            q_params,
            queue,
            m,
            tau,
        })
    }

    pub fn momentum_update(&mut self) -> Result<()> {
        momentum_update(&mut self.k_params, &self.q_params, self.m)
    }
}

/// Result of one MoCo step.
#[derive(Clone, Debug)]
pub struct MocoStepOutput {
    /// The queue was not yet full: keys were enqueued, nothing else.
    pub warming: bool,
    pub loss: Option<f64>,
    pub q_grads: Option<ParamGrads>,
    /// Total gradient norm found on key-encoder parameters (always 0).
    pub key_grad_norm: f64,
    pub queries: Option<Tensor>,
    pub keys: Tensor,
    pub logits: Option<Tensor>,
    pub mean_pos_sim: f64,
    pub mean_neg_sim: f64,
    pub negatives_per_query: usize,
}

fn check_views(views_q: &Tensor, views_k: &Tensor) -> Result<usize> {
    if views_q.shape() != views_k.shape() {
        return Err(dim_err!(
            "query views {:?} and key views {:?} differ in shape",
            views_q.shape(),
            views_k.shape()
        ));
    }
    Ok(views_q.dims4()?.0)
}

/// Mean of column 0 and of the remaining columns of `logits·τ`.
fn logit_sims(logits: &Tensor, tau: f64) -> (f64, f64) {
    let (rows, cols) = logits.dims2().expect("logits matrix");
    let (mut pos, mut neg) = (0f64, 0f64);
    for r in 0..rows {
        let row = logits.row(r);
        pos += row[0] as f64;
        neg += row[1..].iter().map(|&v| v as f64).sum::<f64>();
    }
    let neg_count = rows * (cols - 1);
    (
        pos * tau / rows as f64,
        if neg_count == 0 { 0.0 } else { neg * tau / neg_count as f64 },
    )
}

/// One MoCo step, in order: momentum update, query embedding, detached key
/// embedding, InfoNCE against the current queue, backward into the query
/// encoder, then enqueue of the new keys. The caller applies the optimizer
/// to `q_params` with the returned gradients.
pub fn moco_step(state: &mut MoCoState, views_q: &Tensor, views_k: &Tensor) -> Result<MocoStepOutput> {
    let b = check_views(views_q, views_k)?;
    state.queue.check_batch(b)?;
    state.momentum_update()?;

    let warming = !state.queue.is_filled();
    let cfg = state.q_params.cfg.clone();
    let mut g = Graph::<f32>::new();
    let kp = state.k_params.register(&mut g, false);
    let xk = g.constant(views_k.clone());
    let k_emb = embed(&mut g, &cfg, &kp, xk)?;
    let k = g.detach(k_emb);
    let keys = g.value(k).clone();

    if warming {
        state.queue.enqueue(&keys)?;
        return Ok(MocoStepOutput {
            warming: true,
            loss: None,
            q_grads: None,
            key_grad_norm: 0.0,
            queries: None,
            keys,
            logits: None,
            mean_pos_sim: 0.0,
            mean_neg_sim: 0.0,
            negatives_per_query: 0,
        });
    }

    let qp = state.q_params.register(&mut g, true);
    let xq = g.constant(views_q.clone());
    let q = embed(&mut g, &cfg, &qp, xq)?;
    let negatives = g.constant(state.queue.contents());
    let batch = ContrastiveBatch::new(&g, q, k, negatives, state.tau)?;
    let logits = similarity_logits(&mut g, &batch)?;
    let loss = infonce_from_logits(&mut g, logits)?;
    g.backward(loss)?;

    let key_grad_norm = kp.iter().filter_map(|(_, &v)| g.grad(v)).map(Tensor::norm).sum();
    let logits_t = g.value(logits).clone();
    let (mean_pos_sim, mean_neg_sim) = logit_sims(&logits_t, state.tau);
    let out = MocoStepOutput {
        warming: false,
        loss: Some(g.value(loss).item()),
        q_grads: Some(qp.grads(&g)),
        key_grad_norm,
        queries: Some(g.value(q).clone()),
        keys: keys.clone(),
        negatives_per_query: state.queue.len(),
        logits: Some(logits_t),
        mean_pos_sim,
        mean_neg_sim,
    };
    state.queue.enqueue(&keys)?;
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct E2eStepOutput {
    pub loss: f64,
    pub grads: ParamGrads,
    /// `[B×B]` similarities over τ; the positive of row `i` is column `i`.
    pub logits: Tensor,
    pub mean_pos_sim: f64,
    pub mean_neg_sim: f64,
    pub negatives_per_query: usize,
}

/// Shared-encoder step with in-batch negatives. Both views are embedded with
/// gradient, so backward reaches the encoder through queries and keys.
pub fn e2e_step(params: &ModelParams, views_q: &Tensor, views_k: &Tensor, tau: f64) -> Result<E2eStepOutput> {
    let b = check_views(views_q, views_k)?;
    if b < 2 {
        return Err(config_err!("end-to-end step needs a batch of at least 2 (got {b})"));
    }
    if !(tau > 0.0) {
        return Err(config_err!("temperature must be positive, got {tau}"));
    }
    let mut g = Graph::<f32>::new();
    let pv = params.register(&mut g, true);
    let xq = g.constant(views_q.clone());
    let xk = g.constant(views_k.clone());
    let q = embed(&mut g, &params.cfg, &pv, xq)?;
    let k = embed(&mut g, &params.cfg, &pv, xk)?;
    let sims = g.matmul_nt(q, k)?;
    let logits = g.scale(sims, 1.0 / tau)?;
    let targets: Vec<usize> = (0..b).collect();
    let loss = g.cross_entropy(logits, &targets)?;
    if !g.value(loss).all_finite() {
        return Err(Error::NonFinite("end-to-end InfoNCE loss".into()));
    }
    g.backward(loss)?;

    let l = g.value(logits).clone();
    let (mut pos, mut neg) = (0f64, 0f64);
    for i in 0..b {
        for (j, &v) in l.row(i).iter().enumerate() {
            if i == j {
                pos += v as f64;
            } else {
                neg += v as f64;
            }
        }
    }
    Ok(E2eStepOutput {
        loss: g.value(loss).item(),
        grads: pv.grads(&g),
        mean_pos_sim: pos * tau / b as f64,
        mean_neg_sim: neg * tau / (b * (b - 1)) as f64,
        negatives_per_query: b - 1,
        logits: l,
    })
}

/// Query-only embeddings for `views`, used for encoder-path comparisons.
pub fn encode_queries(params: &ModelParams, views: &Tensor) -> Result<(Graph, Var)> {
    let mut g = Graph::new();
    let pv = params.register(&mut g, false);
    let x = g.constant(views.clone());
    let e = embed(&mut g, &params.cfg, &pv, x)?;
    Ok((g, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, HeadKind};
    use rand::{Rng, SeedableRng};

    fn unit_rows(rng: &mut impl Rng, n: usize, d: usize) -> Tensor {
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let row: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            data.extend(row.iter().map(|v| (v / norm) as f32));
        }
        Tensor::new(vec![n, d], data).unwrap()
    }

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            input_hw: 8,
            channels: vec![4, 8],
            head_kind: HeadKind::Mlp,
            head_hidden: 16,
            embed_dim: 8,
        }
    }

    fn views(seed: u64, b: usize) -> (Tensor, Tensor) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::from_fn(&[b, 3, 8, 8], |_| rng.random_range(0.0..1.0));
        let c = Tensor::from_fn(&[b, 3, 8, 8], |_| rng.random_range(0.0..1.0));
        (a, c)
    }

    #[test]
    fn fifo_replaces_oldest() {
        let mut q = NegativeQueue::new(4, 2).unwrap();
        let r = |a: f32| vec![a.cos(), a.sin()];
        let rows: Vec<Vec<f32>> = (0..6).map(|i| r(i as f32)).collect();
        q.enqueue(&Tensor::from_rows(&rows[0..2]).unwrap()).unwrap();
        assert!(!q.is_filled());
        q.enqueue(&Tensor::from_rows(&rows[2..4]).unwrap()).unwrap();
        assert!(q.is_filled());
        q.enqueue(&Tensor::from_rows(&rows[4..6]).unwrap()).unwrap();
        assert_eq!(q.contents(), Tensor::from_rows(&rows[2..6]).unwrap());
    }

    #[test]
    fn full_replacement() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut q = NegativeQueue::new(8, 3).unwrap();
        let keys = unit_rows(&mut rng, 8, 3);
        q.enqueue(&keys).unwrap();
        assert_eq!(q.contents(), keys);
    }

    #[test]
    fn enqueue_rejects_bad_batches() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut q = NegativeQueue::new(6, 3).unwrap();
        assert!(matches!(q.enqueue(&unit_rows(&mut rng, 4, 3)), Err(Error::Config(_))));
        assert!(matches!(q.enqueue(&unit_rows(&mut rng, 12, 3)), Err(Error::Config(_))));
        assert!(matches!(q.enqueue(&Tensor::full(&[3, 3], 1.0)), Err(Error::Contract(_))));
    }

    #[test]
    fn momentum_fixed_points_and_midpoint() {
        let cfg = small_cfg();
        let q = ModelParams::init(&cfg, 1).unwrap();
        let k0 = ModelParams::init(&cfg, 2).unwrap();
        let mut k = k0.clone();
        momentum_update(&mut k, &q, 1.0).unwrap();
        assert_eq!(k, k0);
        momentum_update(&mut k, &q, 0.0).unwrap();
        assert_eq!(k, q);

        let mut kk = k0.clone();
        let mut qq = k0.clone();
        for (_, t) in kk.iter_mut() {
            t.data_mut().fill(2.0);
        }
        for (_, t) in qq.iter_mut() {
            t.data_mut().fill(4.0);
        }
        momentum_update(&mut kk, &qq, 0.5).unwrap();
        assert!(kk.iter().all(|(_, t)| t.data().iter().all(|&v| v == 3.0)));
    }

    #[test]
    fn momentum_rejects_incongruent_params() {
        let q = ModelParams::init(&small_cfg(), 1).unwrap();
        let mut k = ModelParams::init(&EncoderConfig { head_kind: HeadKind::Fc, ..small_cfg() }, 1).unwrap();
        assert!(matches!(momentum_update(&mut k, &q, 0.9), Err(Error::Contract(_))));
    }

    #[test]
    fn warmup_then_loss_with_detached_keys() {
        let q = ModelParams::init(&small_cfg(), 3).unwrap();
        let mut st = MoCoState::new(q, 8, 0.9, 0.2).unwrap();
        let (a, b) = views(0, 4);
        let o1 = moco_step(&mut st, &a, &b).unwrap();
        assert!(o1.warming && o1.loss.is_none());
        let o2 = moco_step(&mut st, &a, &b).unwrap();
        assert!(o2.warming);
        assert!(st.queue.is_filled());
        let before = st.queue.contents();
        let o3 = moco_step(&mut st, &a, &b).unwrap();
        assert!(!o3.warming);
        assert_eq!(o3.key_grad_norm, 0.0);
        assert_eq!(o3.negatives_per_query, 8);
        assert_eq!(o3.logits.as_ref().unwrap().shape(), &[4, 9]);
        let offline = crate::contrastive::infonce_value(
            o3.queries.as_ref().unwrap(),
            &o3.keys,
            &before,
            0.2,
        )
        .unwrap();
        assert!((offline - o3.loss.unwrap()).abs() < 1e-6);
        let grads = o3.q_grads.unwrap();
        assert!(grads.values().any(|t| t.norm() > 0.0));
    }

    #[test]
    fn e2e_counts_and_key_path_gradient() {
        let p = ModelParams::init(&small_cfg(), 5).unwrap();
        let (a, b) = views(1, 2);
        let out = e2e_step(&p, &a, &b, 0.2).unwrap();
        assert_eq!(out.negatives_per_query, 1);
        assert!(matches!(e2e_step(&p, &a.gather_rows(&[0]), &b.gather_rows(&[0]), 0.2), Err(Error::Config(_))));

        // gradient through the key path alone: keys are the only attached input
        let mut g = Graph::<f32>::new();
        let pv = p.register(&mut g, true);
        let xq = g.constant(a.clone());
        let xk = g.constant(b.clone());
        let (gq, qv) = encode_queries(&p, &a).unwrap();
        let qd = g.constant(gq.value(qv).clone());
        let k = embed(&mut g, &p.cfg, &pv, xk).unwrap();
        let _ = xq;
        let s = g.matmul_nt(qd, k).unwrap();
        let l = g.scale(s, 5.0).unwrap();
        let loss = g.cross_entropy(l, &[0, 1]).unwrap();
        g.backward(loss).unwrap();
        let norm: f64 = pv.grads(&g).values().map(Tensor::norm).sum();
        assert!(norm > 0.0);
    }
}
