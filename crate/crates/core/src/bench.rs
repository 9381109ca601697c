//! Memory and time cost of the two mechanisms.
//!
//! Memory is model-based: the bytes of forward activations that backward
//! must keep, per gradient-bearing encoder pass. MoCo has one such pass (the
//! key pass runs without gradient and is dropped at detach); end-to-end has
//! two. The similarity/probability buffer of the loss is not part of this
//! count, and the queue is reported on its own.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;

use crate::compute::{Graph, Tensor};
use crate::encoder::{embed, EncoderConfig, HeadKind, ModelParams};
use crate::error::{config_err, Result};
use crate::mechanisms::{e2e_step, moco_step, MoCoState, Mechanism, NegativeQueue};
use crate::rng::{Domain, StreamKey};
use crate::trainer::Sgd;

pub const MIN_TIMED_STEPS: usize = 20;
pub const WARMUP_STEPS: usize = 5;
const F32: usize = 4;

pub const COST_HEADER: &str = "mechanism,batch,K,negatives_per_query,activation_bytes,param_bytes,queue_bytes,wall_ms_median";

/// Full-scale reference (batch 256): memory in GB and hours per 200 epochs.
pub const REFERENCE_MOCO: (f64, f64) = (5.0, 53.0);
pub const REFERENCE_E2E: (f64, f64) = (7.4, 65.0);

/// Floats one image keeps alive through one gradient-bearing encoder pass.
pub fn activation_floats_per_image(cfg: &EncoderConfig) -> usize {
    let mut total = 0;
    let mut c_in = 3;
    for (&c_out, &hw) in cfg.channels.iter().zip(&cfg.block_extents()) {
        // im2col columns, then the relu output
        total += c_in * 9 * hw * hw + c_out * hw * hw;
        c_in = c_out;
    }
    // pooled features read by the first head matmul
    total += cfg.feature_dim();
    if cfg.head_kind == HeadKind::Mlp {
        total += cfg.head_hidden;
    }
    // normalised embedding and its norm
    total + cfg.embed_dim + 1
}

pub fn gradient_passes(mech: Mechanism) -> usize {
    match mech {
        Mechanism::Moco => 1,
        Mechanism::E2e => 2,
    }
}

pub fn activation_accounting(cfg: &EncoderConfig, mech: Mechanism, batch: usize) -> usize {
    gradient_passes(mech) * batch * activation_floats_per_image(cfg) * F32
}

/// Encoder parameters held in memory: two copies for MoCo.
pub fn param_bytes(cfg: &EncoderConfig, mech: Mechanism) -> usize {
    let one: usize = crate::encoder::param_shapes(cfg).iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let copies = match mech {
        Mechanism::Moco => 2,
        Mechanism::E2e => 1,
    };
    copies * one * F32
}

pub fn queue_bytes(cfg: &EncoderConfig, mech: Mechanism, k: usize) -> usize {
    match mech {
        Mechanism::Moco => k * cfg.embed_dim * F32,
        Mechanism::E2e => 0,
    }
}

/// Retained bytes measured on a real graph: one gradient-bearing pass for
/// MoCo, two for end-to-end. Used to audit [`activation_accounting`].
pub fn measured_activation_bytes(params: &ModelParams, mech: Mechanism, batch: usize) -> Result<usize> {
    let s = params.cfg.input_hw;
    let x = Tensor::full(&[batch, 3, s, s], 0.5f32);
    let mut g = Graph::<f32>::new();
    let pv = params.register(&mut g, true);
    let start = g.len();
    for _ in 0..gradient_passes(mech) {
        let xv = g.constant(x.clone());
        embed(&mut g, &params.cfg, &pv, xv)?;
    }
    Ok(g.retained_activation_bytes(start..g.len()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Timing {
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub steps: usize,
}

impl Timing {
    pub fn spread(&self) -> f64 {
        self.max_ms / self.min_ms.max(f64::MIN_POSITIVE)
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn bench_views(cfg: &EncoderConfig, batch: usize, seed: u64) -> (Tensor, Tensor) {
    let s = cfg.input_hw;
    let mut rng = StreamKey::new(Domain::Bench, seed).rng();
    let mut draw = || Tensor::from_fn(&[batch, 3, s, s], |_| rng.random::<f32>());
    (draw(), draw())
}

fn full_queue(cfg: &EncoderConfig, k: usize, seed: u64) -> Result<NegativeQueue> {
    let d = cfg.embed_dim;
    let mut rng = StreamKey::new(Domain::Bench, seed).derive(1).rng();
    let mut data = Vec::with_capacity(k * d);
    for _ in 0..k {
        let row: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        data.extend(row.iter().map(|v| (v / n) as f32));
    }
    NegativeQueue::from_parts(Tensor::new(vec![k, d], data)?, 0, true)
}

/// Median wall time of full training steps (mechanism step plus SGD update)
/// after [`WARMUP_STEPS`] untimed ones. Both mechanisms see the same images
/// and the same initial parameters; the MoCo queue starts full.
pub fn measure_step_time(cfg: &EncoderConfig, mech: Mechanism, batch: usize, k: usize, steps: usize) -> Result<Timing> {
    if steps < MIN_TIMED_STEPS {
        return Err(config_err!("timing needs at least {MIN_TIMED_STEPS} steps, got {steps}"));
    }
    let params = ModelParams::init(cfg, 0)?;
    let (vq, vk) = bench_views(cfg, batch, 0);
    let mut sgd = Sgd::new(0.9, 1e-4);
    let lr = 1e-3;
    let mut times = Vec::with_capacity(steps);
    match mech {
        Mechanism::Moco => {
            let mut st = MoCoState::new(params, k, 0.99, 0.2)?;
            st.queue.check_batch(batch)?;
            st.queue = full_queue(cfg, k, 0)?;
            for i in 0..WARMUP_STEPS + steps {
                let t = Instant::now();
                let o = moco_step(&mut st, &vq, &vk)?;
                if let Some(g) = &o.q_grads {
                    sgd.step(&mut st.q_params, g, lr)?;
                }
                if i >= WARMUP_STEPS {
                    times.push(t.elapsed().as_secs_f64() * 1e3);
                }
            }
        }
        Mechanism::E2e => {
            let mut p = params;
            for i in 0..WARMUP_STEPS + steps {
                let t = Instant::now();
                let o = e2e_step(&p, &vq, &vk, 0.2)?;
                sgd.step(&mut p, &o.grads, lr)?;
                if i >= WARMUP_STEPS {
                    times.push(t.elapsed().as_secs_f64() * 1e3);
                }
            }
        }
    }
    let min_ms = times.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_ms = times.iter().cloned().fold(0.0, f64::max);
    let t = Timing { median_ms: median(&mut times), min_ms, max_ms, steps };
    log::info!("{mech} B={batch}: median {:.2} ms, max/min {:.2}", t.median_ms, t.spread());
    Ok(t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostRow {
    pub mechanism: Mechanism,
    pub batch: usize,
    /// Queue capacity (0 for end-to-end).
    pub k: usize,
    pub negatives_per_query: usize,
    pub activation_bytes: usize,
    pub param_bytes: usize,
    pub queue_bytes: usize,
    pub timing: Option<Timing>,
}

impl CostRow {
    pub fn accounting(cfg: &EncoderConfig, mech: Mechanism, batch: usize, k: usize) -> Self {
        let k = if mech == Mechanism::Moco { k } else { 0 };
        CostRow {
            mechanism: mech,
            batch,
            k,
            negatives_per_query: if mech == Mechanism::Moco { k } else { batch.saturating_sub(1) },
            activation_bytes: activation_accounting(cfg, mech, batch),
            param_bytes: param_bytes(cfg, mech),
            queue_bytes: queue_bytes(cfg, mech, k),
            timing: None,
        }
    }

    pub fn csv_row(&self) -> String {
        let wall = self.timing.as_ref().map(|t| t.median_ms.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.mechanism, self.batch, self.k, self.negatives_per_query, self.activation_bytes, self.param_bytes, self.queue_bytes, wall
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub cfg: EncoderConfig,
    pub rows: Vec<CostRow>,
    /// Accounting-only rows for batches beyond what was timed.
    pub estimates: Vec<CostRow>,
    pub rss_bytes: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostPlan {
    pub batches: Vec<usize>,
    /// Queue capacity for the per-batch MoCo rows.
    pub k: usize,
    /// Extra MoCo capacities, timed at `batches[0]`.
    pub k_sweep: Vec<usize>,
    pub steps: usize,
    pub estimate_batches: Vec<usize>,
}

impl Default for CostPlan {
    fn default() -> Self {
        CostPlan {
            batches: vec![32, 64, 128],
            k: 1024,
            k_sweep: vec![256, 4096, 16384],
            steps: MIN_TIMED_STEPS,
            estimate_batches: vec![256, 1024],
        }
    }
}

/// Resident set size from `/proc`, where available. Informational only.
pub fn rss_bytes() -> Option<u64> {
    let statm = std::fs::read_to_string("/proc/self/statm").ok()?;
    let pages: u64 = statm.split_whitespace().nth(1)?.parse().ok()?;
    Some(pages * 4096)
}

pub fn cost_report(cfg: &EncoderConfig, plan: &CostPlan) -> Result<CostReport> {
    cfg.validate()?;
    if plan.batches.is_empty() {
        return Err(config_err!("cost report needs at least one batch size"));
    }
    let mut rows = Vec::new();
    for &b in &plan.batches {
        for mech in [Mechanism::Moco, Mechanism::E2e] {
            let mut row = CostRow::accounting(cfg, mech, b, plan.k);
            row.timing = Some(measure_step_time(cfg, mech, b, plan.k, plan.steps)?);
            rows.push(row);
        }
    }
    let b0 = plan.batches[0];
    for &k in &plan.k_sweep {
        let mut row = CostRow::accounting(cfg, Mechanism::Moco, b0, k);
        row.timing = Some(measure_step_time(cfg, Mechanism::Moco, b0, k, plan.steps)?);
        rows.push(row);
    }
    let estimates = plan
        .estimate_batches
        .iter()
        .flat_map(|&b| [Mechanism::Moco, Mechanism::E2e].map(|m| CostRow::accounting(cfg, m, b, plan.k)))
        .collect();
    let rss = rss_bytes();
    if let Some(r) = rss {
        log::info!("resident set size after timing: {r} bytes");
    }
    Ok(CostReport { cfg: cfg.clone(), rows, estimates, rss_bytes: rss })
}

impl CostReport {
    pub fn csv(&self) -> String {
        let mut s = format!("{COST_HEADER}\n");
        for r in &self.rows {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }

    pub fn markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "Encoder: input {0}×{0}, channels {1:?}, {2} head, embed {3}.\n",
            self.cfg.input_hw, self.cfg.channels, self.cfg.head_kind, self.cfg.embed_dim
        );
        s.push_str("| mechanism | batch | K | negatives/query | activations (B) | params (B) | queue (B) | median ms/step | max/min |\n");
        s.push_str("|---|---|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let (med, spread) = r.timing.as_ref().map(|t| (format!("{:.2}", t.median_ms), format!("{:.2}", t.spread()))).unwrap_or_default();
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} | {med} | {spread} |",
                r.mechanism, r.batch, r.k, r.negatives_per_query, r.activation_bytes, r.param_bytes, r.queue_bytes
            );
        }
        if !self.estimates.is_empty() {
            s.push_str("\nEstimated by accounting only, not measured:\n\n| mechanism | batch | activations (B) | e2e/moco |\n|---|---|---|---|\n");
            for pair in self.estimates.chunks(2) {
                let ratio = pair[1].activation_bytes as f64 / pair[0].activation_bytes as f64;
                for r in pair {
                    let _ = writeln!(s, "| {} | {} | {} | {ratio:.3} |", r.mechanism, r.batch, r.activation_bytes);
                }
            }
        }
        let _ = writeln!(
            s,
            "\nFull-scale reference, batch 256 (not reproducible here): MoCo {:.1}G / {} h, end-to-end {:.1}G / {} h per 200 epochs.",
            REFERENCE_MOCO.0, REFERENCE_MOCO.1, REFERENCE_E2E.0, REFERENCE_E2E.1
        );
        if let Some(r) = self.rss_bytes {
            let _ = writeln!(s, "Process resident size at the end of timing: {r} bytes (auxiliary).");
        }
        s
    }
}
