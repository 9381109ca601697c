//! Linear-probe evaluation on frozen backbone features, the temperature
//! sweep and the head/augmentation/schedule ablation grid.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;

use crate::compute::Tensor;
use crate::contrastive::default_tau;
use crate::augment::AugKind;
use crate::data::Dataset;
use crate::encoder::{embeddings, features, HeadKind, ModelParams};
use crate::error::{config_err, contract_err, dim_err, Error, Result};
use crate::rng::{Domain, StreamKey};
use crate::trainer::{train_run, RunConfig, Schedule};

/// Default temperature grid.
pub const TAU_GRID: [f64; 6] = [0.07, 0.1, 0.2, 0.3, 0.4, 0.5];

/// Full-scale reference: best temperature and its accuracy (%) with the MLP
/// head. Reported as context only; not reproducible at desk scale.
pub const TAU_REFERENCE: (f64, f64) = (0.2, 66.2);

const EXTRACT_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    Backbone,
    HeadOutput,
    /// Features not produced by an encoder (fixtures, baselines).
    External,
}

/// `[N×D]` features with a record of where they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub values: Tensor,
    pub source: FeatureSource,
}

impl FeatureMatrix {
    pub fn external(values: Tensor) -> Result<Self> {
        values.dims2()?;
        Ok(FeatureMatrix { values, source: FeatureSource::External })
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }
}

fn chunked(ds: &Dataset, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let n = ds.len();
    let mut data = Vec::new();
    let mut width = 0;
    for start in (0..n).step_by(EXTRACT_CHUNK) {
        let idx: Vec<usize> = (start..(start + EXTRACT_CHUNK).min(n)).collect();
        let out = f(&ds.batch(&idx))?;
        width = out.shape()[1];
        data.extend_from_slice(out.data());
    }
    Tensor::new(vec![n, width], data)
}

/// Backbone features of the un-augmented images; the head is not applied.
pub fn extract_features(params: &ModelParams, ds: &Dataset) -> Result<FeatureMatrix> {
    if ds.side() != params.cfg.input_hw {
        return Err(dim_err!("dataset side {} differs from encoder input {}", ds.side(), params.cfg.input_hw));
    }
    let mut values = chunked(ds, |x| features(params, x))?;
    if ds.is_empty() {
        values = Tensor::zeros(&[0, params.cfg.feature_dim()]);
    }
    Ok(FeatureMatrix { values, source: FeatureSource::Backbone })
}

/// Normalised head outputs. Exists so that callers can inspect embeddings;
/// the probe refuses them.
pub fn extract_head_outputs(params: &ModelParams, ds: &Dataset) -> Result<FeatureMatrix> {
    let values = chunked(ds, |x| embeddings(params, x))?;
    Ok(FeatureMatrix { values, source: FeatureSource::HeadOutput })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeSolver {
    Sgd,
    /// Closed-form ridge regression onto one-hot targets.
    LeastSquares,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub solver: ProbeSolver,
    /// When set, features of any other width are rejected.
    pub expected_dim: Option<usize>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { epochs: 30, lr: 0.3, batch: 64, seed: 0, solver: ProbeSolver::Sgd, expected_dim: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub top1: f64,
    pub per_class_acc: Vec<f64>,
    pub feature_dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub config: ProbeConfig,
}

/// Deterministic 80/20 split: index `i` is held out when its hash is 0 mod 5.
pub fn split_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    (0..n).partition(|&i| !StreamKey::hash_index(i as u64).is_multiple_of(5))
}

struct Standardized {
    x: Vec<f64>,
    dim: usize,
}

/// Standardise with statistics of the training rows only.
fn standardize(f: &Tensor, train: &[usize]) -> Standardized {
    let (n, d) = (f.shape()[0], f.shape()[1]);
    let mut mean = vec![0f64; d];
    let mut var = vec![0f64; d];
    for &i in train {
        for (j, &v) in f.row(i).iter().enumerate() {
            mean[j] += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    for &i in train {
        for (j, &v) in f.row(i).iter().enumerate() {
            var[j] += (v as f64 - mean[j]).powi(2);
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / train.len() as f64).sqrt().max(1e-6)).collect();
    let mut x = Vec::with_capacity(n * d);
    for i in 0..n {
        x.extend(f.row(i).iter().enumerate().map(|(j, &v)| (v as f64 - mean[j]) / std[j]));
    }
    Standardized { x, dim: d }
}

fn scores(w: &[f64], b: &[f64], x: &[f64], classes: usize) -> Vec<f64> {
    let mut s = b.to_vec();
    for (j, &xv) in x.iter().enumerate() {
        if xv != 0.0 {
            let row = &w[j * classes..(j + 1) * classes];
            for c in 0..classes {
                s[c] += xv * row[c];
            }
        }
    }
    s
}

fn argmax(s: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in s.iter().enumerate() {
        if v > s[best] {
            best = i;
        }
    }
    best
}

fn fit_sgd(z: &Standardized, labels: &[usize], train: &[usize], classes: usize, cfg: &ProbeConfig) -> (Vec<f64>, Vec<f64>) {
    let d = z.dim;
    let mut w = vec![0f64; d * classes];
    let mut b = vec![0f64; classes];
    let batch = cfg.batch.clamp(1, train.len());
    let per_epoch = train.len().div_ceil(batch);
    let total = (cfg.epochs * per_epoch).max(1);
    let root = StreamKey::new(Domain::Probe, cfg.seed);
    let mut t = 0;
    for epoch in 0..cfg.epochs {
        let mut order = train.to_vec();
        order.shuffle(&mut root.derive(epoch as u64).rng());
        for chunk in order.chunks(batch) {
            let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos());
            let mut gw = vec![0f64; d * classes];
            let mut gb = vec![0f64; classes];
            for &i in chunk {
                let x = &z.x[i * d..(i + 1) * d];
                let s = scores(&w, &b, x, classes);
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
                let tot: f64 = e.iter().sum();
                for c in 0..classes {
                    let g = e[c] / tot - if c == labels[i] { 1.0 } else { 0.0 };
                    gb[c] += g;
                    for (j, &xv) in x.iter().enumerate() {
                        gw[j * classes + c] += g * xv;
                    }
                }
            }
            let scale = lr / chunk.len() as f64;
            w.iter_mut().zip(&gw).for_each(|(p, g)| *p -= scale * g);
            b.iter_mut().zip(&gb).for_each(|(p, g)| *p -= scale * g);
            t += 1;
        }
    }
    (w, b)
}

fn fit_least_squares(z: &Standardized, labels: &[usize], train: &[usize], classes: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = z.dim;
    let x = DMatrix::from_fn(train.len(), d + 1, |r, c| if c == d { 1.0 } else { z.x[train[r] * d + c] });
    let y = DMatrix::from_fn(train.len(), classes, |r, c| if labels[train[r]] == c { 1.0 } else { 0.0 });
    let mut gram = x.transpose() * &x;
    let ridge = 1e-3 * train.len() as f64;
    for i in 0..d {
        gram[(i, i)] += ridge;
    }
    let rhs = x.transpose() * y;
    let sol = gram
        .cholesky()
        .ok_or_else(|| Error::NonFinite("least-squares probe system is not positive definite".into()))?
        .solve(&rhs);
    let w = (0..d).flat_map(|j| (0..classes).map(move |c| (j, c))).map(|(j, c)| sol[(j, c)]).collect();
    let b = (0..classes).map(|c| sol[(d, c)]).collect();
    Ok((w, b))
}

/// Train a linear softmax classifier on the training split of `features`
/// and report accuracy on the held-out split.
pub fn fit_linear_probe(features: &FeatureMatrix, labels: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<ProbeResult> {
    if features.source == FeatureSource::HeadOutput {
        return Err(contract_err!("the probe takes backbone features, not projection-head outputs"));
    }
    let (n, d) = features.values.dims2()?;
    if let Some(e) = cfg.expected_dim {
        if e != d {
            return Err(contract_err!("probe expects {e}-dimensional backbone features, got {d}"));
        }
    }
    if labels.len() != n {
        return Err(dim_err!("{} labels for {n} feature rows", labels.len()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(config_err!("label {l} outside [0, {classes})"));
    }
    if labels.iter().all(|&l| l == labels.first().copied().unwrap_or(0)) {
        return Err(config_err!("the probe needs at least two distinct labels"));
    }
    if !features.values.all_finite() {
        return Err(Error::NonFinite("probe features".into()));
    }
    if cfg.solver == ProbeSolver::Sgd && (cfg.epochs == 0 || !(cfg.lr > 0.0)) {
        return Err(config_err!("probe epochs and lr must be positive"));
    }
    let (train, test) = split_indices(n);
    if train.is_empty() || test.is_empty() {
        return Err(config_err!("{n} samples are too few for a train/test split"));
    }
    let z = standardize(&features.values, &train);
    let (w, b) = match cfg.solver {
        ProbeSolver::Sgd => fit_sgd(&z, labels, &train, classes, cfg),
        ProbeSolver::LeastSquares => fit_least_squares(&z, labels, &train, classes)?,
    };
    let mut hits = vec![0usize; classes];
    let mut seen = vec![0usize; classes];
    for &i in &test {
        let pred = argmax(&scores(&w, &b, &z.x[i * d..(i + 1) * d], classes));
        seen[labels[i]] += 1;
        hits[labels[i]] += (pred == labels[i]) as usize;
    }
    let correct: usize = hits.iter().sum();
    Ok(ProbeResult {
        top1: correct as f64 / test.len() as f64,
        per_class_acc: hits.iter().zip(&seen).map(|(&h, &s)| if s == 0 { 0.0 } else { h as f64 / s as f64 }).collect(),
        feature_dim: d,
        n_train: train.len(),
        n_test: test.len(),
        config: cfg.clone(),
    })
}

/// Extract backbone features of `params` on `ds` and probe them.
pub fn probe_params(params: &ModelParams, ds: &Dataset, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let f = extract_features(params, ds)?;
    let cfg = ProbeConfig { expected_dim: Some(params.cfg.feature_dim()), ..cfg.clone() };
    fit_linear_probe(&f, ds.labels(), ds.class_count(), &cfg)
}

/// Train each configuration and probe its query encoder. With `jobs > 1`
/// the runs execute concurrently; each result is independent of scheduling.
pub fn train_and_probe(cfgs: &[RunConfig], ds: &Dataset, probe: &ProbeConfig, jobs: usize) -> Result<Vec<(ProbeResult, Vec<Vec<usize>>)>> {
    let one = |cfg: &RunConfig| -> Result<(ProbeResult, Vec<Vec<usize>>)> {
        let run = train_run(cfg, ds, None)?;
        Ok((probe_params(run.params(), ds, probe)?, run.data_order))
    };
    #[cfg(feature = "parallel")]
    if jobs > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| config_err!("cannot start {jobs} workers: {e}"))?;
        return pool.install(|| cfgs.par_iter().map(one).collect());
    }
    #[cfg(not(feature = "parallel"))]
    if jobs > 1 {
        log::warn!("built without the `parallel` feature; running {} jobs sequentially", cfgs.len());
    }
    cfgs.iter().map(one).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TauRow {
    pub tau: f64,
    pub top1: f64,
}

#[derive(Clone, Debug)]
pub struct TauSweep {
    pub rows: Vec<TauRow>,
    /// Index of the best row; ties go to the earlier τ.
    pub best: usize,
    /// Per run, the per-epoch sample order (identical across runs).
    pub data_orders: Vec<Vec<Vec<usize>>>,
}

impl TauSweep {
    pub fn csv(&self) -> String {
        let mut s = String::from("tau,top1\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{}", r.tau, r.top1);
        }
        s
    }

    pub fn best_row(&self) -> &TauRow {
        &self.rows[self.best]
    }

    pub fn summary(&self) -> String {
        let b = self.best_row();
        format!(
            "best_tau = {}\nbest_top1 = {}\n# reference (full scale, not reproduced here): tau = {} at {}% top-1\n",
            b.tau, b.top1, TAU_REFERENCE.0, TAU_REFERENCE.1
        )
    }
}

/// One run per τ with everything else (seeds included) held fixed.
pub fn tau_sweep(base: &RunConfig, ds: &Dataset, taus: &[f64], probe: &ProbeConfig, jobs: usize) -> Result<TauSweep> {
    if taus.is_empty() {
        return Err(config_err!("the τ sweep needs at least one value"));
    }
    let cfgs: Vec<RunConfig> = taus.iter().map(|&tau| RunConfig { tau, ..base.clone() }).collect();
    for c in &cfgs {
        c.validate()?;
    }
    let results = train_and_probe(&cfgs, ds, probe, jobs)?;
    let rows: Vec<TauRow> = taus.iter().zip(&results).map(|(&tau, (p, _))| TauRow { tau, top1: p.top1 }).collect();
    let mut best = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.top1 > rows[best].top1 {
            best = i;
        }
    }
    Ok(TauSweep { rows, best, data_orders: results.into_iter().map(|(_, o)| o).collect() })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Variant {
    pub name: &'static str,
    pub mlp: bool,
    pub aug_plus: bool,
    pub cos: bool,
    /// Full-scale reference accuracy (%), context only.
    pub reference: f64,
}

/// The five ablation rows in report order.
pub const VARIANTS: [Variant; 5] = [
    Variant { name: "baseline", mlp: false, aug_plus: false, cos: false, reference: 60.6 },
    Variant { name: "mlp", mlp: true, aug_plus: false, cos: false, reference: 66.2 },
    Variant { name: "aug+", mlp: false, aug_plus: true, cos: false, reference: 63.4 },
    Variant { name: "mlp+aug+", mlp: true, aug_plus: true, cos: false, reference: 67.3 },
    Variant { name: "mlp+aug+cos", mlp: true, aug_plus: true, cos: true, reference: 67.5 },
];

impl Variant {
    /// `base` with this variant's head, augmentation and schedule. The
    /// temperature follows the head.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        c.encoder.head_kind = if self.mlp { HeadKind::Mlp } else { HeadKind::Fc };
        c.aug = if self.aug_plus { AugKind::Plus } else { AugKind::Base };
        c.schedule = if self.cos { Schedule::Cos } else { Schedule::Step };
        c.tau = default_tau(c.encoder.head_kind);
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    /// Median over seeds.
    pub top1: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub seeds: Vec<u64>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant.name == name)
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("variant,mlp,aug_plus,cos,top1,ref_paper_acc\n");
        for r in &self.rows {
            let v = &r.variant;
            let _ = writeln!(s, "{},{},{},{},{},{}", v.name, v.mlp as u8, v.aug_plus as u8, v.cos as u8, r.top1, v.reference);
        }
        s
    }

    pub fn markdown(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut s = format!(
            "| variant | MLP | aug+ | cos | top-1 (median, seeds {}) | full-scale reference top-1 (%) |\n|---|---|---|---|---|---|\n",
            seeds.join(",")
        );
        let mark = |b: bool| if b { "✓" } else { "" };
        for r in &self.rows {
            let v = &r.variant;
            let _ = writeln!(s, "| {} | {} | {} | {} | {:.4} | {} |", v.name, mark(v.mlp), mark(v.aug_plus), mark(v.cos), r.top1, v.reference);
        }
        s.push_str("\nReference accuracies come from full-scale training and are not reproducible at this scale.\n");
        s
    }
}

/// Every variant with every seed; seeds set the init, data and
/// augmentation streams together.
pub fn ablation_grid(base: &RunConfig, ds: &Dataset, seeds: &[u64], probe: &ProbeConfig, jobs: usize) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(config_err!("the ablation grid needs at least one seed"));
    }
    let cfgs: Vec<RunConfig> = VARIANTS
        .iter()
        .flat_map(|v| seeds.iter().map(move |&s| v.apply(base).with_seed(s)))
        .collect();
    for c in &cfgs {
        c.validate()?;
    }
    let results = train_and_probe(&cfgs, ds, probe, jobs)?;
    let rows = VARIANTS
        .iter()
        .enumerate()
        .map(|(vi, v)| {
            let per_seed: Vec<f64> = results[vi * seeds.len()..(vi + 1) * seeds.len()].iter().map(|(p, _)| p.top1).collect();
            AblationRow { variant: *v, top1: median(&per_seed), per_seed }
        })
        .collect();
    Ok(AblationTable { rows, seeds: seeds.to_vec() })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
