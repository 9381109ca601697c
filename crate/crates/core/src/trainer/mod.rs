//! SGD with momentum, learning-rate schedules and the training loop.

pub mod checkpoint;
pub mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::augment::{view_batch, AugConfig};
use crate::compute::Tensor;
use crate::data::{batch_iter, Dataset};
use crate::encoder::ModelParams;
use crate::error::{config_err, contract_err, Error, Result};
use crate::mechanisms::{e2e_step, moco_step, MoCoState, Mechanism, ParamGrads};
use crate::rng::{Domain, StreamKey};

pub use checkpoint::{load_checkpoint, load_query_params, save_checkpoint};
pub use config::RunConfig;

pub const METRICS_HEADER: &str = "step,epoch,lr,loss,pos_sim,neg_sim,queue_fill,wall_ms";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ORDER_FILE: &str = "data_order.log";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// ×0.1 at 60% and again at 80% of training.
    Step,
    /// Half-period cosine from `lr0` to 0.
    Cos,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::Step => "step",
            Schedule::Cos => "cos",
        })
    }
}

impl FromStr for Schedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "step" => Ok(Schedule::Step),
            "cos" | "cosine" => Ok(Schedule::Cos),
            _ => Err(config_err!("unknown schedule `{s}` (expected step or cos)")),
        }
    }
}

pub fn lr_at(schedule: Schedule, lr0: f64, t: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(config_err!("total steps must be at least 1"));
    }
    if t > total {
        return Err(contract_err!("step {t} is past the end of a {total}-step schedule"));
    }
    let frac = t as f64 / total as f64;
    Ok(match schedule {
        Schedule::Cos => lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()),
        Schedule::Step => {
            let drops = [0.6, 0.8].iter().filter(|&&m| frac >= m).count() as i32;
            lr0 * 0.1f64.powi(drops)
        }
    })
}

/// SGD with momentum and L2 weight decay: `g' = g + wd·θ`, `v ← μ·v + g'`,
/// `θ ← θ − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: BTreeMap::new() }
    }

    pub fn from_velocity(momentum: f64, weight_decay: f64, velocity: BTreeMap<String, Tensor>) -> Self {
        Sgd { momentum, weight_decay, velocity }
    }

    pub fn velocity(&self) -> &BTreeMap<String, Tensor> {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ParamGrads, lr: f64) -> Result<()> {
        if let Some(p) = params.paths().find(|p| !grads.contains_key(*p)) {
            return Err(contract_err!("no gradient for parameter `{p}`"));
        }
        for (path, theta) in params.iter_mut() {
            let g = &grads[path];
            if g.shape() != theta.shape() {
                return Err(contract_err!("gradient for `{path}` has shape {:?}, expected {:?}", g.shape(), theta.shape()));
            }
            let v = self.velocity.entry(path.clone()).or_insert_with(|| Tensor::zeros(theta.shape()));
            for ((t, &gv), vv) in theta.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let gd = gv as f64 + self.weight_decay * *t as f64;
                let nv = self.momentum * *vv as f64 + gd;
                *vv = nv as f32;
                *t = (*t as f64 - lr * nv) as f32;
            }
        }
        Ok(())
    }
}

/// Per-step log record. `warming` marks MoCo steps that only filled the
/// queue; it is not part of the CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub pos_sim: f64,
    pub neg_sim: f64,
    pub queue_fill: f64,
    pub wall_ms: f64,
    pub warming: bool,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.epoch, self.lr, self.loss, self.pos_sim, self.neg_sim, self.queue_fill, self.wall_ms
        )
    }
}

pub fn metrics_csv(rows: &[StepMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
pub enum Learner {
    Moco(MoCoState),
    E2e(ModelParams),
}

impl Learner {
    pub fn query_params(&self) -> &ModelParams {
        match self {
            Learner::Moco(st) => &st.q_params,
            Learner::E2e(p) => p,
        }
    }

    pub fn mechanism(&self) -> Mechanism {
        match self {
            Learner::Moco(_) => Mechanism::Moco,
            Learner::E2e(_) => Mechanism::E2e,
        }
    }
}

/// Everything a resumed run needs. `step` and `epoch` count completed work.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub learner: Learner,
    pub sgd: Sgd,
    pub step: usize,
    pub epoch: usize,
}

impl TrainState {
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let params = ModelParams::init(&cfg.encoder, cfg.seed_init)?;
        let learner = match cfg.mechanism {
            Mechanism::Moco => Learner::Moco(MoCoState::new(params, cfg.k, cfg.m, cfg.tau)?),
            Mechanism::E2e => Learner::E2e(params),
        };
        Ok(TrainState { learner, sgd: Sgd::new(cfg.sgd_momentum, cfg.weight_decay), step: 0, epoch: 0 })
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub state: TrainState,
    /// Rows for the steps executed by this call.
    pub metrics: Vec<StepMetrics>,
    pub checkpoints: Vec<PathBuf>,
    /// Per executed epoch, the sample indices in visiting order.
    pub data_order: Vec<Vec<usize>>,
}

impl RunOutput {
    pub fn params(&self) -> &ModelParams {
        self.state.learner.query_params()
    }
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch{epoch:03}.bin")
}

pub fn steps_per_epoch(cfg: &RunConfig, n: usize) -> usize {
    n / cfg.batch
}

/// Train from scratch. With `out`, writes the metrics CSV, the data-order
/// log and a checkpoint per epoch there.
pub fn train_run(cfg: &RunConfig, ds: &Dataset, out: Option<&Path>) -> Result<RunOutput> {
    run_from(cfg, ds, TrainState::init(cfg)?, out)
}

/// Continue from a checkpoint written by an earlier run of `cfg`.
pub fn resume_run(cfg: &RunConfig, ds: &Dataset, ckpt: &Path, out: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    let moco = (cfg.mechanism == Mechanism::Moco).then_some((cfg.m, cfg.tau));
    let state = load_checkpoint(ckpt, &cfg.encoder, moco, (cfg.sgd_momentum, cfg.weight_decay))?;
    run_from(cfg, ds, state, out)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn step_error(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(msg) => {
            log::error!("non-finite loss at step {step}");
            Error::NonFinite(format!("step {step}: {msg}"))
        }
        other => other,
    }
}

pub fn run_from(cfg: &RunConfig, ds: &Dataset, mut state: TrainState, out: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    if ds.side() != cfg.encoder.input_hw {
        return Err(config_err!("dataset side {} differs from input_hw {}", ds.side(), cfg.encoder.input_hw));
    }
    if state.learner.mechanism() != cfg.mechanism {
        return Err(contract_err!("state is for {} but the config asks for {}", state.learner.mechanism(), cfg.mechanism));
    }
    let spe = steps_per_epoch(cfg, ds.len());
    if spe == 0 {
        return Err(config_err!("batch {} exceeds the dataset size {}", cfg.batch, ds.len()));
    }
    if state.step != state.epoch * spe {
        return Err(contract_err!("checkpoint step {} is not at an epoch boundary", state.step));
    }
    let total = cfg.epochs * spe;
    let aug = AugConfig::new(cfg.aug);
    let order_root = StreamKey::new(Domain::DataOrder, cfg.seed_data);
    let aug_root = StreamKey::new(Domain::Augment, cfg.seed_aug);

    let (mut metrics_w, mut order_w) = match out {
        Some(dir) => {
            let mut m = create(&dir.join(METRICS_FILE))?;
            writeln!(m, "{METRICS_HEADER}").map_err(|e| Error::io(dir, e))?;
            (Some(m), Some(create(&dir.join(ORDER_FILE))?))
        }
        None => (None, None),
    };

    let mut result = RunOutput { state: state.clone(), metrics: Vec::new(), checkpoints: Vec::new(), data_order: Vec::new() };
    for epoch in state.epoch..cfg.epochs {
        let batches = batch_iter(ds.len(), cfg.batch, order_root.derive(epoch as u64))?;
        let epoch_key = aug_root.derive(epoch as u64);
        for idx in &batches {
            let t = state.step;
            let started = Instant::now();
            let (vq, vk) = view_batch(ds.images(), idx, &aug, epoch_key)?;
            let lr = lr_at(cfg.schedule, cfg.lr0, t, total)?;
            let row = match &mut state.learner {
                Learner::Moco(st) => {
                    let fill = st.queue.fill_fraction();
                    let o = moco_step(st, &vq, &vk).map_err(|e| step_error(t, e))?;
                    if let Some(g) = &o.q_grads {
                        state.sgd.step(&mut st.q_params, g, lr)?;
                    }
                    StepMetrics {
                        step: t,
                        epoch,
                        lr,
                        loss: o.loss.unwrap_or(0.0),
                        pos_sim: o.mean_pos_sim,
                        neg_sim: o.mean_neg_sim,
                        queue_fill: fill,
                        wall_ms: 0.0,
                        warming: o.warming,
                    }
                }
                Learner::E2e(p) => {
                    let o = e2e_step(p, &vq, &vk, cfg.tau).map_err(|e| step_error(t, e))?;
                    state.sgd.step(p, &o.grads, lr)?;
                    StepMetrics {
                        step: t,
                        epoch,
                        lr,
                        loss: o.loss,
                        pos_sim: o.mean_pos_sim,
                        neg_sim: o.mean_neg_sim,
                        queue_fill: 0.0,
                        wall_ms: 0.0,
                        warming: false,
                    }
                }
            };
            let row = StepMetrics {
                wall_ms: if cfg.log_wall_time { started.elapsed().as_secs_f64() * 1e3 } else { 0.0 },
                ..row
            };
            if let Some(w) = metrics_w.as_mut() {
                writeln!(w, "{}", row.csv_row()).map_err(|e| Error::io(METRICS_FILE, e))?;
            }
            result.metrics.push(row);
            state.step += 1;
        }
        state.epoch += 1;
        let order = batches.concat();
        if let Some(w) = order_w.as_mut() {
            let line: Vec<String> = order.iter().map(usize::to_string).collect();
            writeln!(w, "epoch {epoch}: {}", line.join(" ")).map_err(|e| Error::io(ORDER_FILE, e))?;
        }
        result.data_order.push(order);
        if let Some(dir) = out {
            if let Some(w) = metrics_w.as_mut() {
                w.flush().map_err(|e| Error::io(dir, e))?;
            }
            let path = dir.join(checkpoint_name(state.epoch));
            save_checkpoint(&path, &state)?;
            result.checkpoints.push(path);
        }
        log::info!("epoch {} done at step {}", epoch + 1, state.step);
    }
    for w in [metrics_w.as_mut(), order_w.as_mut()].into_iter().flatten() {
        w.flush().map_err(|e| Error::io(out.unwrap_or(Path::new(".")), e))?;
    }
    result.state = state;
    Ok(result)
}
