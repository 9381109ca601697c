//! Desk-scale conv backbone and the two projection heads.
//!
//! The backbone is a stack of `conv3×3 → bias → relu` blocks (stride 1 for
//! the first block, stride 2 afterwards) followed by a global average pool.
//! Its output is the frozen feature the linear probe reads. The head maps
//! features to the embedding used by the contrastive loss and is discarded
//! for evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::compute::{Graph, Real, Tensor, Var};
use crate::error::{config_err, contract_err, dim_err, Error, Result};
use crate::rng::{Domain, StreamKey};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    /// Single linear map.
    Fc,
    /// Linear → relu → linear.
    Mlp,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Fc => "fc",
            HeadKind::Mlp => "mlp",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fc" => Ok(HeadKind::Fc),
            "mlp" => Ok(HeadKind::Mlp),
            _ => Err(config_err!("unknown head kind {s:?} (expected fc or mlp)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub input_hw: usize,
    pub channels: Vec<usize>,
    pub head_kind: HeadKind,
    /// Hidden width of the MLP head; ignored by the fc head.
    pub head_hidden: usize,
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_hw: 32,
            channels: vec![32, 64, 128],
            head_kind: HeadKind::Mlp,
            head_hidden: 256,
            embed_dim: 64,
        }
    }
}

impl EncoderConfig {
    /// Backbone output width, the last conv width.
    pub fn feature_dim(&self) -> usize {
        self.channels.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(config_err!("channels must be a non-empty list of positive widths"));
        }
        if self.embed_dim == 0 || self.head_hidden == 0 {
            return Err(config_err!("embed_dim and head_hidden must be positive"));
        }
        let mut hw = self.input_hw;
        for i in 0..self.channels.len() {
            hw = block_out_extent(hw, i).ok_or_else(|| {
                config_err!(
                    "input_hw {} does not divide evenly through {} stride-2 blocks",
                    self.input_hw,
                    self.channels.len() - 1
                )
            })?;
        }
        if self.head_kind == HeadKind::Mlp && self.head_hidden < self.embed_dim {
            log::warn!(
                "head_hidden {} is smaller than embed_dim {}",
                self.head_hidden,
                self.embed_dim
            );
        }
        Ok(())
    }

    /// Spatial side after each backbone block.
    pub fn block_extents(&self) -> Vec<usize> {
        let mut hw = self.input_hw;
        (0..self.channels.len())
            .map(|i| {
                hw = block_out_extent(hw, i).unwrap_or(0);
                hw
            })
            .collect()
    }
}

pub const KERNEL: usize = 3;
pub const PAD: usize = 1;

pub fn block_stride(block: usize) -> usize {
    if block == 0 {
        1
    } else {
        2
    }
}

fn block_out_extent(hw: usize, block: usize) -> Option<usize> {
    let s = block_stride(block);
    let span = (hw + 2 * PAD).checked_sub(KERNEL)?;
    (span % s <= PAD && hw > 0).then(|| span / s + 1)
}

/// Named encoder parameters. Paths are stable names used by the checkpoint
/// format: `conv{i}.w`, `conv{i}.b`, and `head.fc.{w,b}` or
/// `head.fc1.{w,b}` / `head.fc2.{w,b}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    pub cfg: EncoderConfig,
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Parameter shapes in path order.
pub fn param_shapes(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut in_ch = 3;
    for (i, &f) in cfg.channels.iter().enumerate() {
        out.push((format!("conv{i}.w"), vec![f, in_ch, KERNEL, KERNEL]));
        out.push((format!("conv{i}.b"), vec![f]));
        in_ch = f;
    }
    let d = cfg.feature_dim();
    match cfg.head_kind {
        HeadKind::Fc => {
            out.push(("head.fc.w".into(), vec![d, cfg.embed_dim]));
            out.push(("head.fc.b".into(), vec![cfg.embed_dim]));
        }
        HeadKind::Mlp => {
            out.push(("head.fc1.w".into(), vec![d, cfg.head_hidden]));
            out.push(("head.fc1.b".into(), vec![cfg.head_hidden]));
            out.push(("head.fc2.w".into(), vec![cfg.head_hidden, cfg.embed_dim]));
            out.push(("head.fc2.b".into(), vec![cfg.embed_dim]));
        }
    }
    out
}

fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [f, c, kh, kw] => (c * kh * kw, f * kh * kw),
        [i, o] => (*i, *o),
        _ => (1, 1),
    }
}

impl ModelParams<f32> {
    /// Glorot-uniform weights, zero biases. Each tensor draws from its own
    /// stream so adding a head does not perturb the backbone init.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let root = StreamKey::new(Domain::Init, seed);
        let mut tensors = BTreeMap::new();
        for (idx, (path, shape)) in param_shapes(cfg).into_iter().enumerate() {
            let t = if path.ends_with(".b") {
                Tensor::zeros(&shape)
            } else {
                let (fan_in, fan_out) = fans(&shape);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut rng = root.derive(idx as u64).rng();
                Tensor::from_fn(&shape, |_| rng.random_range(-a..a) as f32)
            };
            tensors.insert(path, t);
        }
        Ok(ModelParams {
            cfg: cfg.clone(),
            tensors,
        })
    }
}

impl<T: Real> ModelParams<T> {
    pub fn from_tensors(cfg: &EncoderConfig, tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let expected = param_shapes(cfg);
        if expected.len() != tensors.len() {
            return Err(contract_err!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                tensors.len()
            ));
        }
        for (path, shape) in &expected {
            match tensors.get(path) {
                Some(t) if t.shape() == &shape[..] => {}
                Some(t) => {
                    return Err(dim_err!(
                        "parameter {path} has shape {:?}, expected {shape:?}",
                        t.shape()
                    ))
                }
                None => return Err(contract_err!("missing parameter {path}")),
            }
        }
        Ok(ModelParams {
            cfg: cfg.clone(),
            tensors,
        })
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<T>> {
        self.tensors.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Same paths with the same shapes.
    pub fn congruent<U: Real>(&self, other: &ModelParams<U>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((pa, ta), (pb, tb))| pa == pb && ta.shape() == tb.shape())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn byte_len(&self) -> usize {
        self.tensors.values().map(Tensor::byte_len).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            cfg: self.cfg.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Record every parameter as a graph leaf.
    pub fn register(&self, g: &mut Graph<T>, requires_grad: bool) -> ParamVars {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), g.leaf(v.clone(), requires_grad)))
                .collect(),
        }
    }
}

/// Graph handles for a registered [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, path: &str) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| contract_err!("parameter {path} is not registered"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Pairs `(path, var)` built directly, for test fixtures.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        ParamVars {
            vars: pairs.into_iter().collect(),
        }
    }

    /// Copy the gradients of all registered parameters out of `g`.
    pub fn grads<T: Real>(&self, g: &Graph<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let grad = g
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()));
                (k.clone(), grad)
            })
            .collect()
    }
}

/// `x[B×3×H×W]` → features `[B×D_f]`.
pub fn backbone_forward<T: Real>(
    g: &mut Graph<T>,
    cfg: &EncoderConfig,
    p: &ParamVars,
    x: Var,
) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    match shape[..] {
        [_, 3, h, w] if h == cfg.input_hw && w == cfg.input_hw => {}
        _ => {
            return Err(dim_err!(
                "backbone expects [B×3×{0}×{0}] input, got {shape:?}",
                cfg.input_hw
            ))
        }
    }
    let mut h = x;
    for i in 0..cfg.channels.len() {
        h = g.conv2d(h, p.get(&format!("conv{i}.w"))?, block_stride(i), PAD)?;
        h = g.add_channel_bias(h, p.get(&format!("conv{i}.b"))?)?;
        h = g.relu(h)?;
    }
    g.global_avg_pool(h)
}

fn linear<T: Real>(g: &mut Graph<T>, p: &ParamVars, name: &str, x: Var) -> Result<Var> {
    let y = g.matmul(x, p.get(&format!("{name}.w"))?)?;
    g.add_row_bias(y, p.get(&format!("{name}.b"))?)
}

/// Features `[B×D_f]` → unnormalized embeddings `[B×D_e]`.
pub fn head_forward<T: Real>(
    g: &mut Graph<T>,
    cfg: &EncoderConfig,
    p: &ParamVars,
    f: Var,
) -> Result<Var> {
    let shape = g.value(f).shape().to_vec();
    match shape[..] {
        [_, d] if d == cfg.feature_dim() => {}
        _ => {
            return Err(dim_err!(
                "head expects [B×{}] features, got {shape:?}",
                cfg.feature_dim()
            ))
        }
    }
    match cfg.head_kind {
        HeadKind::Fc => linear(g, p, "head.fc", f),
        HeadKind::Mlp => {
            let h = linear(g, p, "head.fc1", f)?;
            let h = g.relu(h)?;
            linear(g, p, "head.fc2", h)
        }
    }
}

/// Backbone, head, then row-wise L2 normalization.
pub fn embed<T: Real>(g: &mut Graph<T>, cfg: &EncoderConfig, p: &ParamVars, x: Var) -> Result<Var> {
    let f = backbone_forward(g, cfg, p, x)?;
    let e = head_forward(g, cfg, p, f)?;
    g.l2_normalize(e)
}

/// Gradient-free backbone features for a batch of images.
pub fn features(params: &ModelParams, images: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.register(&mut g, false);
    let x = g.constant(images.clone());
    let f = backbone_forward(&mut g, &params.cfg, &p, x)?;
    Ok(g.value(f).clone())
}

/// Gradient-free normalized embeddings for a batch of images.
pub fn embeddings(params: &ModelParams, images: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.register(&mut g, false);
    let x = g.constant(images.clone());
    let e = embed(&mut g, &params.cfg, &p, x)?;
    Ok(g.value(e).clone())
}
