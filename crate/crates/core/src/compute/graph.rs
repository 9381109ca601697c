use std::collections::HashSet;

use super::kernels::{self, ConvGeom};
use super::tensor::{Real, Tensor};
use crate::error::{config_err, contract_err, dim_err, Result};

/// Denominator floor for [`Graph::l2_normalize`].
pub const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulNt,
    Conv2d,
    AddChannelBias,
    AddRowBias,
    Add,
    Relu,
    Scale,
    GlobalAvgPool,
    L2Normalize,
    RowDot,
    ConcatCols,
    CrossEntropy,
    Sum,
    Mean,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Vec<T> },
    AddChannelBias { x: Var, b: Var },
    AddRowBias { x: Var, b: Var },
    Add { a: Var, b: Var },
    Relu { x: Var },
    Scale { x: Var, factor: f64 },
    GlobalAvgPool { x: Var },
    L2Normalize { x: Var, norms: Vec<f64> },
    RowDot { a: Var, b: Var },
    ConcatCols { a: Var, b: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Sum { x: Var },
    Mean { x: Var },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::MatMulNt { .. } => OpKind::MatMulNt,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::AddChannelBias { .. } => OpKind::AddChannelBias,
            Op::AddRowBias { .. } => OpKind::AddRowBias,
            Op::Add { .. } => OpKind::Add,
            Op::Relu { .. } => OpKind::Relu,
            Op::Scale { .. } => OpKind::Scale,
            Op::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::RowDot { .. } => OpKind::RowDot,
            Op::ConcatCols { .. } => OpKind::ConcatCols,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul { a, b }
            | Op::MatMulNt { a, b }
            | Op::Add { a, b }
            | Op::RowDot { a, b }
            | Op::ConcatCols { a, b } => vec![a, b],
            Op::Conv2d { x, w, .. } => vec![x, w],
            Op::AddChannelBias { x, b } | Op::AddRowBias { x, b } => vec![x, b],
            Op::Relu { x }
            | Op::Scale { x, .. }
            | Op::GlobalAvgPool { x }
            | Op::L2Normalize { x, .. }
            | Op::Sum { x }
            | Op::Mean { x } => vec![x],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recorded computation with reverse-mode gradients.
///
/// Nodes are appended in execution order, so ids are a topological order.
/// A node requires grad iff one of its inputs does; nodes that do not
/// require grad are never visited by [`Graph::backward`], which is how
/// detached tensors (the momentum-encoder keys) are kept out of gradients.
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    zero_norm_rows: usize,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            zero_norm_rows: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v`'s value as a fresh leaf that never receives gradient.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Count of recorded ops of `kind` among nodes with id ≥ `since`.
    pub fn op_count_since(&self, since: usize, kind: OpKind) -> usize {
        self.nodes[since.min(self.nodes.len())..]
            .iter()
            .filter(|n| n.op.kind() == kind)
            .count()
    }

    pub fn op_count(&self, kind: OpKind) -> usize {
        self.op_count_since(0, kind)
    }

    /// Rows that hit the norm floor in [`Graph::l2_normalize`].
    pub fn zero_norm_rows(&self) -> usize {
        self.zero_norm_rows
    }

    /// Sign pattern of every relu input, in graph order. Two evaluations with
    /// equal patterns lie on the same linear piece of every relu.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Relu { .. } = n.op {
                out.extend(n.value.data().iter().map(|v| v.to_f64() > 0.0));
            }
        }
        out
    }

    /// Bytes of activations that the backward pass reads, over nodes with
    /// ids in `range`. Leaves (parameters, inputs) are excluded; each
    /// activation is counted once even when several ops read it.
    pub fn retained_activation_bytes(&self, range: std::ops::Range<usize>) -> usize {
        let elem = std::mem::size_of::<T>();
        let mut seen = HashSet::new();
        let mut bytes = 0;
        for id in range {
            let n = &self.nodes[id];
            if !n.requires_grad {
                continue;
            }
            let mut reads: Vec<Var> = Vec::new();
            match &n.op {
                Op::Conv2d { cols, .. } => bytes += cols.len() * elem,
                Op::Relu { .. } => reads.push(Var(id)),
                Op::MatMul { a, b } | Op::MatMulNt { a, b } | Op::RowDot { a, b } => {
                    reads.push(*a);
                    reads.push(*b);
                }
                Op::L2Normalize { norms, .. } => {
                    reads.push(Var(id));
                    bytes += norms.len() * elem;
                }
                Op::CrossEntropy { probs, .. } => bytes += probs.len() * elem,
                _ => {}
            }
            for r in reads {
                if matches!(self.nodes[r.0].op, Op::Leaf) {
                    continue;
                }
                if seen.insert(r) {
                    bytes += self.nodes[r.0].value.len() * elem;
                }
            }
        }
        bytes
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn mat(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        self.nodes[v.0]
            .value
            .dims2()
            .map_err(|_| dim_err!("{what}: expected a matrix, got {:?}", self.shape(v)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul lhs")?;
        let (k2, n) = self.mat(b, "matmul rhs")?;
        if k != k2 {
            return Err(dim_err!(
                "matmul {:?} × {:?}: inner extents differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        let out = kernels::matmul_nn(self.data(a), self.data(b), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }))
    }

    /// `a · bᵀ` for `a[M×K]`, `b[N×K]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul_nt lhs")?;
        let (n, k2) = self.mat(b, "matmul_nt rhs")?;
        if k != k2 {
            return Err(dim_err!(
                "matmul_nt {:?} × {:?}ᵀ: inner extents differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        let out = kernels::matmul_nt(self.data(a), self.data(b), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt { a, b }))
    }

    /// Cross-correlation of `x[B×C×H×W]` with `w[F×C×kh×kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (b, c, h, wd) = self.nodes[x.0].value.dims4()?;
        let (f, c2, kh, kw) = self.nodes[w.0].value.dims4()?;
        if c != c2 {
            return Err(dim_err!(
                "conv2d input {:?} vs kernel {:?}: channel extents differ",
                self.shape(x),
                self.shape(w)
            ));
        }
        if stride == 0 {
            return Err(config_err!("conv2d stride must be positive"));
        }
        let out_extent = |n: usize, k: usize| -> Result<usize> {
            let span = (n + 2 * pad)
                .checked_sub(k)
                .ok_or_else(|| config_err!("conv2d kernel {k} larger than padded input {}", n + 2 * pad))?;
            // A remainder is tolerated only when it consists of padding cells.
            if span % stride > pad {
                return Err(config_err!(
                    "conv2d output extent ({n} + 2·{pad} − {k})/{stride} + 1 is not integral"
                ));
            }
            Ok(span / stride + 1)
        };
        let geom = ConvGeom {
            batch: b,
            in_ch: c,
            in_h: h,
            in_w: wd,
            out_ch: f,
            kh,
            kw,
            stride,
            pad,
            out_h: out_extent(h, kh)?,
            out_w: out_extent(wd, kw)?,
        };
        let cols = kernels::im2col(self.data(x), &geom);
        let out = kernels::matmul_nn(self.data(w), &cols, f, geom.patch_len(), geom.columns());
        let out = kernels::channels_to_batch(&out, f, b, geom.out_plane());
        let value = Tensor::new(vec![b, f, geom.out_h, geom.out_w], out)?;
        let keep = self.nodes[w.0].requires_grad;
        let cols = if keep { cols } else { Vec::new() };
        Ok(self.push(value, Op::Conv2d { x, w, geom, cols }))
    }

    /// `x[B×C×H×W] + b[C]` broadcast over batch and space.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, c, h, w) = self.nodes[x.0].value.dims4()?;
        if self.shape(b) != [c] {
            return Err(dim_err!(
                "channel bias {:?} does not match input {:?}",
                self.shape(b),
                self.shape(x)
            ));
        }
        let plane = h * w;
        let bias = self.data(b);
        let out: Vec<T> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| T::from_f64(v.to_f64() + bias[(i / plane) % c].to_f64()))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::AddChannelBias { x, b }))
    }

    /// `x[B×N] + b[N]` added to every row.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, n) = self.mat(x, "row bias input")?;
        if self.shape(b) != [n] {
            return Err(dim_err!(
                "row bias {:?} does not match input {:?}",
                self.shape(b),
                self.shape(x)
            ));
        }
        let bias = self.data(b);
        let out: Vec<T> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| T::from_f64(v.to_f64() + bias[i % n].to_f64()))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRowBias { x, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "add {:?} + {:?}: shapes differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| T::from_f64(x.to_f64() + y.to_f64()))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<T> = self
            .data(x)
            .iter()
            .map(|&v| if v > T::ZERO { v } else { T::ZERO })
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Relu { x }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out: Vec<T> = self
            .data(x)
            .iter()
            .map(|&v| T::from_f64(v.to_f64() * factor))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Scale { x, factor }))
    }

    /// `[B×C×H×W]` → `[B×C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.nodes[x.0].value.dims4()?;
        let plane = h * w;
        let out: Vec<T> = self
            .data(x)
            .chunks(plane.max(1))
            .take(b * c)
            .map(|p| T::from_f64(p.iter().map(|v| v.to_f64()).sum::<f64>() / plane as f64))
            .collect();
        Ok(self.push(Tensor::new(vec![b, c], out)?, Op::GlobalAvgPool { x }))
    }

    /// Row-wise `x / max(‖x‖, 1e-12)`.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.mat(x, "l2_normalize")?;
        let mut out = Vec::with_capacity(rows * cols);
        let mut norms = Vec::with_capacity(rows);
        let mut zero_rows = 0;
        for r in 0..rows {
            let row = &self.data(x)[r * cols..(r + 1) * cols];
            let n = row.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt();
            if n < NORM_FLOOR {
                zero_rows += 1;
            }
            let d = n.max(NORM_FLOOR);
            out.extend(row.iter().map(|v| T::from_f64(v.to_f64() / d)));
            norms.push(n);
        }
        if zero_rows > 0 {
            log::warn!("l2_normalize: {zero_rows} row(s) below the norm floor");
            self.zero_norm_rows += zero_rows;
        }
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::L2Normalize { x, norms }))
    }

    /// `[B×D]·[B×D]` → `[B×1]` per-row dot products.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.mat(a, "row_dot lhs")?;
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "row_dot {:?} · {:?}: shapes differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        let (da, db) = (self.data(a), self.data(b));
        let out: Vec<T> = (0..rows)
            .map(|r| {
                let s: f64 = da[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(&db[r * cols..(r + 1) * cols])
                    .map(|(x, y)| x.to_f64() * y.to_f64())
                    .sum();
                T::from_f64(s)
            })
            .collect();
        Ok(self.push(Tensor::new(vec![rows, 1], out)?, Op::RowDot { a, b }))
    }

    /// Column-wise concatenation of `a[B×N1]` and `b[B×N2]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.mat(a, "concat lhs")?;
        let (rb, cb) = self.mat(b, "concat rhs")?;
        if ra != rb {
            return Err(dim_err!(
                "concat_cols {:?} | {:?}: row counts differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&self.data(a)[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&self.data(b)[r * cb..(r + 1) * cb]);
        }
        Ok(self.push(Tensor::new(vec![ra, ca + cb], out)?, Op::ConcatCols { a, b }))
    }

    /// Mean over rows of `−log softmax(logits[i])[targets[i]]`, stabilized by
    /// subtracting the row maximum.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.mat(logits, "cross_entropy logits")?;
        if targets.len() != rows {
            return Err(dim_err!(
                "cross_entropy: {} targets for {rows} rows",
                targets.len()
            ));
        }
        if rows == 0 {
            return Err(contract_err!("cross_entropy over an empty batch"));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(dim_err!("cross_entropy target {t} out of range for {cols} classes"));
        }
        let x = self.data(logits);
        let mut probs = vec![0f64; rows * cols];
        let mut total = 0f64;
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[r * cols..(r + 1) * cols];
            let mut z = 0f64;
            for (pi, v) in p.iter_mut().zip(row) {
                *pi = (v.to_f64() - max).exp();
                z += *pi;
            }
            for pi in p.iter_mut() {
                *pi /= z;
            }
            total += z.ln() - (row[targets[r]].to_f64() - max);
        }
        let loss = total / rows as f64;
        Ok(self.push(
            Tensor::scalar(T::from_f64(loss)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.data(x).iter().map(|v| v.to_f64()).sum();
        Ok(self.push(Tensor::scalar(T::from_f64(s)), Op::Sum { x }))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.data(x).len();
        if n == 0 {
            return Err(contract_err!("mean of an empty tensor"));
        }
        let s: f64 = self.data(x).iter().map(|v| v.to_f64()).sum();
        Ok(self.push(Tensor::scalar(T::from_f64(s / n as f64)), Op::Mean { x }))
    }

    /// Reverse-mode accumulation from the scalar `loss`.
    ///
    /// Afterwards every leaf that requires grad has a gradient buffer; leaves
    /// not connected to `loss` get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if self.nodes[loss.0].requires_grad {
            let shape = self.shape(loss).to_vec();
            self.nodes[loss.0].grad = Some(Tensor::full(&shape, T::ONE));
        }
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[id].grad.take() else {
                continue;
            };
            let contribs = self.local_grads(id, g.data());
            self.nodes[id].grad = Some(g);
            for (v, d) in contribs {
                self.accumulate(v, d);
            }
        }
        for n in &mut self.nodes {
            if n.requires_grad && matches!(n.op, Op::Leaf) && n.grad.is_none() {
                n.grad = Some(Tensor::zeros(n.value.shape()));
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, d: Vec<T>) {
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(g) => {
                for (x, y) in g.data_mut().iter_mut().zip(d) {
                    *x = T::from_f64(x.to_f64() + y.to_f64());
                }
            }
            None => {
                node.grad = Some(Tensor::new(node.value.shape().to_vec(), d).expect("grad shape"));
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, id: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[id];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let [m, k] = self.shape(a)[..] else { unreachable!() };
                let n = self.shape(b)[1];
                if self.needs(a) {
                    out.push((a, kernels::matmul_nt(g, self.data(b), m, n, k)));
                }
                if self.needs(b) {
                    out.push((b, kernels::matmul_tn(self.data(a), g, m, k, n)));
                }
            }
            &Op::MatMulNt { a, b } => {
                let [m, k] = self.shape(a)[..] else { unreachable!() };
                let n = self.shape(b)[0];
                if self.needs(a) {
                    out.push((a, kernels::matmul_nn(g, self.data(b), m, n, k)));
                }
                if self.needs(b) {
                    out.push((b, kernels::matmul_tn(g, self.data(a), m, n, k)));
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                let (f, p, bsz) = (geom.out_ch, geom.out_plane(), geom.batch);
                let gp = kernels::batch_to_channels(g, f, bsz, p);
                if self.needs(*w) {
                    let dw = kernels::matmul_nt(&gp, cols, f, geom.columns(), geom.patch_len());
                    out.push((*w, dw));
                }
                if self.needs(*x) {
                    let dcols =
                        kernels::matmul_tn(self.data(*w), &gp, f, geom.patch_len(), geom.columns());
                    out.push((*x, kernels::col2im(&dcols, geom)));
                }
            }
            &Op::AddChannelBias { x, b } => {
                if self.needs(x) {
                    out.push((x, g.to_vec()));
                }
                if self.needs(b) {
                    let [_, c, h, w] = self.shape(x)[..] else { unreachable!() };
                    let plane = h * w;
                    let mut acc = vec![0f64; c];
                    for (i, v) in g.iter().enumerate() {
                        acc[(i / plane) % c] += v.to_f64();
                    }
                    out.push((b, acc.into_iter().map(T::from_f64).collect()));
                }
            }
            &Op::AddRowBias { x, b } => {
                if self.needs(x) {
                    out.push((x, g.to_vec()));
                }
                if self.needs(b) {
                    let n = self.shape(b)[0];
                    let mut acc = vec![0f64; n];
                    for (i, v) in g.iter().enumerate() {
                        acc[i % n] += v.to_f64();
                    }
                    out.push((b, acc.into_iter().map(T::from_f64).collect()));
                }
            }
            &Op::Add { a, b } => {
                if self.needs(a) {
                    out.push((a, g.to_vec()));
                }
                if self.needs(b) {
                    out.push((b, g.to_vec()));
                }
            }
            &Op::Relu { x } => {
                if self.needs(x) {
                    let d = node
                        .value
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&y, &gv)| if y > T::ZERO { gv } else { T::ZERO })
                        .collect();
                    out.push((x, d));
                }
            }
            &Op::Scale { x, factor } => {
                if self.needs(x) {
                    out.push((x, g.iter().map(|v| T::from_f64(v.to_f64() * factor)).collect()));
                }
            }
            &Op::GlobalAvgPool { x } => {
                if self.needs(x) {
                    let [_, _, h, w] = self.shape(x)[..] else { unreachable!() };
                    let plane = h * w;
                    let mut d = Vec::with_capacity(g.len() * plane);
                    for v in g {
                        let s = T::from_f64(v.to_f64() / plane as f64);
                        d.extend(std::iter::repeat_n(s, plane));
                    }
                    out.push((x, d));
                }
            }
            Op::L2Normalize { x, norms } => {
                if self.needs(*x) {
                    let cols = self.shape(*x)[1];
                    let y = node.value.data();
                    let mut d = Vec::with_capacity(y.len());
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        if n < NORM_FLOOR {
                            d.extend(gr.iter().map(|v| T::from_f64(v.to_f64() / NORM_FLOOR)));
                            continue;
                        }
                        let yg: f64 = yr.iter().zip(gr).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
                        d.extend(
                            yr.iter()
                                .zip(gr)
                                .map(|(a, b)| T::from_f64((b.to_f64() - a.to_f64() * yg) / n)),
                        );
                    }
                    out.push((*x, d));
                }
            }
            &Op::RowDot { a, b } => {
                let cols = self.shape(a)[1];
                let scaled = |other: &[T]| -> Vec<T> {
                    other
                        .iter()
                        .enumerate()
                        .map(|(i, v)| T::from_f64(v.to_f64() * g[i / cols].to_f64()))
                        .collect()
                };
                if self.needs(a) {
                    out.push((a, scaled(self.data(b))));
                }
                if self.needs(b) {
                    out.push((b, scaled(self.data(a))));
                }
            }
            &Op::ConcatCols { a, b } => {
                let ca = self.shape(a)[1];
                let cb = self.shape(b)[1];
                let rows = self.shape(a)[0];
                if self.needs(a) {
                    let mut d = Vec::with_capacity(rows * ca);
                    for r in 0..rows {
                        d.extend_from_slice(&g[r * (ca + cb)..r * (ca + cb) + ca]);
                    }
                    out.push((a, d));
                }
                if self.needs(b) {
                    let mut d = Vec::with_capacity(rows * cb);
                    for r in 0..rows {
                        d.extend_from_slice(&g[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                    }
                    out.push((b, d));
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if self.needs(*logits) {
                    let cols = self.shape(*logits)[1];
                    let rows = targets.len();
                    let up = g[0].to_f64() / rows as f64;
                    let d = probs
                        .iter()
                        .enumerate()
                        .map(|(i, &p)| {
                            let t = if targets[i / cols] == i % cols { 1.0 } else { 0.0 };
                            T::from_f64((p - t) * up)
                        })
                        .collect();
                    out.push((*logits, d));
                }
            }
            &Op::Sum { x } => {
                if self.needs(x) {
                    out.push((x, vec![g[0]; self.data(x).len()]));
                }
            }
            &Op::Mean { x } => {
                if self.needs(x) {
                    let n = self.data(x).len();
                    out.push((x, vec![T::from_f64(g[0].to_f64() / n as f64); n]));
                }
            }
        }
        out
    }
}
