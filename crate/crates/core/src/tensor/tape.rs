//! Define-by-run reverse-mode differentiation.
//!
//! Every op appends a node holding its output value. Nodes whose inputs are
//! all constants are recorded as constants themselves and keep no saved state,
//! so no-grad forwards (key encoder, evaluation) cost no more than a plain
//! forward pass.

use super::kernels::{col2im, gemm, im2col, ConvGeometry};
use super::value::Tensor;
use crate::error::{HexaError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether batch normalization normalizes with the batch's own statistics or
/// with externally supplied running statistics.
#[derive(Clone, Debug)]
pub enum BnNormalization<'a> {
    Batch,
    Running { mean: &'a [f32], var: &'a [f32] },
}

/// Per-channel moments of the batch a batch-norm op normalized with.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f32>,
    /// Unbiased variance estimate.
    pub var: Vec<f32>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Softmax(Var),
    LogSoftmax(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f32>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
        cols: Vec<f32>,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    GlobalAvgPool(Var),
    ConcatCols(Vec<Var>),
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Op,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("recorded_ops", &self.recorded_ops())
            .field("consumed", &self.consumed)
            .finish()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> HexaError {
    HexaError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, len: usize, f: impl FnOnce(&mut [f32])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes that carry a backward rule.
    pub fn recorded_ops(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .count()
    }

    /// Drops all nodes.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: impl FnOnce() -> Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op() } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape(), data)
        } else if tb.is_scalar() {
            let y = tb.data()[0];
            Ok(ta.map(|x| f(x, y)))
        } else if ta.is_scalar() {
            let x = ta.data()[0];
            Ok(tb.map(|y| f(x, y)))
        } else {
            Err(shape_err(name, ta, tb))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, &[a, b], || Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, &[a, b], || Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, &[a, b], || Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, &[a], || Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, &[a], || Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push(out, &[a, b], || Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose2()?;
        Ok(self.push(out, &[a], || Op::Transpose(a)))
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, &[a], || Op::Reshape(a)))
    }

    /// Rectified linear unit; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(out, &[a], || Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f32::exp);
        self.push(out, &[a], || Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f32::ln);
        self.push(out, &[a], || Op::Log(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        self.push(Tensor::scalar(s), &[a], || Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(HexaError::contract("mean of empty tensor"));
        }
        let s = (t.data().iter().map(|&v| v as f64).sum::<f64>() / t.numel() as f64) as f32;
        Ok(self.push(Tensor::scalar(s), &[a], || Op::Mean(a)))
    }

    /// Sums over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() == 0 {
            return Err(HexaError::contract("sum_last on a scalar"));
        }
        let d = t.row_len();
        let data: Vec<f32> = if d == 0 {
            vec![0.0; t.shape()[..t.ndim() - 1].iter().product()]
        } else {
            t.data().chunks(d).map(|r| r.iter().sum()).collect()
        };
        let out = Tensor::new(&t.shape()[..t.ndim() - 1], data)?;
        Ok(self.push(out, &[a], || Op::SumLast(a)))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = row_softmax(self.value(a), false)?;
        Ok(self.push(out, &[a], || Op::Softmax(a)))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let out = row_softmax(self.value(a), true)?;
        Ok(self.push(out, &[a], || Op::LogSoftmax(a)))
    }

    /// Scales every row (last axis) to unit L2 norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() == 0 {
            return Err(HexaError::contract("l2_normalize on a scalar"));
        }
        let d = t.row_len();
        let mut data = t.data().to_vec();
        let mut norms = Vec::with_capacity(t.rows());
        for row in data.chunks_mut(d.max(1)) {
            let n = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let out = Tensor::new(t.shape(), data)?;
        Ok(self.push(out, &[a], || Op::L2Normalize { x: a, norms }))
    }

    /// 2-D convolution of an `N×C×H×W` input with an `O×C×k×k` weight.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.ndim() != 4 || tw.ndim() != 4 || tx.shape()[1] != tw.shape()[1] || tw.shape()[2] != tw.shape()[3] {
            return Err(shape_err("conv2d", tx, tw));
        }
        if stride == 0 {
            return Err(HexaError::contract("conv2d stride must be positive"));
        }
        let geom = ConvGeometry {
            batch: tx.shape()[0],
            in_channels: tx.shape()[1],
            height: tx.shape()[2],
            width: tx.shape()[3],
            out_channels: tw.shape()[0],
            kernel: tw.shape()[2],
            stride,
            padding,
        };
        if geom.height + 2 * padding < geom.kernel || geom.width + 2 * padding < geom.kernel {
            return Err(shape_err("conv2d", tx, tw));
        }
        let (p, npos) = (geom.patch_len(), geom.positions());
        let mut cols = vec![0.0; p * npos];
        im2col(tx.data(), &geom, &mut cols);
        let o = geom.out_channels;
        let mut tmp = vec![0.0; o * npos];
        gemm(o, p, npos, tw.data(), false, &cols, false, &mut tmp, false);
        let spatial = geom.out_height() * geom.out_width();
        let mut out = vec![0.0; o * npos];
        for n in 0..geom.batch {
            for c in 0..o {
                out[(n * o + c) * spatial..][..spatial]
                    .copy_from_slice(&tmp[c * npos + n * spatial..][..spatial]);
            }
        }
        let out = Tensor::new(&[geom.batch, o, geom.out_height(), geom.out_width()], out)?;
        Ok(self.push(out, &[x, w], || Op::Conv2d { x, w, geom, cols }))
    }

    /// Adds a bias along the feature axis: the last axis of a matrix, or the
    /// channel axis of an `N×C×H×W` tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let channels = feature_axis(tx);
        if tb.numel() != channels {
            return Err(shape_err("add_bias", tx, tb));
        }
        let mut data = tx.data().to_vec();
        let inner = inner_len(tx);
        for (i, v) in data.iter_mut().enumerate() {
            *v += tb.data()[(i / inner) % channels];
        }
        let out = Tensor::new(tx.shape(), data)?;
        Ok(self.push(out, &[x, b], || Op::AddBias { x, b }))
    }

    /// Per-channel batch normalization for `N×C` or `N×C×H×W` inputs.
    ///
    /// With [`BnNormalization::Batch`] the returned moments are the batch's
    /// mean and unbiased variance, for the caller to fold into running stats.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        norm: BnNormalization<'_>,
        eps: f32,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let tx = self.value(x);
        if tx.ndim() != 2 && tx.ndim() != 4 {
            return Err(shape_err("batch_norm", tx, self.value(gamma)));
        }
        let channels = tx.shape()[1];
        for p in [gamma, beta] {
            if self.value(p).numel() != channels {
                return Err(shape_err("batch_norm", tx, self.value(p)));
            }
        }
        let inner = inner_len(tx);
        let batch = tx.shape()[0];
        let count = batch * inner;
        if count == 0 {
            return Err(HexaError::contract("batch_norm over empty batch"));
        }
        let data = tx.data();
        let (mean, var_biased, moments) = match norm {
            BnNormalization::Batch => {
                let mut mean = vec![0.0f64; channels];
                let mut sq = vec![0.0f64; channels];
                for n in 0..batch {
                    for c in 0..channels {
                        let chunk = &data[(n * channels + c) * inner..][..inner];
                        let (s, s2) = chunk
                            .iter()
                            .fold((0.0f64, 0.0f64), |(s, s2), &v| (s + v as f64, s2 + (v as f64) * (v as f64)));
                        mean[c] += s;
                        sq[c] += s2;
                    }
                }
                let m = count as f64;
                let mean_f: Vec<f32> = mean.iter().map(|s| (s / m) as f32).collect();
                let var_b: Vec<f32> = mean
                    .iter()
                    .zip(&sq)
                    .map(|(s, s2)| ((s2 / m) - (s / m) * (s / m)).max(0.0) as f32)
                    .collect();
                let unbiased = if count > 1 {
                    var_b.iter().map(|v| v * count as f32 / (count - 1) as f32).collect()
                } else {
                    var_b.clone()
                };
                let moments = BatchMoments {
                    mean: mean_f.clone(),
                    var: unbiased,
                };
                (mean_f, var_b, Some(moments))
            }
            BnNormalization::Running { mean, var } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(HexaError::contract("running statistics length mismatch"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f32> = var_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for (i, (&v, (xh, o))) in data.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let c = (i / inner) % channels;
            *xh = (v - mean[c]) * inv_std[c];
            *o = g[c] * *xh + bt[c];
        }
        let out = Tensor::new(tx.shape(), out)?;
        let batch_stats = moments.is_some();
        let var = self.push(out, &[x, gamma, beta], || Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        });
        Ok((var, moments))
    }

    /// Averages `N×C×H×W` over the spatial axes into `N×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.ndim() != 4 {
            return Err(HexaError::contract(format!(
                "global_avg_pool expects N×C×H×W, got {:?}",
                tx.shape()
            )));
        }
        let (n, c) = (tx.shape()[0], tx.shape()[1]);
        let spatial = tx.shape()[2] * tx.shape()[3];
        let data: Vec<f32> = tx
            .data()
            .chunks(spatial.max(1))
            .map(|s| s.iter().sum::<f32>() / spatial as f32)
            .collect();
        let out = Tensor::new(&[n, c], data)?;
        Ok(self.push(out, &[x], || Op::GlobalAvgPool(x)))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(HexaError::contract("concat of zero tensors"));
        };
        let rows = self.value(first).shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.ndim() != 2 || t.shape()[0] != rows {
                return Err(shape_err("concat_cols", self.value(first), t));
            }
            widths.push(t.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(&[rows, total], data)?;
        let parts = parts.to_vec();
        let inputs = parts.clone();
        Ok(self.push(out, &inputs, || Op::ConcatCols(parts)))
    }

    /// Picks `x[r, idx[r]]` from every row of a matrix.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 2 || t.shape()[0] != idx.len() {
            return Err(HexaError::Shape {
                op: "pick",
                lhs: t.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let cols = t.shape()[1];
        if let Some(&bad) = idx.iter().find(|&&j| j >= cols) {
            return Err(HexaError::contract(format!(
                "pick index {bad} out of range for {cols} columns"
            )));
        }
        let data = idx.iter().enumerate().map(|(r, &j)| t.data()[r * cols + j]).collect();
        let out = Tensor::new(&[idx.len()], data)?;
        let idx = idx.to_vec();
        Ok(self.push(out, &[x], || Op::Pick { x, idx }))
    }

    /// Selects rows of a matrix (or samples of a batch) by index.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() == 0 {
            return Err(HexaError::contract("gather_rows on a scalar"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.shape()[0]) {
            return Err(HexaError::contract(format!("gather index {bad} out of range")));
        }
        let out = t.select(idx);
        let idx = idx.to_vec();
        Ok(self.push(out, &[x], || Op::GatherRows { x, idx }))
    }

    fn check_loss(&self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(HexaError::contract(
                "tape was consumed by a previous backward pass",
            ));
        }
        let t = self.value(loss);
        if !t.is_scalar() {
            return Err(HexaError::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                t.shape()
            )));
        }
        Ok(())
    }

    /// Backpropagates from a scalar loss, populating the gradient of every
    /// `requires_grad` node reachable from it. The op records are released
    /// afterwards; use [`Tape::backward_retained`] to keep them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_retained(loss)?;
        for node in &mut self.nodes {
            node.op = Op::Leaf;
        }
        self.consumed = true;
        Ok(())
    }

    pub fn backward_retained(&mut self, loss: Var) -> Result<()> {
        self.check_loss(loss)?;
        let grads = self.compute_grads(loss);
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                if let Some(g) = g {
                    let shape = node.value.shape().to_vec();
                    node.grad = Some(Tensor::new(&shape, g)?);
                }
            }
        }
        Ok(())
    }

    /// Gradient of `loss` with respect to `input` without writing any node's
    /// stored gradient. A loss that does not depend on `input` yields zeros.
    pub fn input_gradient(&self, loss: Var, input: Var) -> Result<Tensor> {
        self.check_loss(loss)?;
        if input.0 >= self.nodes.len() || !self.nodes[input.0].requires_grad {
            return Err(HexaError::contract(
                "input_gradient: input is not tracked on the tape",
            ));
        }
        let mut grads = self.compute_grads(loss);
        let shape = self.value(input).shape().to_vec();
        match grads[input.0].take() {
            Some(g) => Tensor::new(&shape, g),
            None => Ok(Tensor::zeros(&shape)),
        }
    }

    fn compute_grads(&self, loss: Var) -> Vec<Option<Vec<f32>>> {
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return grads;
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads
    }

    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let len = |v: Var| self.nodes[v.0].value.numel();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0f32), (*b, sign)] {
                    if !rg(v) {
                        continue;
                    }
                    let n = len(v);
                    accumulate(&mut grads[v.0], n, |buf| {
                        if n == g.len() {
                            buf.iter_mut().zip(g).for_each(|(d, &gv)| *d += s * gv);
                        } else {
                            buf[0] += s * g.iter().sum::<f32>();
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if !rg(v) {
                        continue;
                    }
                    let n = len(v);
                    let o = val(other);
                    accumulate(&mut grads[v.0], n, |buf| {
                        if n == g.len() {
                            if o.len() == g.len() {
                                for ((d, &gv), &ov) in buf.iter_mut().zip(g).zip(o) {
                                    *d += gv * ov;
                                }
                            } else {
                                buf.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * o[0]);
                            }
                        } else {
                            buf[0] += g.iter().zip(o).map(|(gv, ov)| gv * ov).sum::<f32>();
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                accumulate(&mut grads[a.0], g.len(), |buf| {
                    buf.iter_mut().zip(g).for_each(|(d, &gv)| *d += c * gv)
                });
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                accumulate(&mut grads[a.0], g.len(), |buf| {
                    buf.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv)
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if rg(*a) {
                    accumulate(&mut grads[a.0], m * k, |buf| {
                        gemm(m, n, k, g, false, tb.data(), true, buf, true)
                    });
                }
                if rg(*b) {
                    accumulate(&mut grads[b.0], k * n, |buf| {
                        gemm(k, m, n, ta.data(), true, g, false, buf, true)
                    });
                }
            }
            Op::Transpose(a) => {
                let s = self.nodes[a.0].value.shape();
                let (r, c) = (s[0], s[1]);
                accumulate(&mut grads[a.0], r * c, |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Relu(a) => {
                accumulate(&mut grads[a.0], g.len(), |buf| {
                    for ((d, &gv), &y) in buf.iter_mut().zip(g).zip(out) {
                        if y > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Exp(a) => {
                accumulate(&mut grads[a.0], g.len(), |buf| {
                    for ((d, &gv), &y) in buf.iter_mut().zip(g).zip(out) {
                        *d += gv * y;
                    }
                });
            }
            Op::Log(a) => {
                let x = val(*a);
                accumulate(&mut grads[a.0], g.len(), |buf| {
                    for ((d, &gv), &xv) in buf.iter_mut().zip(g).zip(x) {
                        *d += gv / xv;
                    }
                });
            }
            Op::Sum(a) | Op::Mean(a) => {
                let n = len(*a);
                let scale = if matches!(node.op, Op::Mean(_)) { 1.0 / n as f32 } else { 1.0 };
                let gv = g[0] * scale;
                accumulate(&mut grads[a.0], n, |buf| buf.iter_mut().for_each(|d| *d += gv));
            }
            Op::SumLast(a) => {
                let n = len(*a);
                let d = self.nodes[a.0].value.row_len().max(1);
                accumulate(&mut grads[a.0], n, |buf| {
                    for (row, &gv) in buf.chunks_mut(d).zip(g) {
                        row.iter_mut().for_each(|v| *v += gv);
                    }
                });
            }
            Op::Softmax(a) => {
                let d = node.value.row_len().max(1);
                accumulate(&mut grads[a.0], g.len(), |buf| {
                    for ((bd, gr), yr) in buf.chunks_mut(d).zip(g.chunks(d)).zip(out.chunks(d)) {
                        let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((b, &gv), &y) in bd.iter_mut().zip(gr).zip(yr) {
                            *b += y * (gv - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let d = node.value.row_len().max(1);
                accumulate(&mut grads[a.0], g.len(), |buf| {
                    for ((bd, gr), yr) in buf.chunks_mut(d).zip(g.chunks(d)).zip(out.chunks(d)) {
                        let total: f32 = gr.iter().sum();
                        for ((b, &gv), &y) in bd.iter_mut().zip(gr).zip(yr) {
                            *b += gv - y.exp() * total;
                        }
                    }
                });
            }
            Op::L2Normalize { x, norms } => {
                let d = node.value.row_len().max(1);
                accumulate(&mut grads[x.0], g.len(), |buf| {
                    for (((bd, gr), yr), &n) in buf.chunks_mut(d).zip(g.chunks(d)).zip(out.chunks(d)).zip(norms) {
                        let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((b, &gv), &y) in bd.iter_mut().zip(gr).zip(yr) {
                            *b += (gv - y * dot) / n;
                        }
                    }
                });
            }
            Op::Conv2d { x, w, geom, cols } => {
                let (o, p, npos) = (geom.out_channels, geom.patch_len(), geom.positions());
                let spatial = geom.out_height() * geom.out_width();
                let mut gperm = vec![0.0; o * npos];
                for n in 0..geom.batch {
                    for c in 0..o {
                        gperm[c * npos + n * spatial..][..spatial]
                            .copy_from_slice(&g[(n * o + c) * spatial..][..spatial]);
                    }
                }
                if rg(*w) {
                    accumulate(&mut grads[w.0], o * p, |buf| {
                        gemm(o, npos, p, &gperm, false, cols, true, buf, true)
                    });
                }
                if rg(*x) {
                    let mut dcols = vec![0.0; p * npos];
                    gemm(p, o, npos, val(*w), true, &gperm, false, &mut dcols, false);
                    let n = len(*x);
                    accumulate(&mut grads[x.0], n, |buf| col2im(&dcols, geom, buf));
                }
            }
            Op::AddBias { x, b } => {
                let tx = &self.nodes[x.0].value;
                let channels = feature_axis(tx);
                let inner = inner_len(tx);
                if rg(*x) {
                    accumulate(&mut grads[x.0], g.len(), |buf| {
                        buf.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv)
                    });
                }
                if rg(*b) {
                    accumulate(&mut grads[b.0], channels, |buf| {
                        for (i, &gv) in g.iter().enumerate() {
                            buf[(i / inner) % channels] += gv;
                        }
                    });
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let tx = &self.nodes[x.0].value;
                let channels = tx.shape()[1];
                let inner = inner_len(tx);
                let batch = tx.shape()[0];
                let mut sum_g = vec![0.0f32; channels];
                let mut sum_gx = vec![0.0f32; channels];
                for n in 0..batch {
                    for c in 0..channels {
                        let off = (n * channels + c) * inner;
                        for k in off..off + inner {
                            sum_g[c] += g[k];
                            sum_gx[c] += g[k] * xhat[k];
                        }
                    }
                }
                if rg(*gamma) {
                    accumulate(&mut grads[gamma.0], channels, |buf| {
                        buf.iter_mut().zip(&sum_gx).for_each(|(d, s)| *d += s)
                    });
                }
                if rg(*beta) {
                    accumulate(&mut grads[beta.0], channels, |buf| {
                        buf.iter_mut().zip(&sum_g).for_each(|(d, s)| *d += s)
                    });
                }
                if rg(*x) {
                    let gam = val(*gamma);
                    let m = (batch * inner) as f32;
                    accumulate(&mut grads[x.0], g.len(), |buf| {
                        for (i, d) in buf.iter_mut().enumerate() {
                            let c = (i / inner) % channels;
                            let k = gam[c] * inv_std[c];
                            *d += if *batch_stats {
                                k * (g[i] - sum_g[c] / m - xhat[i] * sum_gx[c] / m)
                            } else {
                                k * g[i]
                            };
                        }
                    });
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.nodes[x.0].value.shape();
                let spatial = s[2] * s[3];
                let n = len(*x);
                accumulate(&mut grads[x.0], n, |buf| {
                    for (chunk, &gv) in buf.chunks_mut(spatial.max(1)).zip(g) {
                        let v = gv / spatial as f32;
                        chunk.iter_mut().for_each(|d| *d += v);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    if rg(p) {
                        accumulate(&mut grads[p.0], rows * w, |buf| {
                            for r in 0..rows {
                                for j in 0..w {
                                    buf[r * w + j] += g[r * total + offset + j];
                                }
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::Pick { x, idx } => {
                let cols = self.nodes[x.0].value.shape()[1];
                let n = len(*x);
                accumulate(&mut grads[x.0], n, |buf| {
                    for (r, (&j, &gv)) in idx.iter().zip(g).enumerate() {
                        buf[r * cols + j] += gv;
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let tx = &self.nodes[x.0].value;
                let per = tx.numel() / tx.shape()[0].max(1);
                accumulate(&mut grads[x.0], tx.numel(), |buf| {
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..per {
                            buf[src * per + j] += g[r * per + j];
                        }
                    }
                });
            }
        }
    }
}

/// Size of the channel/feature axis a bias or batch norm applies to.
fn feature_axis(t: &Tensor) -> usize {
    match t.ndim() {
        0 => 1,
        1 => t.shape()[0],
        2 => t.shape()[1],
        _ => t.shape()[1],
    }
}

/// Contiguous run length sharing one feature index.
fn inner_len(t: &Tensor) -> usize {
    if t.ndim() > 2 {
        t.shape()[2..].iter().product()
    } else {
        1
    }
}

fn row_softmax(t: &Tensor, log: bool) -> Result<Tensor> {
    if t.ndim() == 0 {
        return Err(HexaError::contract("softmax on a scalar"));
    }
    let d = t.row_len();
    let mut data = t.data().to_vec();
    if d == 0 {
        return Tensor::new(t.shape(), data);
    }
    for row in data.chunks_mut(d) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let total: f32 = row.iter().map(|v| (v - max).exp()).sum();
        if log {
            let lse = max + total.ln();
            row.iter_mut().for_each(|v| *v -= lse);
        } else {
            row.iter_mut().for_each(|v| *v = (*v - max).exp() / total);
        }
    }
    Tensor::new(t.shape(), data)
}
