use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::gemm::{gemm, MatRef};
use super::nn::{ParamId, ParamStore};
use super::{argmax, Tensor};
use crate::error::{Error, Result};
use crate::rng;
use rand::Rng;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How gradients cross a hard argmax selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionGrad {
    /// Backward pass of the soft mixture `sum_i softmax(w / tau)_i * v_i`.
    #[default]
    StraightThrough,
    /// Gradient reaches only the selected row; the weights get none.
    Subgradient,
}

impl SelectionGrad {
    pub fn name(self) -> &'static str {
        match self {
            SelectionGrad::StraightThrough => "straight-through",
            SelectionGrad::Subgradient => "subgradient",
        }
    }
}

impl std::fmt::Display for SelectionGrad {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SelectionGrad {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "straight-through" => Ok(SelectionGrad::StraightThrough),
            "subgradient" => Ok(SelectionGrad::Subgradient),
            _ => Err(Error::Config(format!("unknown selection gradient {s:?}"))),
        }
    }
}

/// Forward-pass mode shared by every op recorded on one graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mode {
    pub training: bool,
    pub seed: u64,
    pub step: u64,
}

impl Mode {
    pub fn eval() -> Self {
        Mode {
            training: false,
            seed: 0,
            step: 0,
        }
    }

    pub fn train(seed: u64, step: u64) -> Self {
        Mode {
            training: true,
            seed,
            step,
        }
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    AddBroadcast { a: Var, b: Var },
    Sum { a: Var },
    Mean { a: Var },
    Relu { a: Var },
    Softmax { a: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout { a: Var, mask: Vec<f64> },
    MeanAxis { a: Var, outer: usize, len: usize, inner: usize },
    Concat { inputs: Vec<Var>, widths: Vec<usize> },
    Stack { inputs: Vec<Var>, inner: usize },
    Reshape { a: Var },
    Take { a: Var, index: usize, count: usize, inner: usize },
    SelfAttention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    Bmm { a: Var, b: Var, trans_b: bool, batch: usize, m: usize, k: usize, n: usize },
    HeadFold { q: Var, w: Var, heads: usize },
    HeadUnfold { c: Var, w: Var, b: Var, heads: usize },
    HardSelect { values: Var, weights: Var, index: Vec<usize>, mode: SelectionGrad, tau: f64 },
    Cosine { a: Var, b: Var },
    WeightedSum { p: Var, v: Var },
    Mix { a: Var, b: Var, rho: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-use recording of differentiable computation.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    mode: Mode,
    consumed: bool,
    buffer_updates: Vec<(ParamId, Vec<f64>)>,
}

fn same_shape(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::dim(format!("{op}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn rank_is(op: &str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(Error::dim(format!(
            "{op}: expected rank {rank}, got shape {shape:?}"
        )));
    }
    Ok(())
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("op produced inconsistent shape")
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = 1.0 / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            mode,
            consumed: false,
            buffer_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        self.mode.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.grad().is_none());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input; never receives gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        let t = t.with_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives gradient when `t.requires_grad()` is set.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        let rg = t.requires_grad();
        t.set_grad(None);
        self.push(t, Op::Leaf, rg)
    }

    /// Records a parameter as a leaf. Repeated calls return the same handle.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id).clone().with_requires_grad(store.is_trainable(id));
        let v = self.leaf(t);
        self.params.insert(id, v);
        v
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&p, &v)| (p, v))
    }

    /// Running-statistic updates produced by train-mode batch norm.
    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Vec<f64>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub(crate) fn queue_buffer_update(&mut self, id: ParamId, values: Vec<f64>) {
        self.buffer_updates.push((id, values));
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        rank_is("matmul", sa, 2)?;
        rank_is("matmul", sb, 2)?;
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        if sb[0] != k {
            return Err(Error::dim(format!("matmul: inner dims {sa:?} x {sb:?}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            MatRef::row_major(self.data(a), k),
            MatRef::row_major(self.data(b), n),
            &mut out,
            n,
            1,
            false,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(tensor(vec![m, n], out), Op::MatMul { a, b }, rg))
    }

    /// `x @ w^T + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w);
        rank_is("linear weight", sw, 2)?;
        let (out_dim, in_dim) = (sw[0], sw[1]);
        if sx.last() != Some(&in_dim) {
            return Err(Error::dim(format!(
                "linear: input {sx:?} does not end in {in_dim}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return Err(Error::dim(format!(
                    "linear: bias {:?} != [{out_dim}]",
                    self.shape(b)
                )));
            }
        }
        let rows = self.value(x).numel() / in_dim.max(1);
        let mut out = vec![0.0; rows * out_dim];
        gemm(
            rows,
            in_dim,
            out_dim,
            1.0,
            MatRef::row_major(self.data(x), in_dim),
            MatRef::transposed(self.data(w), in_dim),
            &mut out,
            out_dim,
            1,
            false,
        );
        if let Some(b) = b {
            let bias = self.data(b);
            for row in out.chunks_mut(out_dim) {
                row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = out_dim;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(tensor(shape, out), Op::Linear { x, w, b }, rg))
    }

    fn zip_op(&mut self, name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(tensor(self.shape(a).to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_op("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.data(a).iter().map(|v| v * c).collect();
        let t = tensor(self.shape(a).to_vec(), data);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale { a, c }, rg)
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s, tiled over the prefix.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dim(format!("add_broadcast: {sb:?} is not a suffix of {sa:?}")));
        }
        let width = self.value(b).numel();
        let bd = self.data(b);
        let mut data = self.data(a).to_vec();
        if width > 0 {
            for chunk in data.chunks_mut(width) {
                chunk.iter_mut().zip(bd).for_each(|(x, y)| *x += y);
            }
        }
        let t = tensor(sa.to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::AddBroadcast { a, b }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::EmptyInput("mean of empty tensor".into()));
        }
        let s = self.data(a).iter().sum::<f64>() / n as f64;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Mean { a }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&v| v.max(0.0)).collect();
        let t = tensor(self.shape(a).to_vec(), data);
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu { a }, rg)
    }

    /// Softmax along the last axis, stabilised by max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::dim("softmax: scalar input has no axis"))?;
        if n == 0 {
            return Err(Error::dim("softmax: empty axis"));
        }
        let mut data = self.data(a).to_vec();
        data.chunks_mut(n).for_each(softmax_in_place);
        let rg = self.rg(&[a]);
        Ok(self.push(tensor(shape, data), Op::Softmax { a }, rg))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    /// `logits` is `[B, C]` or `[C]` (a batch of one).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        let (batch, classes) = match shape {
            [c] => (1, *c),
            [b, c] => (*b, *c),
            _ => return Err(Error::dim(format!("cross_entropy: logits {shape:?}"))),
        };
        if labels.len() != batch {
            return Err(Error::dim(format!(
                "cross_entropy: {} labels for batch {batch}",
                labels.len()
            )));
        }
        if batch == 0 || classes == 0 {
            return Err(Error::EmptyInput("cross_entropy: empty batch".into()));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label { label, classes });
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(classes).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            softmax_in_place(row);
        }
        loss /= batch as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::dim("layer_norm: scalar"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim("layer_norm: affine params must be [D]"));
        }
        let (g, b) = (self.data(gamma), self.data(beta));
        let rows = self.value(x).numel() / d.max(1);
        let mut xhat = self.data(x).to_vec();
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = vec![0.0; xhat.len()];
        for (row, orow) in xhat.chunks_mut(d).zip(out.chunks_mut(d)) {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mu) * is;
                orow[j] = g[j] * *v + b[j];
            }
            inv_std.push(is);
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            tensor(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Train-mode batch norm over axis 0 of `[B, D]`. Returns the output and
    /// the batch mean and biased variance per feature.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let shape = self.shape(x).to_vec();
        rank_is("batch_norm", &shape, 2)?;
        let (bsz, d) = (shape[0], shape[1]);
        if bsz < 2 {
            return Err(Error::Config(format!(
                "batch norm in training mode needs a batch of at least 2, got {bsz}"
            )));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim("batch_norm: affine params must be [D]"));
        }
        let xd = self.data(x);
        let mut mean = vec![0.0; d];
        for row in xd.chunks(d) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= bsz as f64);
        let mut var = vec![0.0; d];
        for row in xd.chunks(d) {
            for j in 0..d {
                let c = row[j] - mean[j];
                var[j] += c * c;
            }
        }
        var.iter_mut().for_each(|v| *v /= bsz as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for (i, &v) in xd.iter().enumerate() {
            let j = i % d;
            xhat[i] = (v - mean[j]) * inv_std[j];
            out[i] = g[j] * xhat[i] + b[j];
        }
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            tensor(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((v, mean, var))
    }

    /// Eval-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::dim("batch_norm: scalar"))?;
        if mean.len() != d || var.len() != d {
            return Err(Error::dim("batch_norm: running stats must be [D]"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.data(gamma), self.data(beta));
        let xd = self.data(x);
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for (i, &v) in xd.iter().enumerate() {
            let j = i % d;
            xhat[i] = (v - mean[j]) * inv_std[j];
            out[i] = g[j] * xhat[i] + b[j];
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            tensor(shape, out),
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout. Identity in eval mode or at rate 0. The mask is
    /// drawn from a stream keyed on `(seed, layer_id, step)`.
    pub fn dropout(&mut self, a: Var, rate: f64, layer_id: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
        }
        if !self.mode.training || rate == 0.0 {
            return Ok(a);
        }
        let mut rng = rng::keyed(&[rng::stream::DROPOUT, self.mode.seed, layer_id, self.mode.step]);
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(a).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = self.data(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = tensor(self.shape(a).to_vec(), data);
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Dropout { a, mask }, rg))
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("mean_axis: axis {axis} for {shape:?}")));
        }
        let len = shape[axis];
        if len == 0 {
            return Err(Error::EmptyInput("mean over empty axis".into()));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let base = (o * len + l) * inner;
                dst.iter_mut()
                    .zip(&src[base..base + inner])
                    .for_each(|(d, s)| *d += s);
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut new_shape = shape;
        new_shape.remove(axis);
        let rg = self.rg(&[a]);
        Ok(self.push(
            tensor(new_shape, out),
            Op::MeanAxis {
                a,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::EmptyInput("concat of nothing".into()))?;
        let lead = self.shape(*first);
        let lead = lead[..lead.len().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::dim(format!("concat: incompatible shape {s:?}")));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.data(v)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.rg(inputs);
        Ok(self.push(
            tensor(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                widths,
            },
            rg,
        ))
    }

    /// Stacks same-shape `[B, ...]` inputs into `[B, N, ...]`.
    pub fn stack(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::EmptyInput("stack of nothing".into()))?;
        let s0 = self.shape(*first).to_vec();
        if s0.is_empty() {
            return Err(Error::dim("stack: inputs need a batch axis"));
        }
        for &v in inputs {
            same_shape("stack", &s0, self.shape(v))?;
        }
        let batch = s0[0];
        let inner: usize = s0[1..].iter().product();
        let n = inputs.len();
        let mut out = vec![0.0; batch * n * inner];
        for (j, &v) in inputs.iter().enumerate() {
            let src = self.data(v);
            for b in 0..batch {
                out[(b * n + j) * inner..(b * n + j + 1) * inner]
                    .copy_from_slice(&src[b * inner..(b + 1) * inner]);
            }
        }
        let mut shape = vec![batch, n];
        shape.extend_from_slice(&s0[1..]);
        let rg = self.rg(inputs);
        Ok(self.push(
            tensor(shape, out),
            Op::Stack {
                inputs: inputs.to_vec(),
                inner,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    /// Slice `index` of axis 1: `[B, N, ...] -> [B, ...]`.
    pub fn take(&mut self, a: Var, index: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim(format!("take: rank of {shape:?} < 2")));
        }
        let count = shape[1];
        if index >= count {
            return Err(Error::OutOfRange { index, len: count });
        }
        let inner: usize = shape[2..].iter().product();
        let src = self.data(a);
        let mut out = Vec::with_capacity(shape[0] * inner);
        for b in 0..shape[0] {
            let base = (b * count + index) * inner;
            out.extend_from_slice(&src[base..base + inner]);
        }
        let mut new_shape = vec![shape[0]];
        new_shape.extend_from_slice(&shape[2..]);
        let rg = self.rg(&[a]);
        Ok(self.push(
            tensor(new_shape, out),
            Op::Take {
                a,
                index,
                count,
                inner,
            },
            rg,
        ))
    }

    /// Scaled dot-product self-attention over `[B, K, D]` projections with
    /// `heads` column blocks. Returns the concatenated head outputs `[B, K, D]`.
    pub fn self_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        rank_is("self_attention", &shape, 3)?;
        same_shape("self_attention", &shape, self.shape(k))?;
        same_shape("self_attention", &shape, self.shape(v))?;
        let (bsz, kk, d) = (shape[0], shape[1], shape[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("model dim {d} not divisible by {heads} heads")));
        }
        if kk == 0 {
            return Err(Error::EmptyInput("self_attention over zero tokens".into()));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![0.0; bsz * heads * kk * kk];
        let mut out = vec![0.0; bsz * kk * d];
        for b in 0..bsz {
            for h in 0..heads {
                let off = b * kk * d + h * dh;
                let p = &mut probs[(b * heads + h) * kk * kk..(b * heads + h + 1) * kk * kk];
                gemm(
                    kk,
                    dh,
                    kk,
                    scale,
                    MatRef::row_major(&qd[off..], d),
                    MatRef::transposed(&kd[off..], d),
                    p,
                    kk,
                    1,
                    false,
                );
                p.chunks_mut(kk).for_each(softmax_in_place);
                gemm(
                    kk,
                    kk,
                    dh,
                    1.0,
                    MatRef::row_major(p, kk),
                    MatRef::row_major(&vd[off..], d),
                    &mut out[off..],
                    d,
                    1,
                    false,
                );
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            tensor(shape, out),
            Op::SelfAttention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Batched product `[B, m, k] x [B, k, n]`, or `x [B, n, k]^T` when
    /// `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        rank_is("bmm", &sa, 3)?;
        rank_is("bmm", &sb, 3)?;
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if sb[0] != batch || kb != k {
            return Err(Error::dim(format!("bmm: {sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let bm = if trans_b {
                MatRef::transposed(&bd[i * k * n..], k)
            } else {
                MatRef::row_major(&bd[i * k * n..], n)
            };
            gemm(
                m,
                k,
                n,
                1.0,
                MatRef::row_major(&ad[i * m * k..], k),
                bm,
                &mut out[i * m * n..],
                n,
                1,
                false,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            tensor(vec![batch, m, n], out),
            Op::Bmm {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// Per-head key folding: `u[b, h, :] = q[b, head h]^T w[head h rows, :]`.
    /// `q` is `[B, D]`, `w` is `[D, D]`; output `[B, H, D]`.
    pub fn head_fold(&mut self, q: Var, w: Var, heads: usize) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        rank_is("head_fold", &sq, 2)?;
        let (bsz, d) = (sq[0], sq[1]);
        if self.shape(w) != [d, d] {
            return Err(Error::dim(format!("head_fold: weight {:?} != [{d}, {d}]", self.shape(w))));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("model dim {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let (qd, wd) = (self.data(q), self.data(w));
        let mut out = vec![0.0; bsz * heads * d];
        for b in 0..bsz {
            for h in 0..heads {
                gemm(
                    1,
                    dh,
                    d,
                    1.0,
                    MatRef::row_major(&qd[b * d + h * dh..], dh),
                    MatRef::row_major(&wd[h * dh * d..], d),
                    &mut out[(b * heads + h) * d..],
                    d,
                    1,
                    false,
                );
            }
        }
        let rg = self.rg(&[q, w]);
        Ok(self.push(tensor(vec![bsz, heads, d], out), Op::HeadFold { q, w, heads }, rg))
    }

    /// Per-head projection back to model width:
    /// `out[b, h*dh + r] = w[h*dh + r, :] . c[b, h, :] + bias[h*dh + r]`.
    pub fn head_unfold(&mut self, c: Var, w: Var, bias: Var, heads: usize) -> Result<Var> {
        let sc = self.shape(c).to_vec();
        rank_is("head_unfold", &sc, 3)?;
        let (bsz, d) = (sc[0], sc[2]);
        if sc[1] != heads || heads == 0 || d % heads != 0 {
            return Err(Error::dim(format!("head_unfold: {sc:?} with {heads} heads")));
        }
        if self.shape(w) != [d, d] || self.shape(bias) != [d] {
            return Err(Error::dim("head_unfold: weight must be [D, D], bias [D]"));
        }
        let dh = d / heads;
        let (cd, wd, bd) = (self.data(c), self.data(w), self.data(bias));
        let mut out = vec![0.0; bsz * d];
        for b in 0..bsz {
            for h in 0..heads {
                gemm(
                    1,
                    d,
                    dh,
                    1.0,
                    MatRef::row_major(&cd[(b * heads + h) * d..], d),
                    MatRef::transposed(&wd[h * dh * d..], d),
                    &mut out[b * d + h * dh..],
                    dh,
                    1,
                    false,
                );
            }
            out[b * d..(b + 1) * d]
                .iter_mut()
                .zip(bd)
                .for_each(|(o, b)| *o += b);
        }
        let rg = self.rg(&[c, w, bias]);
        Ok(self.push(
            tensor(vec![bsz, d], out),
            Op::HeadUnfold { c, w, b: bias, heads },
            rg,
        ))
    }

    /// Picks the row of `values` with the largest weight (ties go to the
    /// lowest index). `values` is `[B, K, D]` with `weights` `[B, K]`, or
    /// `[K, D]` with `[K]` for a single sample.
    pub fn hard_select(
        &mut self,
        values: Var,
        weights: Var,
        mode: SelectionGrad,
        tau: f64,
    ) -> Result<(Var, Vec<usize>)> {
        let sv = self.shape(values).to_vec();
        let sw = self.shape(weights).to_vec();
        let (bsz, k, d, out_shape) = match (sv.as_slice(), sw.as_slice()) {
            ([k, d], [kw]) if k == kw => (1, *k, *d, vec![*d]),
            ([b, k, d], [bw, kw]) if b == bw && k == kw => (*b, *k, *d, vec![*b, *d]),
            _ => {
                return Err(Error::dim(format!(
                    "hard_select: values {sv:?} vs weights {sw:?}"
                )))
            }
        };
        if k == 0 {
            return Err(Error::EmptyInput("hard_select over zero candidates".into()));
        }
        if !(tau > 0.0) {
            return Err(Error::Config(format!("selection temperature {tau} must be > 0")));
        }
        let wd = self.data(weights);
        if wd.iter().any(|w| w.is_nan()) {
            return Err(Error::Numeric("hard_select: NaN in weights".into()));
        }
        let index: Vec<usize> = wd
            .chunks(k)
            .map(|row| argmax(row).expect("non-empty NaN-free row"))
            .collect();
        let vd = self.data(values);
        let mut out = Vec::with_capacity(bsz * d);
        for (b, &i) in index.iter().enumerate() {
            out.extend_from_slice(&vd[(b * k + i) * d..(b * k + i + 1) * d]);
        }
        let rg = self.rg(&[values, weights]);
        let v = self.push(
            tensor(out_shape, out),
            Op::HardSelect {
                values,
                weights,
                index: index.clone(),
                mode,
                tau,
            },
            rg,
        );
        Ok((v, index))
    }

    /// Row-wise cosine similarity of two `[B, D]` tensors, giving `[B]`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        rank_is("cosine", &s, 2)?;
        same_shape("cosine", &s, self.shape(b))?;
        let d = s[1];
        let mut out = Vec::with_capacity(s[0]);
        for (ra, rb) in self.data(a).chunks(d).zip(self.data(b).chunks(d)) {
            let na = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = rb.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(Error::Numeric(
                    "cosine similarity of a zero-norm embedding is undefined".into(),
                ));
            }
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            out.push(dot / (na * nb));
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(tensor(vec![s[0]], out), Op::Cosine { a, b }, rg))
    }

    /// `out[b, :] = sum_n p[b, n] * v[b, n, :]`, accumulated in index order.
    pub fn weighted_sum(&mut self, p: Var, v: Var) -> Result<Var> {
        let (sp, sv) = (self.shape(p).to_vec(), self.shape(v).to_vec());
        rank_is("weighted_sum", &sp, 2)?;
        rank_is("weighted_sum", &sv, 3)?;
        if sp[..] != sv[..2] {
            return Err(Error::dim(format!("weighted_sum: {sp:?} vs {sv:?}")));
        }
        let (bsz, n, d) = (sv[0], sv[1], sv[2]);
        let (pd, vd) = (self.data(p), self.data(v));
        let mut out = vec![0.0; bsz * d];
        for b in 0..bsz {
            let dst = &mut out[b * d..(b + 1) * d];
            for j in 0..n {
                let w = pd[b * n + j];
                let src = &vd[(b * n + j) * d..(b * n + j + 1) * d];
                dst.iter_mut().zip(src).for_each(|(o, x)| *o += w * x);
            }
        }
        let rg = self.rg(&[p, v]);
        Ok(self.push(tensor(vec![bsz, d], out), Op::WeightedSum { p, v }, rg))
    }

    /// `sigmoid(rho) * a + (1 - sigmoid(rho)) * b` for a one-element `rho`.
    pub fn mix(&mut self, a: Var, b: Var, rho: Var) -> Result<Var> {
        same_shape("mix", self.shape(a), self.shape(b))?;
        if self.value(rho).numel() != 1 {
            return Err(Error::dim("mix: ratio parameter must hold one value"));
        }
        let alpha = sigmoid(self.data(rho)[0]);
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| alpha * x + (1.0 - alpha) * y)
            .collect();
        let t = tensor(self.shape(a).to_vec(), data);
        let rg = self.rg(&[a, b, rho]);
        Ok(self.push(t, Op::Mix { a, b, rho }, rg))
    }

    /// Reverse sweep from a scalar `loss`. Every recorded value that requires
    /// gradient ends up with its gradient attached; the graph is consumed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Graph(
                "backward already ran on this graph; record a new one".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad {
                node.value.set_grad(g);
            }
        }
        Ok(())
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, local: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&local).for_each(|(e, l)| *e += l),
                slot @ None => *slot = Some(local),
            }
        };
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, MatRef::row_major(g, n), MatRef::transposed(self.data(*b), n), &mut da, k, 1, false);
                    acc(grads, *a, da);
                }
                if rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, MatRef::transposed(self.data(*a), k), MatRef::row_major(g, n), &mut db, n, 1, false);
                    acc(grads, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (out_dim, in_dim) = (sw[0], sw[1]);
                let rows = g.len() / out_dim.max(1);
                if rg(*x) {
                    let mut dx = vec![0.0; rows * in_dim];
                    gemm(rows, out_dim, in_dim, 1.0, MatRef::row_major(g, out_dim), MatRef::row_major(self.data(*w), in_dim), &mut dx, in_dim, 1, false);
                    acc(grads, *x, dx);
                }
                if rg(*w) {
                    let mut dw = vec![0.0; out_dim * in_dim];
                    gemm(out_dim, rows, in_dim, 1.0, MatRef::transposed(g, out_dim), MatRef::row_major(self.data(*x), in_dim), &mut dw, in_dim, 1, false);
                    acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    if rg(*b) {
                        let mut db = vec![0.0; out_dim];
                        for row in g.chunks(out_dim) {
                            db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                        }
                        acc(grads, *b, db);
                    }
                }
            }
            Op::Add { a, b } => {
                acc(grads, *a, g.to_vec());
                acc(grads, *b, g.to_vec());
            }
            Op::Sub { a, b } => {
                acc(grads, *a, g.to_vec());
                acc(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if rg(*a) {
                    acc(grads, *a, g.iter().zip(bd).map(|(g, y)| g * y).collect());
                }
                if rg(*b) {
                    acc(grads, *b, g.iter().zip(ad).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale { a, c } => acc(grads, *a, g.iter().map(|v| v * c).collect()),
            Op::AddBroadcast { a, b } => {
                acc(grads, *a, g.to_vec());
                if rg(*b) {
                    let width = self.value(*b).numel();
                    let mut db = vec![0.0; width];
                    if width > 0 {
                        for chunk in g.chunks(width) {
                            db.iter_mut().zip(chunk).for_each(|(d, c)| *d += c);
                        }
                    }
                    acc(grads, *b, db);
                }
            }
            Op::Sum { a } => acc(grads, *a, vec![g[0]; self.value(*a).numel()]),
            Op::Mean { a } => {
                let n = self.value(*a).numel();
                acc(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::Relu { a } => {
                let x = self.data(*a);
                acc(grads, *a, g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::Softmax { a } => {
                let y = self.nodes[i].value.data();
                let n = *self.shape(*a).last().unwrap();
                let mut da = vec![0.0; y.len()];
                for ((dr, yr), gr) in da.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, *a, da);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let batch = labels.len();
                let classes = probs.len() / batch;
                let scale = g[0] / batch as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (b, &y) in labels.iter().enumerate() {
                    dl[b * classes + y] -= scale;
                }
                acc(grads, *logits, dl);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = self.value(*gamma).numel();
                let gm = self.data(*gamma);
                if rg(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gm[j];
                            s1 += dxh;
                            s2 += dxh * xr[j];
                        }
                        for j in 0..d {
                            let dxh = gr[j] * gm[j];
                            dx[r * d + j] = is / d as f64 * (d as f64 * dxh - s1 - xr[j] * s2);
                        }
                    }
                    acc(grads, *x, dx);
                }
                let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
                for (idx, (&gv, &xh)) in g.iter().zip(xhat).enumerate() {
                    dg[idx % d] += gv * xh;
                    db[idx % d] += gv;
                }
                acc(grads, *gamma, dg);
                acc(grads, *beta, db);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let d = inv_std.len();
                let bsz = g.len() / d;
                let gm = self.data(*gamma);
                let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
                for (idx, (&gv, &xh)) in g.iter().zip(xhat).enumerate() {
                    dg[idx % d] += gv * xh;
                    db[idx % d] += gv;
                }
                if rg(*x) {
                    // sum_b dxhat = gamma * db, sum_b dxhat * xhat = gamma * dg
                    let mut dx = vec![0.0; g.len()];
                    let n = bsz as f64;
                    for (idx, dv) in dx.iter_mut().enumerate() {
                        let j = idx % d;
                        let dxh = g[idx] * gm[j];
                        *dv = inv_std[j] / n * (n * dxh - gm[j] * db[j] - xhat[idx] * gm[j] * dg[j]);
                    }
                    acc(grads, *x, dx);
                }
                acc(grads, *gamma, dg);
                acc(grads, *beta, db);
            }
            Op::BatchNormEval { x, gamma, beta, xhat, inv_std } => {
                let d = inv_std.len();
                let gm = self.data(*gamma);
                if rg(*x) {
                    let dx = g.iter().enumerate().map(|(idx, gv)| gv * gm[idx % d] * inv_std[idx % d]).collect();
                    acc(grads, *x, dx);
                }
                let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
                for (idx, (&gv, &xh)) in g.iter().zip(xhat).enumerate() {
                    dg[idx % d] += gv * xh;
                    db[idx % d] += gv;
                }
                acc(grads, *gamma, dg);
                acc(grads, *beta, db);
            }
            Op::Dropout { a, mask } => acc(grads, *a, g.iter().zip(mask).map(|(g, m)| g * m).collect()),
            Op::MeanAxis { a, outer, len, inner } => {
                let inv = 1.0 / *len as f64;
                let mut da = vec![0.0; outer * len * inner];
                for o in 0..*outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for l in 0..*len {
                        let base = (o * len + l) * inner;
                        da[base..base + inner].iter_mut().zip(src).for_each(|(d, s)| *d = s * inv);
                    }
                }
                acc(grads, *a, da);
            }
            Op::Concat { inputs, widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                for (&v, &w) in inputs.iter().zip(widths) {
                    if rg(v) {
                        let mut dv = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dv.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        acc(grads, v, dv);
                    }
                    offset += w;
                }
            }
            Op::Stack { inputs, inner } => {
                let n = inputs.len();
                let batch = g.len() / (n * inner).max(1);
                for (j, &v) in inputs.iter().enumerate() {
                    if rg(v) {
                        let mut dv = Vec::with_capacity(batch * inner);
                        for b in 0..batch {
                            dv.extend_from_slice(&g[(b * n + j) * inner..(b * n + j + 1) * inner]);
                        }
                        acc(grads, v, dv);
                    }
                }
            }
            Op::Reshape { a } => acc(grads, *a, g.to_vec()),
            Op::Take { a, index, count, inner } => {
                let batch = g.len() / inner.max(&1);
                let mut da = vec![0.0; batch * count * inner];
                for b in 0..batch {
                    let base = (b * count + index) * inner;
                    da[base..base + inner].copy_from_slice(&g[b * inner..(b + 1) * inner]);
                }
                acc(grads, *a, da);
            }
            Op::SelfAttention { q, k, v, heads, probs } => {
                let shape = self.shape(*q);
                let (bsz, kk, d) = (shape[0], shape[1], shape[2]);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (self.data(*q), self.data(*k), self.data(*v));
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                let mut dp = vec![0.0; kk * kk];
                for b in 0..bsz {
                    for h in 0..*heads {
                        let off = b * kk * d + h * dh;
                        let p = &probs[(b * heads + h) * kk * kk..(b * heads + h + 1) * kk * kk];
                        gemm(kk, dh, kk, 1.0, MatRef::row_major(&g[off..], d), MatRef::transposed(&vd[off..], d), &mut dp, kk, 1, false);
                        gemm(kk, kk, dh, 1.0, MatRef::transposed(p, kk), MatRef::row_major(&g[off..], d), &mut dv[off..], d, 1, true);
                        for (dr, pr) in dp.chunks_mut(kk).zip(p.chunks(kk)) {
                            let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                            for j in 0..kk {
                                dr[j] = pr[j] * (dr[j] - dot) * scale;
                            }
                        }
                        gemm(kk, kk, dh, 1.0, MatRef::row_major(&dp, kk), MatRef::row_major(&kd[off..], d), &mut dq[off..], d, 1, true);
                        gemm(kk, kk, dh, 1.0, MatRef::transposed(&dp, kk), MatRef::row_major(&qd[off..], d), &mut dk[off..], d, 1, true);
                    }
                }
                acc(grads, *q, dq);
                acc(grads, *k, dk);
                acc(grads, *v, dv);
            }
            Op::Bmm { a, b, trans_b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (self.data(*a), self.data(*b));
                if rg(*a) {
                    let mut da = vec![0.0; batch * m * k];
                    for i in 0..*batch {
                        // B^T viewed as n x k
                        let bt = if *trans_b {
                            MatRef::row_major(&bd[i * k * n..], k)
                        } else {
                            MatRef::transposed(&bd[i * k * n..], n)
                        };
                        gemm(m, n, k, 1.0, MatRef::row_major(&g[i * m * n..], n), bt, &mut da[i * m * k..], k, 1, false);
                    }
                    acc(grads, *a, da);
                }
                if rg(*b) {
                    let mut db = vec![0.0; batch * k * n];
                    for i in 0..*batch {
                        let (rsc, csc) = if *trans_b { (1, k) } else { (n, 1) };
                        gemm(k, m, n, 1.0, MatRef::transposed(&ad[i * m * k..], k), MatRef::row_major(&g[i * m * n..], n), &mut db[i * k * n..], rsc, csc, false);
                    }
                    acc(grads, *b, db);
                }
            }
            Op::HeadFold { q, w, heads } => {
                let sq = self.shape(*q);
                let (bsz, d) = (sq[0], sq[1]);
                let dh = d / heads;
                let (qd, wd) = (self.data(*q), self.data(*w));
                if rg(*q) {
                    let mut dq = vec![0.0; bsz * d];
                    for b in 0..bsz {
                        for h in 0..*heads {
                            gemm(1, d, dh, 1.0, MatRef::row_major(&g[(b * heads + h) * d..], d), MatRef::transposed(&wd[h * dh * d..], d), &mut dq[b * d + h * dh..], dh, 1, false);
                        }
                    }
                    acc(grads, *q, dq);
                }
                if rg(*w) {
                    let mut dw = vec![0.0; d * d];
                    for h in 0..*heads {
                        // dW_h [dh, D] = sum_b q_bh^T g_bh: (dh x B) x (B x D)
                        let qh = MatRef { data: &qd[h * dh..], rs: 1, cs: d };
                        let gh = MatRef { data: &g[h * d..], rs: heads * d, cs: 1 };
                        gemm(dh, bsz, d, 1.0, qh, gh, &mut dw[h * dh * d..], d, 1, false);
                    }
                    acc(grads, *w, dw);
                }
            }
            Op::HeadUnfold { c, w, b, heads } => {
                let sc = self.shape(*c);
                let (bsz, d) = (sc[0], sc[2]);
                let dh = d / heads;
                let (cd, wd) = (self.data(*c), self.data(*w));
                if rg(*c) {
                    let mut dc = vec![0.0; bsz * heads * d];
                    for bi in 0..bsz {
                        for h in 0..*heads {
                            gemm(1, dh, d, 1.0, MatRef::row_major(&g[bi * d + h * dh..], dh), MatRef::row_major(&wd[h * dh * d..], d), &mut dc[(bi * heads + h) * d..], d, 1, false);
                        }
                    }
                    acc(grads, *c, dc);
                }
                if rg(*w) {
                    let mut dw = vec![0.0; d * d];
                    for h in 0..*heads {
                        // dW_h [dh, D] = sum_b g_bh^T c_bh: (dh x B) x (B x D)
                        let gh = MatRef { data: &g[h * dh..], rs: 1, cs: d };
                        let ch = MatRef { data: &cd[h * d..], rs: heads * d, cs: 1 };
                        gemm(dh, bsz, d, 1.0, gh, ch, &mut dw[h * dh * d..], d, 1, false);
                    }
                    acc(grads, *w, dw);
                }
                if rg(*b) {
                    let mut db = vec![0.0; d];
                    for row in g.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    acc(grads, *b, db);
                }
            }
            Op::HardSelect { values, weights, index, mode, tau } => {
                let k = *self.shape(*weights).last().unwrap();
                let d = g.len() / index.len();
                let vd = self.data(*values);
                let mut dvals = vec![0.0; vd.len()];
                match mode {
                    SelectionGrad::Subgradient => {
                        for (b, &i) in index.iter().enumerate() {
                            dvals[(b * k + i) * d..(b * k + i + 1) * d].copy_from_slice(&g[b * d..(b + 1) * d]);
                        }
                    }
                    SelectionGrad::StraightThrough => {
                        let wd = self.data(*weights);
                        let mut dw = vec![0.0; wd.len()];
                        for b in 0..index.len() {
                            let mut s: Vec<f64> = wd[b * k..(b + 1) * k].iter().map(|w| w / tau).collect();
                            softmax_in_place(&mut s);
                            let gb = &g[b * d..(b + 1) * d];
                            let mut ds = vec![0.0; k];
                            for j in 0..k {
                                let row = (b * k + j) * d;
                                ds[j] = vd[row..row + d].iter().zip(gb).map(|(v, g)| v * g).sum();
                                dvals[row..row + d].iter_mut().zip(gb).for_each(|(o, g)| *o = s[j] * g);
                            }
                            let dot: f64 = s.iter().zip(&ds).map(|(s, d)| s * d).sum();
                            for j in 0..k {
                                dw[b * k + j] = s[j] * (ds[j] - dot) / tau;
                            }
                        }
                        acc(grads, *weights, dw);
                    }
                }
                acc(grads, *values, dvals);
            }
            Op::Cosine { a, b } => {
                let d = self.shape(*a)[1];
                let (ad, bd) = (self.data(*a), self.data(*b));
                let mut da = vec![0.0; ad.len()];
                let mut db = vec![0.0; bd.len()];
                for (r, &gr) in g.iter().enumerate() {
                    let (ra, rb) = (&ad[r * d..(r + 1) * d], &bd[r * d..(r + 1) * d]);
                    let na2: f64 = ra.iter().map(|v| v * v).sum();
                    let nb2: f64 = rb.iter().map(|v| v * v).sum();
                    let (na, nb) = (na2.sqrt(), nb2.sqrt());
                    let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                    let c = dot / (na * nb);
                    for j in 0..d {
                        da[r * d + j] = gr * (rb[j] / (na * nb) - c * ra[j] / na2);
                        db[r * d + j] = gr * (ra[j] / (na * nb) - c * rb[j] / nb2);
                    }
                }
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::WeightedSum { p, v } => {
                let sv = self.shape(*v);
                let (bsz, n, d) = (sv[0], sv[1], sv[2]);
                let (pd, vd) = (self.data(*p), self.data(*v));
                if rg(*p) {
                    let mut dp = vec![0.0; bsz * n];
                    for b in 0..bsz {
                        for j in 0..n {
                            let row = (b * n + j) * d;
                            dp[b * n + j] = vd[row..row + d].iter().zip(&g[b * d..(b + 1) * d]).map(|(x, y)| x * y).sum();
                        }
                    }
                    acc(grads, *p, dp);
                }
                if rg(*v) {
                    let mut dv = vec![0.0; vd.len()];
                    for b in 0..bsz {
                        for j in 0..n {
                            let w = pd[b * n + j];
                            let row = (b * n + j) * d;
                            dv[row..row + d].iter_mut().zip(&g[b * d..(b + 1) * d]).for_each(|(o, g)| *o = w * g);
                        }
                    }
                    acc(grads, *v, dv);
                }
            }
            Op::Mix { a, b, rho } => {
                let alpha = sigmoid(self.data(*rho)[0]);
                acc(grads, *a, g.iter().map(|v| alpha * v).collect());
                acc(grads, *b, g.iter().map(|v| (1.0 - alpha) * v).collect());
                if rg(*rho) {
                    let (ad, bd) = (self.data(*a), self.data(*b));
                    let s: f64 = g.iter().zip(ad.iter().zip(bd)).map(|(g, (x, y))| g * (x - y)).sum();
                    let shape_len = self.value(*rho).numel();
                    acc(grads, *rho, vec![s * alpha * (1.0 - alpha); shape_len]);
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
