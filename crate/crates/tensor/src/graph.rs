//! Define-by-run computation record with reverse-mode differentiation.
//!
//! Every primitive appends one node holding its value; a node's inputs
//! always have smaller indices, so reverse index order is a valid
//! topological order for the backward sweep.

use crate::error::{invalid, mismatch, Result, TensorError};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f32),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<f32>,
        probs: Vec<f32>,
    },
    Sum(Var),
    Mean(Var),
    Clip {
        input: Var,
        lo: f32,
        hi: f32,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    GatherRows {
        src: Var,
        indices: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that is held fixed.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |p, q| p + q)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |p, q| p - q)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |p, q| p * q)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("div", a, b, |p, q| p / q)?;
        Ok(self.push(t, Op::Div(a, b), &[a, b]))
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        let t = self.value(a).map(|v| v + s);
        self.push(t, Op::AddScalar(a), &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, s: f32) -> Var {
        let t = self.value(a).map(|v| v * s);
        self.push(t, Op::MulScalar(a, s), &[a])
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, 1.0, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds a length-`F` bias to every row of an `[N, F]` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(mismatch("add_row_bias", sx, sb));
        }
        let f = sx[1];
        let b = self.value(bias).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(f) {
            row.iter_mut().zip(&b).for_each(|(v, bv)| *v += bv);
        }
        Ok(self.push(t, Op::AddRowBias(x, bias), &[x, bias]))
    }

    /// 2-D convolution of `[N, C, H, W]` by `[O, C, KH, KW]` with optional
    /// per-output-channel bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if si.len() != 4 || sw.len() != 4 {
            return Err(mismatch("conv2d", &si, &sw));
        }
        let geom = ConvGeometry::new([si[1], si[2], si[3]], [sw[0], sw[1], sw[2], sw[3]], stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(mismatch("conv2d bias", self.shape(b), &[sw[0]]));
            }
        }
        let batch = si[0];
        let mut out = vec![0.0; batch * geom.out_len()];
        kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &mut out,
        );
        let t = Tensor::new(vec![batch, geom.out_c, geom.out_h, geom.out_w], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(t, Op::Conv2d { input, weight, bias, geom }, &inputs))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v.max(0.0));
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f32::tanh);
        self.push(t, Op::Tanh(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let k = *x.shape().last().ok_or_else(|| invalid("softmax", "scalar input"))?;
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(k.max(1)) {
            softmax_in_place(row);
        }
        let t = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Softmax(a), &[a]))
    }

    /// Mean cross-entropy of `[N, K]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(mismatch("cross_entropy", s, &[labels.len()]));
        }
        let k = s[1];
        let mut targets = vec![0.0; labels.len() * k];
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(invalid("cross_entropy", format!("label {y} outside 0..{k}")));
            }
            targets[i * k + y] = 1.0;
        }
        self.soft_cross_entropy(logits, targets)
    }

    /// Mean cross-entropy against per-row target distributions.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Vec<f32>) -> Result<Var> {
        let x = self.value(logits);
        let s = x.shape();
        if s.len() != 2 || targets.len() != x.numel() {
            return Err(mismatch("soft_cross_entropy", s, &[targets.len()]));
        }
        let (n, k) = (s[0], s[1]);
        let mut probs = x.data().to_vec();
        let mut loss = 0.0f64;
        for (row, t) in probs.chunks_mut(k).zip(targets.chunks(k)) {
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
            for (v, &tv) in row.iter_mut().zip(t) {
                let logp = *v - lse;
                loss -= (tv * logp) as f64;
                *v = logp.exp();
            }
        }
        let t = Tensor::scalar((loss / n.max(1) as f64) as f32);
        Ok(self.push(t, Op::CrossEntropy { logits, targets, probs }, &[logits]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f32 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().sum::<f32>() / x.numel().max(1) as f32;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Elementwise projection onto `[lo, hi]`.
    pub fn clip(&mut self, a: Var, lo: f32, hi: f32) -> Var {
        let t = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(t, Op::Clip { input: a, lo, hi }, &[a])
    }

    /// Non-overlapping `k x k` max pooling over `[N, C, H, W]`.
    pub fn max_pool2d(&mut self, a: Var, k: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || k == 0 || s[2] < k || s[3] < k {
            return Err(invalid("max_pool2d", format!("cannot pool {s:?} with window {k}")));
        }
        let (oh, ow) = (s[2] / k, s[3] / k);
        let mut out = vec![0.0; s[0] * s[1] * oh * ow];
        let argmax = kernels::max_pool2d_forward(self.value(a).data(), s[0] * s[1], s[2], s[3], k, &mut out);
        let t = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        Ok(self.push(t, Op::MaxPool2d { input: a, argmax }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Flattens everything after the leading axis.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let n = s.first().copied().unwrap_or(1);
        let rest = self.value(a).row_len();
        self.reshape(a, &[n, rest])
    }

    /// Stacks the leading-axis slices of `src` picked by `indices`.
    pub fn gather_rows(&mut self, src: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(src);
        let rows = x.shape().first().copied().unwrap_or(0);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(invalid("gather_rows", format!("index {bad} outside 0..{rows}")));
        }
        let t = x.select_rows(indices);
        Ok(self.push(t, Op::GatherRows { src, indices: indices.to_vec() }, &[src]))
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat_rows", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(mismatch("concat_rows", self.shape(*first), s));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Back-propagates from a scalar `loss`, accumulating into the `grad`
    /// buffer of every reachable leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let y = nodes[i].value.data();
        let val = |v: Var| nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            if nodes[v.0].requires_grad {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
                f(buf);
            }
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                acc(*a, &mut |ga| zip3(ga, g, xb, |gv, bv| gv * bv));
                acc(*b, &mut |gb| zip3(gb, g, xa, |gv, av| gv * av));
            }
            Op::Div(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                acc(*a, &mut |ga| zip3(ga, g, xb, |gv, bv| gv / bv));
                acc(*b, &mut |gb| {
                    for ((d, &gv), (&av, &bv)) in gb.iter_mut().zip(g).zip(xa.iter().zip(xb)) {
                        *d -= gv * av / (bv * bv);
                    }
                });
            }
            Op::AddScalar(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::MulScalar(a, s) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(d, v)| *d += v * s)),
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (xa, xb) = (val(*a), val(*b));
                acc(*a, &mut |ga| kernels::gemm(m, n, k, 1.0, g, false, xb, true, 1.0, ga));
                acc(*b, &mut |gb| kernels::gemm(k, m, n, 1.0, xa, true, g, false, 1.0, gb));
            }
            Op::AddRowBias(x, bias) => {
                let f = nodes[bias.0].value.numel();
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*bias, &mut |gb| {
                    for row in g.chunks(f) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Conv2d { input, weight, bias, geom } => {
                let batch = nodes[input.0].value.shape()[0];
                acc(*input, &mut |gi| kernels::conv2d_backward_input(geom, g, val(*weight), gi));
                let want_w = nodes[weight.0].requires_grad;
                let want_b = bias.is_some_and(|b| nodes[b.0].requires_grad);
                if want_w || want_b {
                    let mut gw = grads[weight.0]
                        .take()
                        .unwrap_or_else(|| vec![0.0; geom.weight_len()]);
                    let mut gb = bias.map(|b| grads[b.0].take().unwrap_or_else(|| vec![0.0; geom.out_c]));
                    kernels::conv2d_backward_params(geom, val(*input), g, batch, &mut gw, gb.as_deref_mut());
                    if want_w {
                        grads[weight.0] = Some(gw);
                    }
                    if let (Some(b), Some(gb)) = (bias, gb) {
                        if want_b {
                            grads[b.0] = Some(gb);
                        }
                    }
                }
            }
            Op::Relu(a) => acc(*a, &mut |ga| zip3(ga, g, y, |gv, yv| if yv > 0.0 { gv } else { 0.0 })),
            Op::Tanh(a) => acc(*a, &mut |ga| zip3(ga, g, y, |gv, yv| gv * (1.0 - yv * yv))),
            Op::Softmax(a) => {
                let k = *nodes[i].value.shape().last().unwrap_or(&1);
                acc(*a, &mut |ga| {
                    for ((d, gr), yr) in ga.chunks_mut(k).zip(g.chunks(k)).zip(y.chunks(k)) {
                        let dot: f32 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for ((dv, gv), yv) in d.iter_mut().zip(gr).zip(yr) {
                            *dv += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let s = nodes[logits.0].value.shape();
                let (n, k) = (s[0], s[1]);
                let scale = g[0] / n.max(1) as f32;
                acc(*logits, &mut |gl| {
                    for ((d, p), t) in gl.chunks_mut(k).zip(probs.chunks(k)).zip(targets.chunks(k)) {
                        let mass: f32 = t.iter().sum();
                        for ((dv, pv), tv) in d.iter_mut().zip(p).zip(t) {
                            *dv += scale * (pv * mass - tv);
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].value.numel().max(1) as f32;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Clip { input, lo, hi } => {
                let x = val(*input);
                acc(*input, &mut |ga| {
                    zip3(ga, g, x, |gv, xv| if xv >= *lo && xv <= *hi { gv } else { 0.0 })
                });
            }
            Op::MaxPool2d { input, argmax } => acc(*input, &mut |ga| {
                for (&src, &gv) in argmax.iter().zip(g) {
                    ga[src] += gv;
                }
            }),
            Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::GatherRows { src, indices } => {
                let r = nodes[i].value.row_len();
                acc(*src, &mut |gs| {
                    for (j, &row) in indices.iter().enumerate() {
                        add_into(&mut gs[row * r..(row + 1) * r], &g[j * r..(j + 1) * r]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    acc(p, &mut |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn zip3(dst: &mut [f32], g: &[f32], other: &[f32], f: impl Fn(f32, f32) -> f32) {
    for ((d, &gv), &o) in dst.iter_mut().zip(g).zip(other) {
        *d += f(gv, o);
    }
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
