//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op as it is evaluated. [`Graph::backward`] then
//! walks the tape in reverse and returns a [`Gradients`] table holding the
//! adjoint of every tracked node.

use super::kernels::{self, ConvShape, Dims3};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv { x: Var, w: Var, b: Var, k: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<f64>, rstd: Vec<f64> },
    Silu(Var),
    Add(Var, Var),
    AddChannel { x: Var, v: Var },
    Linear { x: Var, w: Var, b: Var },
    Concat(Var, Var),
    Slice { x: Var, start: usize },
    AvgPool2(Var),
    Upsample2(Var),
    Attention { q: Var, k: Var, v: Var, probs: Vec<f64> },
    Scale(Var, f64),
    WeightedSse { x: Var, target: Vec<f64>, weights: Vec<f64> },
    Dot { x: Var, coeffs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`; zeros if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(self.shapes[v.0].clone(), g.clone()),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => Tensor::from_parts(self.shapes[v.0].clone(), g),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn dims_of(shape: &[usize]) -> Result<Dims3> {
    if shape.len() != 5 {
        return Err(Error::shape(format!("expected N×C×D×H×W, got {shape:?}")));
    }
    Ok(Dims3 {
        d: shape[2],
        h: shape[3],
        w: shape[4],
    })
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
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

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn any_tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Leaf whose gradient is recorded.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// 3D cross-correlation, stride 1, zero padding `k/2`.
    /// `x`: N×C×D×H×W, `w`: Cout×C×k×k×k, `b`: Cout.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let dims = dims_of(&xs)?;
        if ws.len() != 5 || ws[1] != xs[1] || ws[2] != ws[3] || ws[3] != ws[4] || ws[2] % 2 == 0 {
            return Err(Error::shape(format!("conv weight {ws:?} incompatible with input {xs:?}")));
        }
        if self.shape(b) != [ws[0]] {
            return Err(Error::shape(format!("conv bias {:?} should be [{}]", self.shape(b), ws[0])));
        }
        let cs = ConvShape {
            n: xs[0],
            cin: xs[1],
            cout: ws[0],
            k: ws[2],
            dims,
        };
        let out = kernels::conv3d_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), &cs);
        let tracked = self.any_tracked(&[x, w, b]);
        Ok(self.push(
            Tensor::from_parts(vec![xs[0], ws[0], dims.d, dims.h, dims.w], out),
            Op::Conv { x, w, b, k: ws[2] },
            tracked,
        ))
    }

    /// Group normalization over `(channel group, spatial)` with affine
    /// `gamma`, `beta` of length C.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 {
            return Err(Error::shape(format!("group_norm needs N×C×..., got {xs:?}")));
        }
        let c = xs[1];
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(format!("{c} channels not divisible into {groups} groups")));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("group_norm affine params must have one entry per channel"));
        }
        let s = self.value(x).spatial();
        let (y, mean, rstd) =
            kernels::groupnorm_forward(self.value(x).data(), self.value(gamma).data(), self.value(beta).data(), xs[0], c, s, groups);
        let tracked = self.any_tracked(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(xs, y),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            },
            tracked,
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out: Vec<f64> = v.data().iter().map(|&a| a * sigmoid(a)).collect();
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        let tracked = self.any_tracked(&[x]);
        self.push(t, Op::Silu(x), tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("add: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_parts(self.shape(a).to_vec(), out);
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), tracked))
    }

    /// Adds an `N×C` tensor to every spatial position of an `N×C×...` tensor.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 || self.shape(v) != [xs[0], xs[1]] {
            return Err(Error::shape(format!("add_channel: {xs:?} vs {:?}", self.shape(v))));
        }
        let s = self.value(x).spatial();
        let mut out = self.value(x).data().to_vec();
        for (blk, &a) in out.chunks_mut(s).zip(self.value(v).data()) {
            blk.iter_mut().for_each(|o| *o += a);
        }
        let tracked = self.any_tracked(&[x, v]);
        Ok(self.push(Tensor::from_parts(xs, out), Op::AddChannel { x, v }, tracked))
    }

    /// Dense layer: `x`: N×In, `w`: Out×In, `b`: Out.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || self.shape(b) != [ws[0]] {
            return Err(Error::shape(format!("linear: x {xs:?}, w {ws:?}, b {:?}", self.shape(b))));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; n * fout];
        for i in 0..n {
            for o in 0..fout {
                out[i * fout + o] = bd[o] + kernels::dot(&xd[i * fin..(i + 1) * fin], &wd[o * fin..(o + 1) * fin]);
            }
        }
        let tracked = self.any_tracked(&[x, w, b]);
        Ok(self.push(Tensor::from_parts(vec![n, fout], out), Op::Linear { x, w, b }, tracked))
    }

    /// Channel-axis concatenation of two `N×C×...` tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape(format!("concat: {sa:?} vs {sb:?}")));
        }
        let s: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1] * s, sb[1] * s);
        let mut out = Vec::with_capacity(sa[0] * (ca + cb));
        for n in 0..sa[0] {
            out.extend_from_slice(&self.value(a).data()[n * ca..(n + 1) * ca]);
            out.extend_from_slice(&self.value(b).data()[n * cb..(n + 1) * cb]);
        }
        let mut shape = sa;
        shape[1] += sb[1];
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat(a, b), tracked))
    }

    /// Channels `start..start+len` of an `N×C×...` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || len == 0 || start + len > xs[1] {
            return Err(Error::shape(format!("slice {start}..{} out of {xs:?}", start + len)));
        }
        let s: usize = xs[2..].iter().product();
        let mut out = Vec::with_capacity(xs[0] * len * s);
        for n in 0..xs[0] {
            let base = (n * xs[1] + start) * s;
            out.extend_from_slice(&self.value(x).data()[base..base + len * s]);
        }
        let mut shape = xs;
        shape[1] = len;
        let tracked = self.any_tracked(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Slice { x, start }, tracked))
    }

    /// 2× average pooling over each spatial axis.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let dims = dims_of(&xs)?;
        if dims.d % 2 != 0 || dims.h % 2 != 0 || dims.w % 2 != 0 {
            return Err(Error::shape(format!("avg_pool2 needs even spatial dims, got {xs:?}")));
        }
        let out = kernels::avgpool2_forward(self.value(x).data(), xs[0] * xs[1], dims);
        let tracked = self.any_tracked(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![xs[0], xs[1], dims.d / 2, dims.h / 2, dims.w / 2], out),
            Op::AvgPool2(x),
            tracked,
        ))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let dims = dims_of(&xs)?;
        let out = kernels::upsample2_forward(self.value(x).data(), xs[0] * xs[1], dims);
        let tracked = self.any_tracked(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![xs[0], xs[1], dims.d * 2, dims.h * 2, dims.w * 2], out),
            Op::Upsample2(x),
            tracked,
        ))
    }

    /// Single-head softmax attention across spatial positions; `q`, `k`, `v`
    /// share one `N×C×...` shape.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        if qs.len() < 3 || self.shape(k) != qs.as_slice() || self.shape(v) != qs.as_slice() {
            return Err(Error::shape("attention: q, k, v shapes differ"));
        }
        let s = self.value(q).spatial();
        let (out, probs) =
            kernels::attention_forward(self.value(q).data(), self.value(k).data(), self.value(v).data(), qs[0], qs[1], s);
        let tracked = self.any_tracked(&[q, k, v]);
        Ok(self.push(Tensor::from_parts(qs, out), Op::Attention { q, k, v, probs }, tracked))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x);
        let t = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|a| a * s).collect());
        let tracked = self.any_tracked(&[x]);
        self.push(t, Op::Scale(x, s), tracked)
    }

    /// `Σ w_j (x_j − target_j)²` as a scalar node.
    pub fn weighted_sse(&mut self, x: Var, target: &[f64], weights: &[f64]) -> Result<Var> {
        let n = self.value(x).numel();
        if target.len() != n || weights.len() != n {
            return Err(Error::shape(format!(
                "weighted_sse: {n} values, {} targets, {} weights",
                target.len(),
                weights.len()
            )));
        }
        let loss: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(target)
            .zip(weights)
            .map(|((a, t), w)| w * (a - t) * (a - t))
            .sum();
        let tracked = self.any_tracked(&[x]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedSse {
                x,
                target: target.to_vec(),
                weights: weights.to_vec(),
            },
            tracked,
        ))
    }

    /// `Σ c_j x_j` as a scalar node. Backpropagating it yields the
    /// vector-Jacobian product with `c`.
    pub fn dot_const(&mut self, x: Var, coeffs: &[f64]) -> Result<Var> {
        if coeffs.len() != self.value(x).numel() {
            return Err(Error::shape("dot_const: coefficient count differs from tensor size"));
        }
        let s = kernels::dot(self.value(x).data(), coeffs);
        let tracked = self.any_tracked(&[x]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Dot {
                x,
                coeffs: coeffs.to_vec(),
            },
            tracked,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!("backward needs a scalar loss, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(dy);
                }
                Op::Conv { x, w, b, k } => {
                    let xs = self.shape(*x);
                    let cs = ConvShape {
                        n: xs[0],
                        cin: xs[1],
                        cout: self.shape(*w)[0],
                        k: *k,
                        dims: dims_of(xs)?,
                    };
                    let want_dx = self.is_tracked(*x);
                    let (dx, dw, db) = kernels::conv3d_backward(self.value(*x).data(), self.value(*w).data(), &dy, &cs, want_dx);
                    if let Some(dx) = dx {
                        self.accumulate(&mut grads, *x, dx);
                    }
                    self.accumulate(&mut grads, *w, dw);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    mean,
                    rstd,
                } => {
                    let xv = self.value(*x);
                    let (dx, dg, db) = kernels::groupnorm_backward(
                        xv.data(),
                        self.value(*gamma).data(),
                        &dy,
                        mean,
                        rstd,
                        xv.shape()[0],
                        xv.shape()[1],
                        xv.spatial(),
                        *groups,
                    );
                    self.accumulate(&mut grads, *x, dx);
                    self.accumulate(&mut grads, *gamma, dg);
                    self.accumulate(&mut grads, *beta, db);
                }
                Op::Silu(x) => {
                    let dx = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(&dy)
                        .map(|(&a, &g)| {
                            let s = sigmoid(a);
                            g * s * (1.0 + a * (1.0 - s))
                        })
                        .collect();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, dy.clone());
                    self.accumulate(&mut grads, *b, dy);
                }
                Op::AddChannel { x, v } => {
                    let s = self.value(*x).spatial();
                    let dv = dy.chunks(s).map(|blk| blk.iter().sum()).collect();
                    self.accumulate(&mut grads, *v, dv);
                    self.accumulate(&mut grads, *x, dy);
                }
                Op::Linear { x, w, b } => {
                    let xs = self.shape(*x);
                    let (n, fin) = (xs[0], xs[1]);
                    let fout = self.shape(*w)[0];
                    let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                    let mut dx = vec![0.0; n * fin];
                    let mut dw = vec![0.0; fout * fin];
                    let mut db = vec![0.0; fout];
                    for i in 0..n {
                        for o in 0..fout {
                            let g = dy[i * fout + o];
                            db[o] += g;
                            kernels::axpy(&mut dx[i * fin..(i + 1) * fin], g, &wd[o * fin..(o + 1) * fin]);
                            kernels::axpy(&mut dw[o * fin..(o + 1) * fin], g, &xd[i * fin..(i + 1) * fin]);
                        }
                    }
                    self.accumulate(&mut grads, *x, dx);
                    self.accumulate(&mut grads, *w, dw);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::Concat(a, b) => {
                    let sa = self.shape(*a);
                    let s: usize = sa[2..].iter().product();
                    let ca = sa[1] * s;
                    let cb = self.shape(*b)[1] * s;
                    let mut da = Vec::with_capacity(sa[0] * ca);
                    let mut db = Vec::with_capacity(sa[0] * cb);
                    for blk in dy.chunks(ca + cb) {
                        da.extend_from_slice(&blk[..ca]);
                        db.extend_from_slice(&blk[ca..]);
                    }
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::Slice { x, start } => {
                    let xs = self.shape(*x);
                    let s: usize = xs[2..].iter().product();
                    let len = node.value.shape()[1];
                    let mut dx = vec![0.0; self.value(*x).numel()];
                    for n in 0..xs[0] {
                        let base = (n * xs[1] + start) * s;
                        dx[base..base + len * s].copy_from_slice(&dy[n * len * s..(n + 1) * len * s]);
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::AvgPool2(x) => {
                    let xs = self.shape(*x);
                    let dx = kernels::avgpool2_backward(&dy, xs[0] * xs[1], dims_of(xs)?);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Upsample2(x) => {
                    let xs = self.shape(*x);
                    let dx = kernels::upsample2_backward(&dy, xs[0] * xs[1], dims_of(xs)?);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Attention { q, k, v, probs } => {
                    let qv = self.value(*q);
                    let (dq, dk, dv) = kernels::attention_backward(
                        qv.data(),
                        self.value(*k).data(),
                        self.value(*v).data(),
                        probs,
                        &dy,
                        qv.shape()[0],
                        qv.shape()[1],
                        qv.spatial(),
                    );
                    self.accumulate(&mut grads, *q, dq);
                    self.accumulate(&mut grads, *k, dk);
                    self.accumulate(&mut grads, *v, dv);
                }
                Op::Scale(x, s) => {
                    let dx = dy.iter().map(|g| g * s).collect();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::WeightedSse { x, target, weights } => {
                    let g = dy[0];
                    let dx = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(target)
                        .zip(weights)
                        .map(|((a, t), w)| 2.0 * g * w * (a - t))
                        .collect();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Dot { x, coeffs } => {
                    let g = dy[0];
                    let dx = coeffs.iter().map(|c| g * c).collect();
                    self.accumulate(&mut grads, *x, dx);
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // Only leaves keep their adjoint; interior buffers were consumed.
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => kernels::axpy(acc, 1.0, &g),
            slot => *slot = Some(g),
        }
    }
}
