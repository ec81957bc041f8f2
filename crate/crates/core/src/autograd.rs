//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Tape`] records one forward pass over a [`ParamSet`]. Parameters enter
//! the tape once each, so weights shared between two branches (the image
//! and memory encoders, or the two strong views) accumulate their gradient
//! from every use. Loss heads are recorded as [`Tape::fused_scalar`] nodes
//! carrying a closed-form gradient with respect to their input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{col2im, gemm, im2col, ConvGeom, Tensor};

/// Named, ordered parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, t: Tensor) -> usize {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter {name}"
        );
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape == b.shape)
    }

    /// Flat `(param, element)` addressing used by gradient checks.
    pub fn flat_get(&self, param: usize, elem: usize) -> f64 {
        self.tensors[param].data[elem]
    }

    pub fn flat_set(&mut self, param: usize, elem: usize, v: f64) {
        self.tensors[param].data[elem] = v;
    }

    /// `self -= lr * grads`, skipping parameters without a gradient.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (t, g) in self.tensors.iter_mut().zip(&grads.by_param) {
            if let Some(g) = g {
                for (p, d) in t.data.iter_mut().zip(&g.data) {
                    *p -= lr * d;
                }
            }
        }
    }

    pub fn distance(&self, other: &ParamSet) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| {
                a.data
                    .iter()
                    .zip(&b.data)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Adam moments for one [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update; parameters without a gradient keep
    /// their moments and values.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, g) in grads.by_param.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            for (i, p) in params.get_mut(id).data.iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g.data[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g.data[i] * g.data[i];
                *p -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Per-parameter gradients; `None` for parameters the loss does not reach.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub by_param: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            by_param: vec![None; params.len()],
        }
    }

    pub fn get(&self, param: usize) -> Option<&Tensor> {
        self.by_param[param].as_ref()
    }

    pub fn flat(&self, param: usize, elem: usize) -> f64 {
        self.by_param[param].as_ref().map_or(0.0, |t| t.data[elem])
    }

    /// `self += scale * other`.
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.by_param.iter_mut().zip(&other.by_param) {
            let Some(b) = b else { continue };
            match a {
                Some(a) => a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += scale * y),
                None => {
                    let mut t = b.clone();
                    t.data.iter_mut().for_each(|v| *v *= scale);
                    *a = Some(t);
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.by_param.iter().flatten().all(Tensor::is_finite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Param(usize),
    Const,
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Silu(Var),
    Sigmoid(Var),
    Upsample2(Var),
    Concat(Vec<Var>),
    Add(Var, Var),
    AddChannel(Var, Var),
    ScaleChannels(Var, Vec<f64>),
    Scale(Var, f64),
    MatMul { a: Var, b: Var, ta: bool, tb: bool, m: usize, k: usize, n: usize },
    SoftmaxRows(Var),
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    ChannelMean(Var),
    Fused { input: Var, grad: Tensor },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    op: Op,
    value: Option<Tensor>,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match (&self.nodes[v.0].op, &self.nodes[v.0].value) {
            (Op::Param(id), _) => self.params.get(*id),
            (_, Some(t)) => t,
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.value(v).shape
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Const, t, false)
    }

    /// 2-d convolution of a `[Ci, H, W]` input with `[Co, Ci, k, k]`
    /// weights and a `[Co]` bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (ci, h, wd) = self.value(x).chw();
        let ws = &self.value(w).shape;
        let (co, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], ci, "conv weight expects {} input channels, got {ci}", ws[1]);
        let geom = ConvGeom {
            in_channels: ci,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
        };
        let (ho, wo) = geom.out_hw();
        let mut out = vec![0.0; co * ho * wo];
        for (o, bv) in self.value(b).data.iter().enumerate() {
            out[o * ho * wo..(o + 1) * ho * wo].fill(*bv);
        }
        let kk = ci * k * k;
        if geom.is_pointwise() {
            gemm(co, kk, ho * wo, 1.0, &self.value(w).data, false, &self.value(x).data, false, 1.0, &mut out);
        } else {
            let cols = im2col(&self.value(x).data, &geom);
            gemm(co, kk, ho * wo, 1.0, &self.value(w).data, false, &cols, false, 1.0, &mut out);
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(
            Op::Conv2d { x, w, b, geom },
            Tensor {
                shape: vec![co, ho, wo],
                data: out,
            },
            ng,
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|v| v / (1.0 + (-v).exp())).collect();
        let out = Tensor {
            shape: t.shape.clone(),
            data,
        };
        let ng = self.ng(x);
        self.push(Op::Silu(x), out, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| sigmoid(*v)).collect(),
        };
        let ng = self.ng(x);
        self.push(Op::Sigmoid(x), out, ng)
    }

    /// Nearest-neighbour 2x upsampling of `[C, H, W]`.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let src = &self.value(x).data;
        let mut data = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    data[(ch * 2 * h + y) * 2 * w + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.ng(x);
        self.push(
            Op::Upsample2(x),
            Tensor {
                shape: vec![c, 2 * h, 2 * w],
                data,
            },
            ng,
        )
    }

    /// Concatenation along the leading dimension.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        let tail = self.value(xs[0]).shape[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for v in xs {
            let t = self.value(*v);
            assert_eq!(t.shape[1..], tail[..], "concat trailing dims differ");
            lead += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let ng = xs.iter().any(|v| self.ng(*v));
        self.push(Op::Concat(xs.to_vec()), Tensor { shape, data }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "add shape mismatch");
        let out = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect(),
        };
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), out, ng)
    }

    /// Adds `v[c]` to every element of channel `c` of `x`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let (tx, tv) = (self.value(x), self.value(v));
        let c = tx.shape[0];
        assert_eq!(tv.len(), c, "channel vector length mismatch");
        let per = tx.len() / c;
        let mut data = tx.data.clone();
        for (ch, bias) in tv.data.iter().enumerate() {
            data[ch * per..(ch + 1) * per].iter_mut().for_each(|d| *d += bias);
        }
        let out = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        let ng = self.ng(x) || self.ng(v);
        self.push(Op::AddChannel(x, v), out, ng)
    }

    /// Multiplies channel `c` by the constant `factors[c]`.
    pub fn scale_channels(&mut self, x: Var, factors: Vec<f64>) -> Var {
        let tx = self.value(x);
        let c = tx.shape[0];
        assert_eq!(factors.len(), c);
        let per = tx.len() / c;
        let mut data = tx.data.clone();
        for (ch, f) in factors.iter().enumerate() {
            data[ch * per..(ch + 1) * per].iter_mut().for_each(|d| *d *= f);
        }
        let out = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        let ng = self.ng(x);
        self.push(Op::ScaleChannels(x, factors), out, ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let tx = self.value(x);
        let out = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().map(|v| v * s).collect(),
        };
        let ng = self.ng(x);
        self.push(Op::Scale(x, s), out, ng)
    }

    /// 2-d product `op(a) * op(b)`.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let sa = self.value(a).shape.clone();
        let sb = self.value(b).shape.clone();
        assert!(sa.len() == 2 && sb.len() == 2, "matmul expects matrices");
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, &self.value(a).data, ta, &self.value(b).data, tb, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(
            Op::MatMul { a, b, ta, tb, m, k, n },
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            ng,
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let cols = *tx.shape.last().expect("softmax of a scalar");
        let mut data = tx.data.clone();
        for row in data.chunks_mut(cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let out = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        let ng = self.ng(x);
        self.push(Op::SoftmaxRows(x), out, ng)
    }

    /// Rows `start..start + len` along the leading dimension.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let tx = self.value(x);
        let per = tx.len() / tx.shape[0];
        let mut shape = tx.shape.clone();
        shape[0] = len;
        let out = Tensor {
            shape,
            data: tx.data[start * per..(start + len) * per].to_vec(),
        };
        let ng = self.ng(x);
        self.push(Op::SliceRows { x, start }, out, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.len(), shape.iter().product::<usize>(), "reshape size mismatch");
        let out = Tensor {
            shape: shape.to_vec(),
            data: tx.data.clone(),
        };
        let ng = self.ng(x);
        self.push(Op::Reshape(x), out, ng)
    }

    /// Mean over everything but the leading dimension.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.shape[0];
        let per = tx.len() / c;
        let data = tx
            .data
            .chunks(per)
            .map(|ch| ch.iter().sum::<f64>() / per as f64)
            .collect();
        let ng = self.ng(x);
        self.push(
            Op::ChannelMean(x),
            Tensor {
                shape: vec![c],
                data,
            },
            ng,
        )
    }

    /// Scalar node whose gradient with respect to `input` is `grad`.
    pub fn fused_scalar(&mut self, input: Var, value: f64, grad: Tensor) -> Var {
        assert_eq!(grad.shape, self.value(input).shape, "fused grad shape mismatch");
        let ng = self.ng(input);
        self.push(Op::Fused { input, grad }, Tensor::scalar(value), ng)
    }

    /// `sum_i w_i * x_i` over same-shape inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let shape = self.value(terms[0].0).shape.clone();
        let mut data = vec![0.0; self.value(terms[0].0).len()];
        for (v, w) in terms {
            let t = self.value(*v);
            assert_eq!(t.shape, shape, "weighted_sum shape mismatch");
            data.iter_mut().zip(&t.data).for_each(|(d, x)| *d += w * x);
        }
        let ng = terms.iter().any(|(v, _)| self.ng(*v));
        self.push(Op::WeightedSum(terms.to_vec()), Tensor { shape, data }, ng)
    }

    /// Gradients of the scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::zeros_like(self.params);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Param(id) => {
                    out.by_param[*id] = Some(Tensor {
                        shape: self.params.get(*id).shape.clone(),
                        data: g,
                    });
                }
                Op::Const => {}
                Op::Conv2d { x, w, b, geom } => {
                    let (ho, wo) = geom.out_hw();
                    let hw = ho * wo;
                    let co = self.value(*w).shape[0];
                    let kk = geom.in_channels * geom.kernel * geom.kernel;
                    let xval = &self.value(*x).data;
                    let cols_owned;
                    let cols: &[f64] = if geom.is_pointwise() {
                        xval
                    } else {
                        cols_owned = im2col(xval, geom);
                        &cols_owned
                    };
                    if self.ng(*w) {
                        let dw = acc(&mut grads, *w, co * kk);
                        gemm(co, hw, kk, 1.0, &g, false, cols, true, 1.0, dw);
                    }
                    if self.ng(*b) {
                        let db = acc(&mut grads, *b, co);
                        for (o, d) in db.iter_mut().enumerate() {
                            *d += g[o * hw..(o + 1) * hw].iter().sum::<f64>();
                        }
                    }
                    if self.ng(*x) {
                        let n = self.value(*x).len();
                        if geom.is_pointwise() {
                            let dx = acc(&mut grads, *x, n);
                            gemm(kk, co, hw, 1.0, &self.value(*w).data, true, &g, false, 1.0, dx);
                        } else {
                            let mut dcols = vec![0.0; kk * hw];
                            gemm(kk, co, hw, 1.0, &self.value(*w).data, true, &g, false, 0.0, &mut dcols);
                            let dx = acc(&mut grads, *x, n);
                            col2im(&dcols, geom, dx);
                        }
                    }
                }
                Op::Silu(x) => {
                    let xv = &self.value(*x).data;
                    let dx = acc(&mut grads, *x, xv.len());
                    for ((d, gv), v) in dx.iter_mut().zip(&g).zip(xv) {
                        let s = sigmoid(*v);
                        *d += gv * s * (1.0 + v * (1.0 - s));
                    }
                }
                Op::Sigmoid(x) => {
                    let y = &node.value.as_ref().expect("value").data;
                    let dx = acc(&mut grads, *x, y.len());
                    for ((d, gv), s) in dx.iter_mut().zip(&g).zip(y) {
                        *d += gv * s * (1.0 - s);
                    }
                }
                Op::Upsample2(x) => {
                    let (c, h, w) = self.value(*x).chw();
                    let dx = acc(&mut grads, *x, c * h * w);
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dx[(ch * h + y / 2) * w + xx / 2] += g[(ch * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                }
                Op::Concat(xs) => {
                    let mut off = 0;
                    for v in xs {
                        let n = self.value(*v).len();
                        if self.ng(*v) {
                            let dx = acc(&mut grads, *v, n);
                            dx.iter_mut().zip(&g[off..off + n]).for_each(|(d, gv)| *d += gv);
                        }
                        off += n;
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        if self.ng(*v) {
                            let dx = acc(&mut grads, *v, g.len());
                            dx.iter_mut().zip(&g).for_each(|(d, gv)| *d += gv);
                        }
                    }
                }
                Op::AddChannel(x, v) => {
                    if self.ng(*x) {
                        let dx = acc(&mut grads, *x, g.len());
                        dx.iter_mut().zip(&g).for_each(|(d, gv)| *d += gv);
                    }
                    if self.ng(*v) {
                        let c = self.value(*v).len();
                        let per = g.len() / c;
                        let dv = acc(&mut grads, *v, c);
                        for (ch, d) in dv.iter_mut().enumerate() {
                            *d += g[ch * per..(ch + 1) * per].iter().sum::<f64>();
                        }
                    }
                }
                Op::ScaleChannels(x, factors) => {
                    let per = g.len() / factors.len();
                    let dx = acc(&mut grads, *x, g.len());
                    for (ch, f) in factors.iter().enumerate() {
                        for j in ch * per..(ch + 1) * per {
                            dx[j] += f * g[j];
                        }
                    }
                }
                Op::Scale(x, s) => {
                    let dx = acc(&mut grads, *x, g.len());
                    dx.iter_mut().zip(&g).for_each(|(d, gv)| *d += s * gv);
                }
                Op::MatMul { a, b, ta, tb, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    if self.ng(*a) {
                        let bv = &self.value(*b).data;
                        let da = acc(&mut grads, *a, m * k);
                        if *ta {
                            // dA^T = op(B) dC^T  -> dA (k x m) = op(B) (k x n) * dC^T (n x m)
                            gemm(k, n, m, 1.0, bv, *tb, &g, true, 1.0, da);
                        } else {
                            gemm(m, n, k, 1.0, &g, false, bv, !*tb, 1.0, da);
                        }
                    }
                    if self.ng(*b) {
                        let av = &self.value(*a).data;
                        let db = acc(&mut grads, *b, k * n);
                        if *tb {
                            // dB (n x k) = dC^T (n x m) * op(A) (m x k)
                            gemm(n, m, k, 1.0, &g, true, av, *ta, 1.0, db);
                        } else {
                            gemm(k, m, n, 1.0, av, !*ta, &g, false, 1.0, db);
                        }
                    }
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value.as_ref().expect("value").data;
                    let cols = *node.value.as_ref().expect("value").shape.last().unwrap();
                    let dx = acc(&mut grads, *x, y.len());
                    for ((dr, gr), yr) in dx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
                Op::SliceRows { x, start } => {
                    let tx = self.value(*x);
                    let per = tx.len() / tx.shape[0];
                    let n = tx.len();
                    let dx = acc(&mut grads, *x, n);
                    dx[start * per..start * per + g.len()]
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(d, gv)| *d += gv);
                }
                Op::Reshape(x) => {
                    let dx = acc(&mut grads, *x, g.len());
                    dx.iter_mut().zip(&g).for_each(|(d, gv)| *d += gv);
                }
                Op::ChannelMean(x) => {
                    let n = self.value(*x).len();
                    let per = n / g.len();
                    let dx = acc(&mut grads, *x, n);
                    for (ch, gv) in g.iter().enumerate() {
                        dx[ch * per..(ch + 1) * per]
                            .iter_mut()
                            .for_each(|d| *d += gv / per as f64);
                    }
                }
                Op::Fused { input, grad } => {
                    let dx = acc(&mut grads, *input, grad.len());
                    dx.iter_mut().zip(&grad.data).for_each(|(d, gv)| *d += g[0] * gv);
                }
                Op::WeightedSum(terms) => {
                    for (v, w) in terms {
                        if self.ng(*v) {
                            let dx = acc(&mut grads, *v, g.len());
                            dx.iter_mut().zip(&g).for_each(|(d, gv)| *d += w * gv);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], f: impl Fn(usize) -> f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(f).collect()).unwrap()
    }

    /// Central-difference check of every parameter element.
    fn check(params: &ParamSet, build: impl Fn(&mut Tape) -> Var) {
        let tape_grads = {
            let mut tape = Tape::new(params);
            let l = build(&mut tape);
            tape.backward(l).unwrap()
        };
        let h = 1e-5;
        for p in 0..params.len() {
            for e in 0..params.get(p).len() {
                let mut plus = params.clone();
                plus.flat_set(p, e, params.flat_get(p, e) + h);
                let mut minus = params.clone();
                minus.flat_set(p, e, params.flat_get(p, e) - h);
                let f = |ps: &ParamSet| {
                    let mut tape = Tape::new(ps);
                    let l = build(&mut tape);
                    tape.value(l).item()
                };
                let num = (f(&plus) - f(&minus)) / (2.0 * h);
                let ana = tape_grads.flat(p, e);
                assert!(
                    (num - ana).abs() <= 1e-6 * (1.0 + num.abs()),
                    "{}[{e}]: numeric {num} vs tape {ana}",
                    params.name(p)
                );
            }
        }
    }

    /// Projects a tensor to a scalar with fixed pseudo-random weights.
    fn probe(tape: &mut Tape, x: Var) -> Var {
        let n = tape.value(x).len();
        let w = t(&[n], |i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4);
        let val: f64 = tape.value(x).data.iter().zip(&w.data).map(|(a, b)| a * b).sum();
        let grad = Tensor::new(tape.value(x).shape.clone(), w.data).unwrap();
        tape.fused_scalar(x, val, grad)
    }

    #[test]
    fn conv_silu_upsample_gradients() {
        let mut ps = ParamSet::new();
        let x = ps.add("x", t(&[2, 5, 6], |i| (i as f64 * 0.37).sin()));
        let w = ps.add("w", t(&[3, 2, 3, 3], |i| (i as f64 * 0.11).cos() * 0.3));
        let b = ps.add("b", t(&[3], |i| i as f64 * 0.1));
        let w1 = ps.add("w1", t(&[2, 3, 1, 1], |i| 0.2 * i as f64 - 0.3));
        let b1 = ps.add("b1", t(&[2], |_| 0.05));
        check(&ps, |tape| {
            let (xv, wv, bv) = (tape.param(x), tape.param(w), tape.param(b));
            let c = tape.conv2d(xv, wv, bv, 2, 1);
            let s = tape.silu(c);
            let u = tape.upsample2(s);
            let (w1v, b1v) = (tape.param(w1), tape.param(b1));
            let p = tape.conv2d(u, w1v, b1v, 1, 0);
            probe(tape, p)
        });
    }

    #[test]
    fn attention_style_gradients() {
        let mut ps = ParamSet::new();
        let q = ps.add("q", t(&[4, 6], |i| (i as f64 * 0.3).sin()));
        let k = ps.add("k", t(&[4, 5], |i| (i as f64 * 0.7).cos()));
        let v = ps.add("v", t(&[4, 5], |i| (i as f64 * 0.2).sin()));
        let bias = ps.add("bias", t(&[4], |i| i as f64 * 0.1));
        check(&ps, |tape| {
            let (qv, kv, vv, bv) = (tape.param(q), tape.param(k), tape.param(v), tape.param(bias));
            let qh = tape.slice_rows(qv, 0, 2);
            let kh = tape.slice_rows(kv, 0, 2);
            let s = tape.matmul(qh, kh, true, false);
            let s = tape.scale(s, 0.7);
            let a = tape.softmax_rows(s);
            let o = tape.matmul(vv, a, false, true);
            let o2 = tape.add_channel(o, bv);
            let cat = tape.concat(&[o2, qv]);
            let m = tape.channel_mean(cat);
            let sig = tape.sigmoid(m);
            let r = tape.reshape(sig, &[2, 4]);
            let sc = tape.scale_channels(r, vec![2.0, 0.0]);
            let l1 = probe(tape, sc);
            let l2 = probe(tape, o);
            tape.weighted_sum(&[(l1, 1.0), (l2, -0.5)])
        });
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut ps = ParamSet::new();
        let a = ps.add("a", Tensor::scalar(3.0));
        let mut tape = Tape::new(&ps);
        let v1 = tape.param(a);
        let v2 = tape.param(a);
        assert_eq!(v1, v2);
        let s = tape.add(v1, v2);
        let l = tape.fused_scalar(s, 6.0, Tensor::scalar(1.0));
        let g = tape.backward(l).unwrap();
        assert_eq!(g.flat(a, 0), 2.0);
    }
}
