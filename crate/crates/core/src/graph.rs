//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every op evaluates eagerly and records what its
//! backward pass needs. Calling [`Graph::backward`] on a scalar node returns
//! the gradient of that scalar with respect to every parameter that fed it.
//! Values introduced with [`Graph::constant`] are leaves that never receive
//! gradient, which is also how a subgraph is detached.

use std::collections::HashMap;

use crate::error::{contract, Result};
use crate::kernels::{col2im, gemm, im2col, ConvGeom};
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        /// Geometry of the adjoint convolution (output grid -> input grid).
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add(Var, Var),
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Tanh(Var),
    AvgPool2(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Reshape(Var),
    MeanAbsDiff(Var, Var),
    HalfSqNormBatchMean(Var),
    Bce {
        logits: Var,
        real: bool,
        eps: f64,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Copies `v`'s value into a fresh leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Parameter leaf. Repeated calls with the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, ci, h, wd) = self.value(x).dims4()?;
        let ws = self.value(w).shape().to_vec();
        let [co, wci, k, k2] = ws[..] else {
            return Err(contract(format!("conv weight must be 4-D, got {ws:?}")));
        };
        if wci != ci || k != k2 || self.value(b).len() != co {
            return Err(contract(format!(
                "conv weight {ws:?} incompatible with input channels {ci}"
            )));
        }
        let geom = ConvGeom::conv(ci, h, wd, k, stride, pad)
            .ok_or_else(|| contract(format!("kernel {k} larger than padded input {h}x{wd}")))?;
        let (kk, l) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; n * kk * l];
        let mut out = vec![0.0; n * co * l];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for i in 0..n {
                let ci_cols = &mut cols[i * kk * l..(i + 1) * kk * l];
                im2col(&xv[i * ci * h * wd..(i + 1) * ci * h * wd], &geom, ci_cols);
                let o = &mut out[i * co * l..(i + 1) * co * l];
                gemm(co, kk, l, wv, false, ci_cols, false, o, 0.0);
                for (c, row) in o.chunks_mut(l).enumerate() {
                    row.iter_mut().for_each(|v| *v += bv[c]);
                }
            }
        }
        let value = Tensor::new(vec![n, co, geom.out_h, geom.out_w], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
        ))
    }

    /// Fractionally strided convolution; weight layout is `[in, out, k, k]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, ci, h, wd) = self.value(x).dims4()?;
        let ws = self.value(w).shape().to_vec();
        let [wci, co, k, k2] = ws[..] else {
            return Err(contract(format!("deconv weight must be 4-D, got {ws:?}")));
        };
        if wci != ci || k != k2 || self.value(b).len() != co {
            return Err(contract(format!(
                "deconv weight {ws:?} incompatible with input channels {ci}"
            )));
        }
        let oh = ((h - 1) * stride + k)
            .checked_sub(2 * pad)
            .ok_or_else(|| contract("deconv padding exceeds kernel span"))?;
        let ow = ((wd - 1) * stride + k)
            .checked_sub(2 * pad)
            .ok_or_else(|| contract("deconv padding exceeds kernel span"))?;
        let geom = ConvGeom::conv(co, oh, ow, k, stride, pad)
            .filter(|g| g.out_h == h && g.out_w == wd)
            .ok_or_else(|| contract("inconsistent deconv geometry"))?;
        let (kk, l) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![0.0; n * co * oh * ow];
        let mut cols = vec![0.0; kk * l];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for i in 0..n {
                gemm(
                    kk,
                    ci,
                    l,
                    wv,
                    true,
                    &xv[i * ci * l..(i + 1) * ci * l],
                    false,
                    &mut cols,
                    0.0,
                );
                let o = &mut out[i * co * oh * ow..(i + 1) * co * oh * ow];
                col2im(&cols, &geom, o);
                for (c, plane) in o.chunks_mut(oh * ow).enumerate() {
                    plane.iter_mut().for_each(|v| *v += bv[c]);
                }
            }
        }
        let value = Tensor::new(vec![n, co, oh, ow], out)?;
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, geom }))
    }

    /// `y = x · wᵀ + b` with `x` flattened to `[n, in]` and `w` of shape `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let n = xs[0];
        let input = self.value(x).len() / n.max(1);
        let ws = self.value(w).shape().to_vec();
        let [out_f, in_f] = ws[..] else {
            return Err(contract(format!("linear weight must be 2-D, got {ws:?}")));
        };
        if in_f != input || self.value(b).len() != out_f {
            return Err(contract(format!(
                "linear weight {ws:?} incompatible with input {xs:?}"
            )));
        }
        let mut y = vec![0.0; n * out_f];
        gemm(
            n,
            in_f,
            out_f,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut y,
            0.0,
        );
        let bv = self.value(b).data();
        for row in y.chunks_mut(out_f) {
            row.iter_mut().zip(bv).for_each(|(v, b)| *v += b);
        }
        let value = Tensor::new(vec![n, out_f], y)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(contract(format!(
                "add shape mismatch {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut t = self.value(a).clone();
        t.add_assign(self.value(b));
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let t = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(t, Op::LeakyRelu { x, slope })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::tanh);
        self.push(t, Op::Tanh(x))
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(contract(format!(
                "avg_pool2 needs even spatial dims, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = p * h * w;
                    let s = xv[base + 2 * y * w + 2 * xx]
                        + xv[base + 2 * y * w + 2 * xx + 1]
                        + xv[base + (2 * y + 1) * w + 2 * xx]
                        + xv[base + (2 * y + 1) * w + 2 * xx + 1];
                    out[p * oh * ow + y * ow + xx] = 0.25 * s;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, Op::AvgPool2(x)))
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(contract(format!("max_pool2 input too small: {h}x{w}")));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0; out.len()];
        for p in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = p * h * w + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = p * h * w + (2 * y + dy) * w + 2 * xx + dx;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    let o = p * oh * ow + y * ow + xx;
                    out[o] = xv[best];
                    argmax[o] = best;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2 { x, argmax }))
    }

    /// Mean over spatial positions: `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = (h * w) as f64;
        let out = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / hw)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Mean absolute difference over all elements (scalar).
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() || ta.is_empty() {
            return Err(contract(format!(
                "L1 distance needs equal nonempty shapes, got {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        let v = s / ta.len() as f64;
        Ok(self.push(Tensor::scalar(v), Op::MeanAbsDiff(a, b)))
    }

    /// `mean_i ‖x_i‖² / 2` over the batch axis.
    pub fn half_sq_norm_batch_mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.batch_len().max(1) as f64;
        let s: f64 = t.data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(0.5 * s / n), Op::HalfSqNormBatchMean(x))
    }

    /// Binary cross-entropy of `sigmoid(logits)` against an all-real or
    /// all-fake target, averaged over every element. Probabilities are
    /// clamped to `[eps, 1 - eps]` inside the log.
    pub fn bce_with_logits(&mut self, logits: Var, real: bool, eps: f64) -> Var {
        let t = self.value(logits);
        let n = t.len().max(1) as f64;
        let s: f64 = t
            .data()
            .iter()
            .map(|&l| {
                let p = sigmoid(l).clamp(eps, 1.0 - eps);
                if real {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum();
        self.push(Tensor::scalar(s / n), Op::Bce { logits, real, eps })
    }

    /// Mean softmax cross-entropy of `[n, k]` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let [n, k] = t.shape()[..] else {
            return Err(contract("softmax cross-entropy needs [n, k] logits"));
        };
        if labels.len() != n || labels.iter().any(|&y| y >= k) {
            return Err(contract("labels do not match logits"));
        }
        let mut s = 0.0;
        for (row, &y) in t.data().chunks(k).zip(labels) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            s += lse - row[y];
        }
        let v = s / n as f64;
        Ok(self.push(
            Tensor::scalar(v),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// `Σ w_k · x_k` over scalar nodes, summed in the given order.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut s = 0.0;
        for &(v, w) in terms {
            s += w * self.value(v).item();
        }
        self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec()))
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(contract("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Grads::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    out.by_param.insert(*id, g);
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    geom,
                    cols,
                } => {
                    let (n, co, _, _) = g.dims4()?;
                    let (kk, l) = (geom.col_rows(), geom.col_cols());
                    let in_len = geom.channels * geom.height * geom.width;
                    let wv = self.value(*w);
                    let mut dw = vec![0.0; co * kk];
                    let mut db = vec![0.0; co];
                    let mut dx = vec![0.0; n * in_len];
                    let mut dcols = vec![0.0; kk * l];
                    for i in 0..n {
                        let gi = &g.data()[i * co * l..(i + 1) * co * l];
                        gemm(
                            co,
                            l,
                            kk,
                            gi,
                            false,
                            &cols[i * kk * l..(i + 1) * kk * l],
                            true,
                            &mut dw,
                            1.0,
                        );
                        for (c, row) in gi.chunks(l).enumerate() {
                            db[c] += row.iter().sum::<f64>();
                        }
                        gemm(kk, co, l, wv.data(), true, gi, false, &mut dcols, 0.0);
                        col2im(&dcols, geom, &mut dx[i * in_len..(i + 1) * in_len]);
                    }
                    accumulate(&mut grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
                    accumulate(
                        &mut grads,
                        *b,
                        Tensor::new(self.value(*b).shape().to_vec(), db)?,
                    );
                    accumulate(
                        &mut grads,
                        *x,
                        Tensor::new(self.value(*x).shape().to_vec(), dx)?,
                    );
                }
                Op::ConvTranspose2d { x, w, b, geom } => {
                    let (n, ci, h, wd) = self.value(*x).dims4()?;
                    let (kk, l) = (geom.col_rows(), geom.col_cols());
                    debug_assert_eq!(l, h * wd);
                    let out_len = geom.channels * geom.height * geom.width;
                    let wv = self.value(*w);
                    let xv = self.value(*x);
                    let mut dw = vec![0.0; ci * kk];
                    let mut db = vec![0.0; geom.channels];
                    let mut dx = vec![0.0; n * ci * l];
                    let mut dcols = vec![0.0; kk * l];
                    for i in 0..n {
                        let gi = &g.data()[i * out_len..(i + 1) * out_len];
                        im2col(gi, geom, &mut dcols);
                        gemm(
                            ci,
                            kk,
                            l,
                            wv.data(),
                            false,
                            &dcols,
                            false,
                            &mut dx[i * ci * l..(i + 1) * ci * l],
                            0.0,
                        );
                        gemm(
                            ci,
                            l,
                            kk,
                            &xv.data()[i * ci * l..(i + 1) * ci * l],
                            false,
                            &dcols,
                            true,
                            &mut dw,
                            1.0,
                        );
                        for (c, plane) in gi.chunks(geom.height * geom.width).enumerate() {
                            db[c] += plane.iter().sum::<f64>();
                        }
                    }
                    accumulate(&mut grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
                    accumulate(
                        &mut grads,
                        *b,
                        Tensor::new(self.value(*b).shape().to_vec(), db)?,
                    );
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let [out_f, in_f] = wv.shape()[..] else {
                        unreachable!()
                    };
                    let n = g.shape()[0];
                    let mut dx = vec![0.0; n * in_f];
                    gemm(
                        n,
                        out_f,
                        in_f,
                        g.data(),
                        false,
                        wv.data(),
                        false,
                        &mut dx,
                        0.0,
                    );
                    let mut dw = vec![0.0; out_f * in_f];
                    gemm(
                        out_f,
                        n,
                        in_f,
                        g.data(),
                        true,
                        xv.data(),
                        false,
                        &mut dw,
                        0.0,
                    );
                    let mut db = vec![0.0; out_f];
                    for row in g.data().chunks(out_f) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                    accumulate(&mut grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
                    accumulate(&mut grads, *b, Tensor::new(vec![out_f], db)?);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = self.value(*x);
                    let mut d = g;
                    for (dv, &v) in d.data_mut().iter_mut().zip(xv.data()) {
                        if v <= 0.0 {
                            *dv *= slope;
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::Tanh(x) => {
                    let mut d = g;
                    for (dv, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                        *dv *= 1.0 - y * y;
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::AvgPool2(x) => {
                    let (n, c, h, w) = self.value(*x).dims4()?;
                    let (oh, ow) = (h / 2, w / 2);
                    let mut d = vec![0.0; n * c * h * w];
                    for p in 0..n * c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let gv = 0.25 * g.data()[p * oh * ow + y * ow + xx];
                                let base = p * h * w;
                                d[base + 2 * y * w + 2 * xx] += gv;
                                d[base + 2 * y * w + 2 * xx + 1] += gv;
                                d[base + (2 * y + 1) * w + 2 * xx] += gv;
                                d[base + (2 * y + 1) * w + 2 * xx + 1] += gv;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(vec![n, c, h, w], d)?);
                }
                Op::MaxPool2 { x, argmax } => {
                    let xv = self.value(*x);
                    let mut d = vec![0.0; xv.len()];
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        d[src] += gv;
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
                }
                Op::GlobalAvgPool(x) => {
                    let (n, c, h, w) = self.value(*x).dims4()?;
                    let hw = h * w;
                    let mut d = vec![0.0; n * c * hw];
                    for (plane, &gv) in d.chunks_mut(hw).zip(g.data()) {
                        plane.fill(gv / hw as f64);
                    }
                    accumulate(&mut grads, *x, Tensor::new(vec![n, c, h, w], d)?);
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, g.reshape(&shape)?);
                }
                Op::MeanAbsDiff(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let scale = g.item() / ta.len() as f64;
                    let da: Vec<f64> = ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .map(|(x, y)| scale * sign(x - y))
                        .collect();
                    let db: Vec<f64> = da.iter().map(|v| -v).collect();
                    accumulate(&mut grads, *a, Tensor::new(ta.shape().to_vec(), da)?);
                    accumulate(&mut grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
                }
                Op::HalfSqNormBatchMean(x) => {
                    let xv = self.value(*x);
                    let scale = g.item() / xv.batch_len().max(1) as f64;
                    accumulate(&mut grads, *x, xv.map(|v| v * scale));
                }
                Op::Bce { logits, real, eps } => {
                    let lv = self.value(*logits);
                    let scale = g.item() / lv.len().max(1) as f64;
                    let d = lv.map(|l| {
                        let p = sigmoid(l);
                        if p < *eps || p > 1.0 - *eps {
                            0.0
                        } else if *real {
                            -(1.0 - p) * scale
                        } else {
                            p * scale
                        }
                    });
                    accumulate(&mut grads, *logits, d);
                }
                Op::SoftmaxXent { logits, labels } => {
                    let lv = self.value(*logits);
                    let k = lv.shape()[1];
                    let n = labels.len();
                    let scale = g.item() / n as f64;
                    let mut d = vec![0.0; lv.len()];
                    for ((row, drow), &y) in lv.data().chunks(k).zip(d.chunks_mut(k)).zip(labels) {
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                        for (j, (dv, v)) in drow.iter_mut().zip(row).enumerate() {
                            let p = (v - m).exp() / z;
                            *dv = scale * (p - if j == y { 1.0 } else { 0.0 });
                        }
                    }
                    accumulate(&mut grads, *logits, Tensor::new(lv.shape().to_vec(), d)?);
                }
                Op::WeightedSum(terms) => {
                    let gv = g.item();
                    for &(v, w) in terms {
                        accumulate(&mut grads, v, Tensor::scalar(gv * w));
                    }
                }
            }
        }
        Ok(out)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
