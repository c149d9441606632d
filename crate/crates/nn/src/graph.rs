//! Tape-based reverse-mode autodiff over [`Tensor`]s.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters are bound into
//! it by `(tag, index)` so that a network applied several times in one pass
//! (as in a translation cycle) shares a single leaf and accumulates a single
//! gradient.

use std::collections::HashMap;

use crate::kernels::{col2im, gemm, im2col, ConvGeom, Layout};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    ReflectPad {
        x: Var,
        pad: usize,
    },
    Upsample2 {
        x: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<f32>,
    },
    Relu {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: f32,
    },
    Sigmoid {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: f32,
    },
    L1 {
        a: Var,
        b: Var,
    },
    MseConst {
        x: Var,
        target: f32,
    },
    BceLogits {
        z: Var,
        y: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Probability clip used when reporting binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

const NORM_EPS: f32 = 1e-5;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<(u32, usize), Var>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds parameter `index` of `store`, reusing the leaf if already bound.
    pub fn param(&mut self, store: &ParamStore, index: usize) -> Var {
        let key = (store.tag(), index);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(store.get(index).clone(), Op::Leaf, true);
        self.params.insert(key, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros([0, 0, 0, 0]))
    }

    /// Convolution with zero padding. `w` is `[out_c, in_c, k, k]`, `b` is `[1, out_c, 1, 1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        assert_eq!(
            ws[1], xs[1],
            "conv2d: weight expects {} input channels, got {}",
            ws[1], xs[1]
        );
        assert_eq!(ws[2], ws[3], "conv2d: only square kernels are supported");
        let geom = ConvGeom {
            in_c: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            kernel: ws[2],
            stride,
            pad,
        };
        let out_c = ws[0];
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let mut out = Tensor::zeros([xs[0], out_c, oh, ow]);
        let mut cols = vec![0.0; geom.patch_len() * geom.out_len()];
        {
            let xv = self.value(x);
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for n in 0..xs[0] {
                im2col(xv.sample(n), &geom, &mut cols);
                let o = out.sample_mut(n);
                for (c, plane) in o.chunks_mut(oh * ow).enumerate() {
                    plane.fill(bv[c]);
                }
                gemm(
                    out_c,
                    geom.patch_len(),
                    geom.out_len(),
                    wv,
                    Layout::row_major(geom.patch_len()),
                    &cols,
                    Layout::row_major(geom.out_len()),
                    1.0,
                    o,
                );
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, Op::Conv2d { x, w, b, geom }, rg)
    }

    /// Mirror padding without repeating the edge pixel.
    pub fn reflect_pad(&mut self, x: Var, pad: usize) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        assert!(
            pad < h && pad < w,
            "reflect_pad: pad {pad} too large for {h}x{w}"
        );
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let mut out = Tensor::zeros([n, c, ph, pw]);
        let src = xv.data();
        let dst = out.data_mut();
        for plane in 0..n * c {
            for y in 0..ph {
                let sy = reflect(y as isize - pad as isize, h);
                for x in 0..pw {
                    let sx = reflect(x as isize - pad as isize, w);
                    dst[(plane * ph + y) * pw + x] = src[(plane * h + sy) * w + sx];
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::ReflectPad { x, pad }, rg)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
        let src = xv.data();
        let dst = out.data_mut();
        for plane in 0..n * c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    dst[(plane * 2 * h + y) * 2 * w + x] = src[(plane * h + y / 2) * w + x / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Upsample2 { x }, rg)
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut argmax = vec![0u32; n * c * oh * ow];
        let src = xv.data();
        let dst = out.data_mut();
        for plane in 0..n * c {
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = (plane * h + 2 * y + dy) * w + 2 * x + dx;
                            if src[i] > best {
                                best = src[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = (plane * oh + y) * ow + x;
                    dst[o] = best;
                    argmax[o] = best_i as u32;
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::MaxPool2 { x, argmax }, rg)
    }

    /// Per-sample, per-channel normalization to zero mean and unit variance (no affine).
    pub fn instance_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let plane = h * w;
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(n * c);
        for p in out.data_mut().chunks_mut(plane) {
            let mean = p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
            let var = p.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / plane as f64;
            let is = 1.0 / (var as f32 + NORM_EPS).sqrt();
            for v in p.iter_mut() {
                *v = (*v - mean as f32) * is;
            }
            inv_std.push(is);
        }
        debug_assert_eq!(inv_std.len(), n * c);
        let rg = self.rg(x);
        self.push(out, Op::InstanceNorm { x, inv_std }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(x);
        self.push(out, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add { a, b }, rg)
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, s }, rg)
    }

    /// Channel-wise concatenation of two tensors with equal batch and spatial size.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let [n, ca, h, w] = av.shape();
        let [nb, cb, hb, wb] = bv.shape();
        assert_eq!((n, h, w), (nb, hb, wb), "concat: shape mismatch");
        let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
        for i in 0..n {
            data.extend_from_slice(av.sample(i));
            data.extend_from_slice(bv.sample(i));
        }
        let out = Tensor::from_vec([n, ca + cb, h, w], data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Concat { a, b }, rg)
    }

    /// Mean absolute difference over all elements.
    pub fn l1(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "l1: shape mismatch");
        let sum: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y).abs() as f64)
            .sum();
        let out = Tensor::scalar((sum / av.len() as f64) as f32);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::L1 { a, b }, rg)
    }

    /// Mean squared distance of every element from a constant (least-squares GAN loss).
    pub fn mse_const(&mut self, x: Var, target: f32) -> Var {
        let xv = self.value(x);
        let sum: f64 = xv
            .data()
            .iter()
            .map(|&v| ((v - target) as f64).powi(2))
            .sum();
        let out = Tensor::scalar((sum / xv.len() as f64) as f32);
        let rg = self.rg(x);
        self.push(out, Op::MseConst { x, target }, rg)
    }

    /// Mean binary cross-entropy of `sigmoid(z)` against labels `y` in {0, 1}.
    ///
    /// The reported value clips probabilities to `[BCE_EPS, 1 - BCE_EPS]`; the
    /// gradient is the unclipped `(sigmoid(z) - y) / len`.
    pub fn bce_with_logits(&mut self, z: Var, y: Tensor) -> Var {
        let zv = self.value(z);
        assert_eq!(zv.shape(), y.shape(), "bce_with_logits: shape mismatch");
        let sum: f64 = zv
            .data()
            .iter()
            .zip(y.data())
            .map(|(&zi, &yi)| {
                let p = (sigmoid(zi) as f64).clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(yi as f64 * p.ln() + (1.0 - yi as f64) * (1.0 - p).ln())
            })
            .sum();
        let out = Tensor::scalar((sum / zv.len() as f64) as f32);
        let rg = self.rg(z);
        self.push(out, Op::BceLogits { z, y }, rg)
    }

    fn accumulate(&mut self, v: Var, grad: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.add_assign(&grad),
            slot @ None => *slot = Some(grad),
        }
    }

    /// Reverse sweep from a scalar loss. Gradients of bound parameters are then
    /// available through [`Graph::param_grad`].
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar node");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, g);
        }
    }

    fn backward_node(&mut self, i: usize, g: Tensor) {
        // Temporarily move the op out so parents can be mutated.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => self.conv_backward(*x, *w, *b, geom, &g),
            Op::ReflectPad { x, pad } => {
                let [n, c, h, w] = self.value(*x).shape();
                let (ph, pw) = (h + 2 * pad, w + 2 * pad);
                let mut dx = Tensor::zeros([n, c, h, w]);
                let (src, dst) = (g.data(), dx.data_mut());
                for plane in 0..n * c {
                    for y in 0..ph {
                        let sy = reflect(y as isize - *pad as isize, h);
                        for xx in 0..pw {
                            let sx = reflect(xx as isize - *pad as isize, w);
                            dst[(plane * h + sy) * w + sx] += src[(plane * ph + y) * pw + xx];
                        }
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::Upsample2 { x } => {
                let [n, c, h, w] = self.value(*x).shape();
                let mut dx = Tensor::zeros([n, c, h, w]);
                let (src, dst) = (g.data(), dx.data_mut());
                for plane in 0..n * c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(plane * h + y / 2) * w + xx / 2] +=
                                src[(plane * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                let dst = dx.data_mut();
                for (&src_i, &gv) in argmax.iter().zip(g.data()) {
                    dst[src_i as usize] += gv;
                }
                self.accumulate(*x, dx);
            }
            Op::InstanceNorm { x, inv_std } => {
                let y = &self.nodes[i].value;
                let plane = y.height() * y.width();
                let mut dx = Tensor::zeros(y.shape());
                for ((dxp, (yp, gp)), is) in dx
                    .data_mut()
                    .chunks_mut(plane)
                    .zip(y.data().chunks(plane).zip(g.data().chunks(plane)))
                    .zip(inv_std)
                {
                    let mean_g = gp.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
                    let mean_gy = gp
                        .iter()
                        .zip(yp)
                        .map(|(&a, &b)| (a * b) as f64)
                        .sum::<f64>()
                        / plane as f64;
                    for ((d, &gv), &yv) in dxp.iter_mut().zip(gp).zip(yp) {
                        *d = is * (gv - mean_g as f32 - yv * mean_gy as f32);
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let mut dx = g;
                for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x);
                let mut dx = g;
                for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if v <= 0.0 {
                        *d *= slope;
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::Sigmoid { x } => {
                let y = &self.nodes[i].value;
                let mut dx = g;
                for (d, &s) in dx.data_mut().iter_mut().zip(y.data()) {
                    *d *= s * (1.0 - s);
                }
                self.accumulate(*x, dx);
            }
            Op::Add { a, b } => {
                if self.rg(*b) {
                    self.accumulate(*b, g.clone());
                }
                self.accumulate(*a, g);
            }
            Op::Scale { x, s } => {
                let s = *s;
                self.accumulate(*x, g.map(|v| v * s));
            }
            Op::Concat { a, b } => {
                let sa = self.value(*a).shape();
                let sb = self.value(*b).shape();
                let (la, lb) = (sa[1] * sa[2] * sa[3], sb[1] * sb[2] * sb[3]);
                let mut da = Vec::with_capacity(sa[0] * la);
                let mut db = Vec::with_capacity(sb[0] * lb);
                for chunk in g.data().chunks(la + lb) {
                    da.extend_from_slice(&chunk[..la]);
                    db.extend_from_slice(&chunk[la..]);
                }
                self.accumulate(*a, Tensor::from_vec(sa, da));
                self.accumulate(*b, Tensor::from_vec(sb, db));
            }
            Op::L1 { a, b } => {
                let gs = g.item() / self.value(*a).len() as f32;
                let da = {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let data = av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(x, y)| gs * sign(x - y))
                        .collect();
                    Tensor::from_vec(av.shape(), data)
                };
                if self.rg(*b) {
                    self.accumulate(*b, da.map(|v| -v));
                }
                self.accumulate(*a, da);
            }
            Op::MseConst { x, target } => {
                let xv = self.value(*x);
                let gs = 2.0 * g.item() / xv.len() as f32;
                let t = *target;
                let dx = xv.map(|v| gs * (v - t));
                self.accumulate(*x, dx);
            }
            Op::BceLogits { z, y } => {
                let zv = self.value(*z);
                let gs = g.item() / zv.len() as f32;
                let data = zv
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&zi, &yi)| gs * (sigmoid(zi) - yi))
                    .collect();
                let dz = Tensor::from_vec(zv.shape(), data);
                self.accumulate(*z, dz);
            }
        }
        self.nodes[i].op = op;
    }

    fn conv_backward(&mut self, x: Var, w: Var, b: Var, geom: &ConvGeom, g: &Tensor) {
        let n = g.batch();
        let out_c = g.channels();
        let plane = geom.out_len();
        let patch = geom.patch_len();
        let need_x = self.rg(x);
        let need_w = self.rg(w);
        if self.rg(b) {
            let mut db = Tensor::zeros([1, out_c, 1, 1]);
            for s in 0..n {
                for (c, p) in g.sample(s).chunks(plane).enumerate() {
                    db.data_mut()[c] += p.iter().sum::<f32>();
                }
            }
            self.accumulate(b, db);
        }
        let mut dw = need_w.then(|| Tensor::zeros(self.value(w).shape()));
        let mut dx = need_x.then(|| Tensor::zeros(self.value(x).shape()));
        let mut cols = vec![0.0; patch * plane];
        for s in 0..n {
            let gs = g.sample(s);
            if let Some(dw) = dw.as_mut() {
                im2col(self.value(x).sample(s), geom, &mut cols);
                gemm(
                    out_c,
                    plane,
                    patch,
                    gs,
                    Layout::row_major(plane),
                    &cols,
                    Layout::transposed(plane),
                    1.0,
                    dw.data_mut(),
                );
            }
            if let Some(dx) = dx.as_mut() {
                gemm(
                    patch,
                    out_c,
                    plane,
                    self.value(w).data(),
                    Layout::transposed(patch),
                    gs,
                    Layout::row_major(plane),
                    0.0,
                    &mut cols,
                );
                col2im(&cols, geom, dx.sample_mut(s));
            }
        }
        if let Some(dw) = dw {
            self.accumulate(w, dw);
        }
        if let Some(dx) = dx {
            self.accumulate(x, dx);
        }
    }

    /// Gradient of a bound parameter after [`Graph::backward`], if it was reached.
    pub fn param_grad(&self, store: &ParamStore, index: usize) -> Option<&Tensor> {
        let v = self.params.get(&(store.tag(), index))?;
        self.grads.get(v.0)?.as_ref()
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
