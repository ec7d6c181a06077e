//! Reverse-mode differentiation over a fixed operator set (convolution,
//! upsampling, elementwise arithmetic, reductions, codebook gather).
//!
//! A define-by-run tape evaluates values eagerly and replays the graph
//! backwards for gradients. Stop-gradient and quantizer routing are handled
//! by [`Routing`]: in `Record` mode detach values and nearest-codebook
//! assignments are computed and remembered; in `Replay` mode they are
//! substituted back, which makes the tape evaluate exactly the surrogate
//! objective whose true gradient backpropagation computes. The
//! finite-difference checks rely on that equivalence.

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddConst(Var, f64),
    Softplus(Var),
    Sigmoid(Var),
    Log(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Upsample2(Var),
    PyrDown(Var),
    Dx(Var),
    Dy(Var),
    Embed {
        codebook: Var,
        indices: Vec<usize>,
        h: usize,
        w: usize,
    },
    ConcatC(Vec<Var>),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Trainable leaf: gradients accumulate here.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Non-trainable leaf: backpropagation never enters it, so its reported
    /// gradient is exactly zero.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- elementwise / broadcast ----

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if ta.same_shape(tb) {
            Tensor {
                shape: ta.shape.clone(),
                data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
            }
        } else if tb.is_scalar() {
            let s = tb.item();
            ta.map(|x| f(x, s))
        } else if ta.is_scalar() {
            let s = ta.item();
            tb.map(|y| f(s, y))
        } else {
            panic!("shape mismatch {:?} vs {:?}", ta.shape, tb.shape);
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(op, value, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.map(|x| x * c);
        let needs = self.needs(a);
        self.push(Op::Scale(a, c), value, needs)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.map(|x| x + c);
        let needs = self.needs(a);
        self.push(Op::AddConst(a, c), value, needs)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(softplus);
        let needs = self.needs(a);
        self.push(Op::Softplus(a), value, needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(sigmoid);
        let needs = self.needs(a);
        self.push(Op::Sigmoid(a), value, needs)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(f64::ln);
        let needs = self.needs(a);
        self.push(Op::Log(a), value, needs)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(f64::sqrt);
        let needs = self.needs(a);
        self.push(Op::Sqrt(a), value, needs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.nodes[a.0].value.data.iter().sum());
        let needs = self.needs(a);
        self.push(Op::Sum(a), value, needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let value = Tensor::scalar(t.data.iter().sum::<f64>() / t.numel() as f64);
        let needs = self.needs(a);
        self.push(Op::Mean(a), value, needs)
    }

    /// Mean squared difference of two same-shape tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean(sq)
    }

    // ---- structured ops ----

    /// 3x3 convolution (zero padding `pad`, the given stride) with bias.
    /// Input (Cin, H, W), weight (Cout, Cin, 3, 3), bias (Cout).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let value = conv2d_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
            stride,
            pad,
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Op::Conv2d { x, w, b, stride, pad }, value, needs)
    }

    /// Nearest-neighbor x2 upsampling of a (C, H, W) tensor.
    pub fn upsample2(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let (c, h, w) = t.dims3();
        let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
        for ci in 0..c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out.data[(ci * 2 * h + y) * 2 * w + x] = t.at3(ci, y / 2, x / 2);
                }
            }
        }
        let needs = self.needs(a);
        self.push(Op::Upsample2(a), out, needs)
    }

    /// Binomial 3x3 blur (clamped borders) followed by x2 decimation.
    pub fn pyr_down(&mut self, a: Var) -> Var {
        let value = pyr_down_forward(&self.nodes[a.0].value);
        let needs = self.needs(a);
        self.push(Op::PyrDown(a), value, needs)
    }

    /// Horizontal forward difference, same shape with a zero last column.
    pub fn dx(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let (c, h, w) = t.dims3();
        let mut out = Tensor::zeros(&[c, h, w]);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w.saturating_sub(1) {
                    out.data[(ci * h + y) * w + x] = t.at3(ci, y, x + 1) - t.at3(ci, y, x);
                }
            }
        }
        let needs = self.needs(a);
        self.push(Op::Dx(a), out, needs)
    }

    /// Vertical forward difference, same shape with a zero last row.
    pub fn dy(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let (c, h, w) = t.dims3();
        let mut out = Tensor::zeros(&[c, h, w]);
        for ci in 0..c {
            for y in 0..h.saturating_sub(1) {
                for x in 0..w {
                    out.data[(ci * h + y) * w + x] = t.at3(ci, y + 1, x) - t.at3(ci, y, x);
                }
            }
        }
        let needs = self.needs(a);
        self.push(Op::Dy(a), out, needs)
    }

    /// Gathers codebook rows per spatial site: indices are site-major over an
    /// h x w grid, output is (D, h, w). Gradients scatter-add into the
    /// codebook rows.
    pub fn embed(&mut self, codebook: Var, indices: &[usize], h: usize, w: usize) -> Var {
        let cb = &self.nodes[codebook.0].value;
        debug_assert_eq!(cb.shape.len(), 2);
        let d = cb.shape[1];
        debug_assert_eq!(indices.len(), h * w);
        let mut out = Tensor::zeros(&[d, h, w]);
        for (site, &k) in indices.iter().enumerate() {
            for di in 0..d {
                out.data[di * h * w + site] = cb.data[k * d + di];
            }
        }
        let needs = self.needs(codebook);
        self.push(
            Op::Embed {
                codebook,
                indices: indices.to_vec(),
                h,
                w,
            },
            out,
            needs,
        )
    }

    /// Channel concatenation of (Ci, H, W) tensors.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        let (_, h, w) = self.nodes[xs[0].0].value.dims3();
        let mut data = Vec::new();
        let mut c_total = 0;
        for &v in xs {
            let t = &self.nodes[v.0].value;
            let (c, th, tw) = t.dims3();
            debug_assert!(th == h && tw == w);
            c_total += c;
            data.extend_from_slice(&t.data);
        }
        let needs = xs.iter().any(|&v| self.needs(v));
        self.push(
            Op::ConcatC(xs.to_vec()),
            Tensor {
                shape: vec![c_total, h, w],
                data,
            },
            needs,
        )
    }

    // ---- backward ----

    /// Backpropagates from a scalar loss; returns per-node gradients
    /// (None for nodes the loss does not differentiably depend on).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::invalid("backward requires a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..self.nodes.len()).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.step_backward(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.data.iter_mut().zip(&contrib.data) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    /// Gradient contribution of a binary op result back to one operand,
    /// reducing over the broadcast when the operand is scalar.
    fn bcast_back(&self, operand: Var, per_element: Tensor) -> Tensor {
        let target = &self.nodes[operand.0].value;
        if target.same_shape(&per_element) {
            per_element
        } else {
            debug_assert!(target.is_scalar());
            Tensor::scalar(per_element.data.iter().sum())
        }
    }

    fn step_backward(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let shape_of = |v: Var| self.nodes[v.0].value.shape.clone();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, self.bcast_back(*a, g.clone()));
                self.accumulate(grads, *b, self.bcast_back(*b, g.clone()));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, self.bcast_back(*a, g.clone()));
                self.accumulate(grads, *b, self.bcast_back(*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                let ga = self.elementwise_with(g, *b, |gv, bv| gv * bv);
                let gb = self.elementwise_with(g, *a, |gv, av| gv * av);
                self.accumulate(grads, *a, self.bcast_back(*a, ga));
                self.accumulate(grads, *b, self.bcast_back(*b, gb));
            }
            Op::Div(a, b) => {
                let ga = self.elementwise_with(g, *b, |gv, bv| gv / bv);
                self.accumulate(grads, *a, self.bcast_back(*a, ga));
                let aval = &self.nodes[a.0].value;
                let bval = &self.nodes[b.0].value;
                let n = g.numel();
                let mut gb = Tensor::zeros(&g.shape);
                for i in 0..n {
                    let av = if aval.is_scalar() { aval.item() } else { aval.data[i] };
                    let bv = if bval.is_scalar() { bval.item() } else { bval.data[i] };
                    gb.data[i] = -g.data[i] * av / (bv * bv);
                }
                self.accumulate(grads, *b, self.bcast_back(*b, gb));
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| v * c)),
            Op::AddConst(a, _) => self.accumulate(grads, *a, g.clone()),
            Op::Softplus(a) => {
                let x = &self.nodes[a.0].value;
                let mut out = Tensor::zeros(&x.shape);
                for i in 0..x.numel() {
                    out.data[i] = g.data[i] * sigmoid(x.data[i]);
                }
                self.accumulate(grads, *a, out);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                let mut out = Tensor::zeros(&y.shape);
                for i in 0..y.numel() {
                    out.data[i] = g.data[i] * y.data[i] * (1.0 - y.data[i]);
                }
                self.accumulate(grads, *a, out);
            }
            Op::Log(a) => {
                let x = &self.nodes[a.0].value;
                let mut out = Tensor::zeros(&x.shape);
                for i in 0..x.numel() {
                    out.data[i] = g.data[i] / x.data[i];
                }
                self.accumulate(grads, *a, out);
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[id].value;
                let mut out = Tensor::zeros(&y.shape);
                for i in 0..y.numel() {
                    out.data[i] = g.data[i] * 0.5 / y.data[i];
                }
                self.accumulate(grads, *a, out);
            }
            Op::Sum(a) => {
                let shape = shape_of(*a);
                let gv = g.item();
                self.accumulate(
                    grads,
                    *a,
                    Tensor {
                        data: vec![gv; shape.iter().product()],
                        shape,
                    },
                );
            }
            Op::Mean(a) => {
                let shape = shape_of(*a);
                let n: usize = shape.iter().product();
                let gv = g.item() / n as f64;
                self.accumulate(
                    grads,
                    *a,
                    Tensor {
                        data: vec![gv; n],
                        shape,
                    },
                );
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (gx, gw, gb) = conv2d_backward(
                    &self.nodes[x.0].value,
                    &self.nodes[w.0].value,
                    g,
                    *stride,
                    *pad,
                );
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *w, gw);
                self.accumulate(grads, *b, gb);
            }
            Op::Upsample2(a) => {
                let (c, h, w) = self.nodes[a.0].value.dims3();
                let mut out = Tensor::zeros(&[c, h, w]);
                for ci in 0..c {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            out.data[(ci * h + y / 2) * w + x / 2] += g.data[(ci * 2 * h + y) * 2 * w + x];
                        }
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Op::PyrDown(a) => {
                self.accumulate(grads, *a, pyr_down_backward(&self.nodes[a.0].value, g));
            }
            Op::Dx(a) => {
                let (c, h, w) = self.nodes[a.0].value.dims3();
                let mut out = Tensor::zeros(&[c, h, w]);
                for ci in 0..c {
                    for y in 0..h {
                        for x in 0..w.saturating_sub(1) {
                            let gv = g.data[(ci * h + y) * w + x];
                            out.data[(ci * h + y) * w + x + 1] += gv;
                            out.data[(ci * h + y) * w + x] -= gv;
                        }
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Op::Dy(a) => {
                let (c, h, w) = self.nodes[a.0].value.dims3();
                let mut out = Tensor::zeros(&[c, h, w]);
                for ci in 0..c {
                    for y in 0..h.saturating_sub(1) {
                        for x in 0..w {
                            let gv = g.data[(ci * h + y) * w + x];
                            out.data[(ci * h + y + 1) * w + x] += gv;
                            out.data[(ci * h + y) * w + x] -= gv;
                        }
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Op::Embed { codebook, indices, h, w } => {
                let cb = &self.nodes[codebook.0].value;
                let d = cb.shape[1];
                let mut out = Tensor::zeros(&cb.shape);
                for (site, &k) in indices.iter().enumerate() {
                    for di in 0..d {
                        out.data[k * d + di] += g.data[di * h * w + site];
                    }
                }
                self.accumulate(grads, *codebook, out);
            }
            Op::ConcatC(xs) => {
                let (_, h, w) = self.nodes[id].value.dims3();
                let mut offset = 0usize;
                for &v in xs {
                    let (c, _, _) = self.nodes[v.0].value.dims3();
                    let len = c * h * w;
                    let part = Tensor {
                        shape: vec![c, h, w],
                        data: g.data[offset..offset + len].to_vec(),
                    };
                    self.accumulate(grads, v, part);
                    offset += len;
                }
            }
        }
    }

    /// g (elementwise) combined with the value of `other`, broadcasting a
    /// scalar `other`.
    fn elementwise_with(&self, g: &Tensor, other: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let o = &self.nodes[other.0].value;
        let mut out = Tensor::zeros(&g.shape);
        for i in 0..g.numel() {
            let ov = if o.is_scalar() { o.item() } else { o.data[i] };
            out.data[i] = f(g.data[i], ov);
        }
        out
    }
}

/// Per-node gradients from one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, materializing exact zeros for untouched nodes.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn softplus(x: f64) -> f64 {
    // stable: max(x,0) + ln(1 + exp(-|x|))
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (cin, h, win) = x.dims3();
    let (cout, cin_w, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    debug_assert_eq!(cin, cin_w);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (win + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[cout, oh, ow]);
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b.data[co];
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as i64 - pad as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as i64 - pad as i64;
                            if ix < 0 || ix >= win as i64 {
                                continue;
                            }
                            acc += w.data[((co * cin + ci) * kh + ky) * kw + kx]
                                * x.data[(ci * h + iy as usize) * win + ix as usize];
                        }
                    }
                }
                out.data[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

fn conv2d_backward(x: &Tensor, w: &Tensor, g: &Tensor, stride: usize, pad: usize) -> (Tensor, Tensor, Tensor) {
    let (cin, h, win) = x.dims3();
    let (cout, _, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    let (_, oh, ow) = g.dims3();
    let mut gx = Tensor::zeros(&x.shape);
    let mut gw = Tensor::zeros(&w.shape);
    let mut gb = Tensor::zeros(&[cout]);
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = g.data[(co * oh + oy) * ow + ox];
                gb.data[co] += gv;
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as i64 - pad as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as i64 - pad as i64;
                            if ix < 0 || ix >= win as i64 {
                                continue;
                            }
                            let xi = (ci * h + iy as usize) * win + ix as usize;
                            let wi = ((co * cin + ci) * kh + ky) * kw + kx;
                            gx.data[xi] += gv * w.data[wi];
                            gw.data[wi] += gv * x.data[xi];
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

const BINOMIAL3: [f64; 3] = [0.25, 0.5, 0.25];

fn pyr_down_forward(x: &Tensor) -> Tensor {
    let (c, h, w) = x.dims3();
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for (ky, &kyv) in BINOMIAL3.iter().enumerate() {
                    let iy = (2 * oy) as i64 + ky as i64 - 1;
                    let iy = iy.clamp(0, h as i64 - 1) as usize;
                    for (kx, &kxv) in BINOMIAL3.iter().enumerate() {
                        let ix = (2 * ox) as i64 + kx as i64 - 1;
                        let ix = ix.clamp(0, w as i64 - 1) as usize;
                        acc += kyv * kxv * x.data[(ci * h + iy) * w + ix];
                    }
                }
                out.data[(ci * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

fn pyr_down_backward(x: &Tensor, g: &Tensor) -> Tensor {
    let (c, h, w) = x.dims3();
    let (_, oh, ow) = g.dims3();
    let mut out = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = g.data[(ci * oh + oy) * ow + ox];
                for (ky, &kyv) in BINOMIAL3.iter().enumerate() {
                    let iy = ((2 * oy) as i64 + ky as i64 - 1).clamp(0, h as i64 - 1) as usize;
                    for (kx, &kxv) in BINOMIAL3.iter().enumerate() {
                        let ix = ((2 * ox) as i64 + kx as i64 - 1).clamp(0, w as i64 - 1) as usize;
                        out.data[(ci * h + iy) * w + ix] += gv * kyv * kxv;
                    }
                }
            }
        }
    }
    out
}

/// Nearest-codebook assignment per spatial site of a (D, h, w) feature map;
/// ties break toward the lowest index.
pub fn nearest_assignments(z: &Tensor, codebook: &Tensor) -> Vec<usize> {
    let (d, h, w) = z.dims3();
    let k = codebook.shape[0];
    debug_assert_eq!(codebook.shape[1], d);
    let sites = h * w;
    let mut out = Vec::with_capacity(sites);
    for site in 0..sites {
        let mut best = 0usize;
        let mut best_d2 = f64::INFINITY;
        for ki in 0..k {
            let mut d2 = 0.0;
            for di in 0..d {
                let diff = z.data[di * sites + site] - codebook.data[ki * d + di];
                d2 += diff * diff;
            }
            if d2 < best_d2 {
                best_d2 = d2;
                best = ki;
            }
        }
        out.push(best);
    }
    out
}

/// Records or replays the non-differentiable choices of one forward build:
/// detach values and quantizer assignments. Replaying makes the tape compute
/// the exact function whose gradient the recorded backward pass produced.
pub struct Routing {
    replay: bool,
    detached: Vec<Tensor>,
    assignments: Vec<Vec<usize>>,
    d_cursor: usize,
    a_cursor: usize,
}

impl Routing {
    pub fn record() -> Routing {
        Routing {
            replay: false,
            detached: Vec::new(),
            assignments: Vec::new(),
            d_cursor: 0,
            a_cursor: 0,
        }
    }

    /// Switches to replay from the start of the recorded choices.
    pub fn rewind_for_replay(&mut self) {
        self.replay = true;
        self.d_cursor = 0;
        self.a_cursor = 0;
    }

    /// Stop-gradient: value passes through, backpropagation does not. In
    /// replay mode the recorded value is substituted, holding the detached
    /// quantity at its base point.
    pub fn detach(&mut self, tape: &mut Tape, v: Var) -> Var {
        if self.replay {
            let t = self.detached[self.d_cursor].clone();
            self.d_cursor += 1;
            tape.constant(t)
        } else {
            let t = tape.value(v).clone();
            self.detached.push(t.clone());
            tape.constant(t)
        }
    }

    /// Quantizer routing: nearest-codebook indices, recorded or replayed.
    pub fn assign(&mut self, z: &Tensor, codebook: &Tensor) -> Vec<usize> {
        if self.replay {
            let idx = self.assignments[self.a_cursor].clone();
            self.a_cursor += 1;
            idx
        } else {
            let idx = nearest_assignments(z, codebook);
            self.assignments.push(idx.clone());
            idx
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences on a pure scalar function of one leaf.
    fn fd_check(build: impl Fn(&mut Tape, Var) -> Var, init: Tensor, tol: f64) {
        let mut tape = Tape::new();
        let x = tape.leaf(init.clone());
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(x).unwrap().clone();

        let h = 1e-6;
        for i in 0..init.numel() {
            let eval = |delta: f64| {
                let mut t = init.clone();
                t.data[i] += delta;
                let mut tape = Tape::new();
                let x = tape.leaf(t);
                let loss = build(&mut tape, x);
                tape.value(loss).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data[i];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!(
                (a - fd).abs() / denom < tol,
                "elem {i}: analytic {a} vs fd {fd}"
            );
        }
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let init = Tensor::randn(&[1, 2, 3], 0.5, &mut rng).map(|v| v + 1.5);
        fd_check(
            |t, x| {
                let sp = t.softplus(x);
                let lg = t.log(x);
                let sq = t.sqrt(x);
                let s = t.add(sp, lg);
                let s = t.add(s, sq);
                let sg = t.sigmoid(s);
                t.mean(sg)
            },
            init,
            1e-4,
        );
    }

    #[test]
    fn arithmetic_and_broadcast_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let init = Tensor::randn(&[1, 3, 3], 1.0, &mut rng).map(|v| v + 3.0);
        fd_check(
            |t, x| {
                let total = t.sum(x);
                let normalized = t.div(x, total); // broadcast scalar divisor
                let shifted = t.add_const(normalized, 0.1);
                let lg = t.log(shifted);
                let prod = t.mul(normalized, lg);
                let s = t.sum(prod);
                let sc = t.scale(s, -2.5);
                let sq = t.square(sc);
                t.mean(sq)
            },
            init,
            1e-4,
        );
    }

    #[test]
    fn conv_upsample_pyramid_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::randn(&[2, 4, 4], 1.0, &mut rng);
        let w0 = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut rng);
        let b0 = Tensor::randn(&[3], 0.5, &mut rng);

        // check each leaf in turn by rebuilding the graph
        let build = |tape: &mut Tape, x: Tensor, w: Tensor, b: Tensor, which: usize| -> (Var, Var) {
            let xv = tape.leaf(x);
            let wv = tape.leaf(w);
            let bv = tape.leaf(b);
            let conv = tape.conv2d(xv, wv, bv, 2, 1);
            let act = tape.softplus(conv);
            let up = tape.upsample2(act);
            let down = tape.pyr_down(up);
            let dgx = tape.dx(down);
            let dgy = tape.dy(down);
            let e1 = tape.square(dgx);
            let e2 = tape.square(dgy);
            let m1 = tape.mean(e1);
            let m2 = tape.mean(e2);
            let md = tape.mean(down);
            let s = tape.add(m1, m2);
            let loss = tape.add(s, md);
            (loss, [xv, wv, bv][which])
        };

        let h = 1e-6;
        for which in 0..3 {
            let mut tape = Tape::new();
            let (loss, leaf) = build(&mut tape, x0.clone(), w0.clone(), b0.clone(), which);
            let grads = tape.backward(loss).unwrap();
            let analytic = grads.get(leaf).unwrap().clone();
            let base = [x0.clone(), w0.clone(), b0.clone()];
            for i in 0..base[which].numel() {
                let eval = |delta: f64| {
                    let mut trio = base.clone();
                    trio[which].data[i] += delta;
                    let mut tape = Tape::new();
                    let (loss, _) =
                        build(&mut tape, trio[0].clone(), trio[1].clone(), trio[2].clone(), which);
                    tape.value(loss).item()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data[i];
                let denom = a.abs().max(fd.abs()).max(1e-6);
                assert!((a - fd).abs() / denom < 1e-4, "leaf {which} elem {i}: {a} vs {fd}");
            }
        }
    }

    #[test]
    fn embed_scatters_gradients_to_rows() {
        let mut tape = Tape::new();
        let cb = tape.leaf(Tensor::from_vec(&[3, 2], vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0]).unwrap());
        let emb = tape.embed(cb, &[2, 0, 2, 1], 2, 2);
        assert_eq!(tape.value(emb).shape, vec![2, 2, 2]);
        let s = tape.sum(emb);
        let grads = tape.backward(s).unwrap();
        let gcb = grads.get(cb).unwrap();
        // row 2 selected twice, rows 0 and 1 once; each selection passes both dims
        assert_eq!(gcb.data, vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn detach_blocks_gradient_and_replays_value() {
        let init = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let mut routing = Routing::record();
        let mut tape = Tape::new();
        let x = tape.leaf(init.clone());
        let d = routing.detach(&mut tape, x);
        let prod = tape.mul(x, d); // x * sg[x]
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        // d(x*sg[x])/dx = sg[x] = [1, 2]
        assert_eq!(grads.get(x).unwrap().data, vec![1.0, 2.0]);

        // replay substitutes the recorded detach value
        routing.rewind_for_replay();
        let mut tape2 = Tape::new();
        let shifted = Tensor::from_vec(&[2], vec![10.0, 20.0]).unwrap();
        let x2 = tape2.leaf(shifted);
        let d2 = routing.detach(&mut tape2, x2);
        assert_eq!(tape2.value(d2).data, vec![1.0, 2.0]);
    }

    #[test]
    fn constants_report_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(3.0));
        let x = tape.leaf(Tensor::scalar(2.0));
        let p = tape.mul(c, x);
        let grads = tape.backward(p).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get_or_zeros(c, &[1]).data, vec![0.0]);
        assert_eq!(grads.get(x).unwrap().data, vec![3.0]);
    }

    #[test]
    fn nearest_assignment_tie_breaks_low() {
        let cb = Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let z = Tensor::from_vec(&[2, 1, 3], vec![0.2, 0.5, 1.0, 0.1, 0.5, 1.0]).unwrap();
        // sites: (0.2,0.1) -> 0; (0.5,0.5) equidistant -> 0; (1.0,1.0) -> 1
        assert_eq!(nearest_assignments(&z, &cb), vec![0, 0, 1]);
    }
}
