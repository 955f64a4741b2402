//! Reverse-mode tape over [`Tensor4`] values.
//!
//! Every op appends a node holding its output and whatever it needs for the
//! backward pass. Inputs are never mutated; parameters enter the tape as copies
//! tagged with their [`ParamId`] so gradients can be routed back to the store.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore, Tensor4};
use crate::real::Real;
use crate::rng::RngStream;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm, dropout active.
    Train,
    /// Running statistics, dropout off.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub const fn same(k: usize) -> Self {
        Self { stride: 1, padding: k / 2, groups: 1 }
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Batch statistics gathered by a train-mode batch norm, applied to the
/// running buffers after the step.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningUpdate<T> {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub batch_mean: Vec<T>,
    /// Unbiased estimate.
    pub batch_var: Vec<T>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, invstd: Vec<T>, train: bool },
    Relu(Var),
    MaxPool { x: Var, argmax: Vec<usize> },
    AdaptiveAvgPool(Var),
    Upsample2x(Var),
    Bilinear(Var),
    Dropout { x: Var, mask: Vec<T> },
    Sigmoid(Var),
    Add(Var, Var),
    Concat(Vec<Var>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor4<T>,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    running: Vec<RunningUpdate<T>>,
}

/// Output range `[lo, hi)` of one spatial axis for which kernel tap `k` lands in bounds.
#[inline]
fn valid_range(k: usize, in_len: usize, out_len: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if in_len + pad > k { ((in_len + pad - k - 1) / stride + 1).min(out_len) } else { 0 };
    (lo, hi.max(lo))
}

/// Half-pixel bilinear taps along one axis: `(i0, i1, frac)` per output index.
fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let s = ((o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = libm::floor(s) as usize;
            ((i0), (i0 + 1).min(in_len - 1), s - i0 as f64)
        })
        .collect()
}

/// Adaptive pooling window `[start, end)` for output cell `o`.
#[inline]
fn pool_window(o: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let start = (o * in_len) / out_len;
    let end = ((o + 1) * in_len).div_ceil(out_len);
    (start, end.max(start + 1))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), running: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient routing.
    pub fn input(&mut self, value: Tensor4<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn running_updates(&self) -> &[RunningUpdate<T>] {
        &self.running
    }

    /// Cross-correlation with optional bias. `w` is `(out, in / groups, kh, kw)`,
    /// `b` is `(1, out, 1, 1)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let [n, cin, h, wd] = self.shape(x);
        let [cout, cin_pg, kh, kw] = self.shape(w);
        let ConvSpec { stride, padding: pad, groups } = spec;
        if stride == 0 || groups == 0 {
            return Err(Error::InvalidParameter(format!("conv stride {stride} / groups {groups} must be >= 1")));
        }
        if cin % groups != 0 || cout % groups != 0 || cin / groups != cin_pg {
            return Err(Error::Shape(format!(
                "conv input channels {cin} incompatible with weight {:?} and groups {groups}",
                self.shape(w)
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [1, cout, 1, 1] {
                return Err(Error::Shape(format!("conv bias {:?}, expected [1, {cout}, 1, 1]", self.shape(b))));
            }
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::Shape(format!("kernel {kh}x{kw} larger than padded input {h}x{wd}")));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let cout_pg = cout / groups;

        let xv = &self.nodes[x.0].value;
        let wv = self.nodes[w.0].value.data();
        let mut out = Tensor4::zeros([n, cout, oh, ow]);
        let out_plane = oh * ow;
        {
            let od = out.data_mut();
            for bn in 0..n {
                for oc in 0..cout {
                    let g = oc / cout_pg;
                    let plane = &mut od[(bn * cout + oc) * out_plane..(bn * cout + oc + 1) * out_plane];
                    if let Some(b) = b {
                        let bias = self.nodes[b.0].value.data()[oc];
                        plane.iter_mut().for_each(|v| *v = bias);
                    }
                    for icg in 0..cin_pg {
                        let inp = xv.channel(bn, g * cin_pg + icg);
                        for ky in 0..kh {
                            let (y0, y1) = valid_range(ky, h, oh, stride, pad);
                            for kx in 0..kw {
                                let wt = wv[((oc * cin_pg + icg) * kh + ky) * kw + kx];
                                let (x0, x1) = valid_range(kx, wd, ow, stride, pad);
                                if x0 >= x1 {
                                    continue;
                                }
                                for oy in y0..y1 {
                                    let iy = oy * stride + ky - pad;
                                    let in_row = &inp[iy * wd..(iy + 1) * wd];
                                    let out_row = &mut plane[oy * ow..(oy + 1) * ow];
                                    if stride == 1 {
                                        let shift = kx + x0 - pad;
                                        for (o, &i) in out_row[x0..x1].iter_mut().zip(&in_row[shift..shift + (x1 - x0)]) {
                                            *o += wt * i;
                                        }
                                    } else {
                                        for ox in x0..x1 {
                                            out_row[ox] += wt * in_row[ox * stride + kx - pad];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(out, Op::Conv2d { x, w, b, spec }))
    }

    /// Per-channel batch norm. In train mode normalizes with batch statistics and
    /// records a [`RunningUpdate`]; in eval mode uses the stored running buffers.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        store: &ParamStore<T>,
        running: (ParamId, ParamId),
        mode: Mode,
    ) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        for p in [gamma, beta] {
            if self.shape(p) != [1, c, 1, 1] {
                return Err(Error::Shape(format!("batch norm affine {:?}, expected [1, {c}, 1, 1]", self.shape(p))));
            }
        }
        let eps = T::lit(BN_EPS);
        let m = n * h * w;
        let xv = &self.nodes[x.0].value;
        let plane = h * w;
        let mut means = vec![T::zero(); c];
        let mut vars = vec![T::zero(); c];
        let train = mode == Mode::Train;
        if train {
            for ch in 0..c {
                let mut s = T::zero();
                for bn in 0..n {
                    s += xv.channel(bn, ch).iter().copied().sum::<T>();
                }
                let mean = s / T::lit(m as f64);
                let mut ss = T::zero();
                for bn in 0..n {
                    for &v in xv.channel(bn, ch) {
                        ss += (v - mean) * (v - mean);
                    }
                }
                means[ch] = mean;
                vars[ch] = ss / T::lit(m as f64);
            }
        } else {
            means.copy_from_slice(store.value(running.0).data());
            vars.copy_from_slice(store.value(running.1).data());
        }
        let invstd: Vec<T> = vars.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = self.nodes[gamma.0].value.data();
        let bv = self.nodes[beta.0].value.data();
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut out = Tensor4::zeros([n, c, h, w]);
        for bn in 0..n {
            for ch in 0..c {
                let base = (bn * c + ch) * plane;
                for (i, &v) in xv.channel(bn, ch).iter().enumerate() {
                    let xh = (v - means[ch]) * invstd[ch];
                    xhat[base + i] = xh;
                    out.data_mut()[base + i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        if train {
            let unbias = if m > 1 { T::lit(m as f64 / (m - 1) as f64) } else { T::one() };
            self.running.push(RunningUpdate {
                mean_id: running.0,
                var_id: running.1,
                batch_mean: means,
                batch_var: vars.iter().map(|&v| v * unbias).collect(),
            });
        }
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, xhat, invstd, train }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp_libm()));
        self.push(out, Op::Sigmoid(x))
    }

    /// `k x k` max pooling with the given stride, no padding. Ties keep the first maximum.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if k == 0 || stride == 0 || h < k || w < k {
            return Err(Error::Shape(format!("max pool {k}/{stride} on {h}x{w}")));
        }
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let xv = &self.nodes[x.0].value;
        let mut out = Tensor4::zeros([n, c, oh, ow]);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for bn in 0..n {
            for ch in 0..c {
                let inp = xv.channel(bn, ch);
                let base = (bn * c + ch) * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = oy * stride * w + ox * stride;
                        for dy in 0..k {
                            for dx in 0..k {
                                let idx = (oy * stride + dy) * w + ox * stride + dx;
                                if inp[idx] > inp[best] {
                                    best = idx;
                                }
                            }
                        }
                        let o = out.offset(bn, ch, oy, ox);
                        out.data_mut()[o] = inp[best];
                        argmax.push(base + best);
                    }
                }
            }
        }
        Ok(self.push(out, Op::MaxPool { x, argmax }))
    }

    /// Adaptive average pooling to `(oh, ow)`; windows may overlap or repeat when
    /// the output is larger than the input.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        if oh == 0 || ow == 0 {
            return Err(Error::Shape(format!("adaptive pool target {oh}x{ow}")));
        }
        let [n, c, h, w] = self.shape(x);
        let xv = &self.nodes[x.0].value;
        let mut out = Tensor4::zeros([n, c, oh, ow]);
        for bn in 0..n {
            for ch in 0..c {
                let inp = xv.channel(bn, ch);
                for oy in 0..oh {
                    let (y0, y1) = pool_window(oy, h, oh);
                    for ox in 0..ow {
                        let (x0, x1) = pool_window(ox, w, ow);
                        let mut s = T::zero();
                        for iy in y0..y1 {
                            s += inp[iy * w + x0..iy * w + x1].iter().copied().sum::<T>();
                        }
                        let o = out.offset(bn, ch, oy, ox);
                        out.data_mut()[o] = s / T::lit(((y1 - y0) * (x1 - x0)) as f64);
                    }
                }
            }
        }
        Ok(self.push(out, Op::AdaptiveAvgPool(x)))
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let xv = &self.nodes[x.0].value;
        let mut out = Tensor4::zeros([n, c, 2 * h, 2 * w]);
        for bn in 0..n {
            for ch in 0..c {
                let inp = xv.channel(bn, ch);
                for oy in 0..2 * h {
                    for ox in 0..2 * w {
                        let o = out.offset(bn, ch, oy, ox);
                        out.data_mut()[o] = inp[(oy / 2) * w + ox / 2];
                    }
                }
            }
        }
        self.push(out, Op::Upsample2x(x))
    }

    /// Half-pixel-centre bilinear resampling to `(oh, ow)`.
    pub fn bilinear_resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        if oh == 0 || ow == 0 {
            return Err(Error::Shape(format!("bilinear target {oh}x{ow}")));
        }
        let [n, c, h, w] = self.shape(x);
        let ty = bilinear_taps(h, oh);
        let tx = bilinear_taps(w, ow);
        let xv = &self.nodes[x.0].value;
        let mut out = Tensor4::zeros([n, c, oh, ow]);
        for bn in 0..n {
            for ch in 0..c {
                let inp = xv.channel(bn, ch);
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    let (fy, gy) = (T::lit(fy), T::lit(1.0 - fy));
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let (fx, gx) = (T::lit(fx), T::lit(1.0 - fx));
                        let top = inp[y0 * w + x0] * gx + inp[y0 * w + x1] * fx;
                        let bottom = inp[y1 * w + x0] * gx + inp[y1 * w + x1] * fx;
                        let o = out.offset(bn, ch, oy, ox);
                        out.data_mut()[o] = top * gy + bottom * fy;
                    }
                }
            }
        }
        Ok(self.push(out, Op::Bilinear(x)))
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - rate)` so eval is the identity.
    pub fn dropout(&mut self, x: Var, rate: f64, mode: Mode, rng: Option<&mut RngStream>) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidParameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let rng = rng.ok_or_else(|| Error::Config("train-mode dropout needs a random stream".into()))?;
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).numel()).map(|_| if rng.bernoulli(rate) { T::zero() } else { keep }).collect();
        let xv = self.value(x);
        let data: Vec<T> = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor4::from_vec(xv.shape(), data)?;
        Ok(self.push(out, Op::Dropout { x, mask }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("add {:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Concatenation along channels.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let [n, _, h, w] = self.shape(first);
        let mut c_total = 0;
        for &p in parts {
            let [pn, pc, ph, pw] = self.shape(p);
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::Shape(format!("concat {:?} with {:?}", self.shape(first), self.shape(p))));
            }
            c_total += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * c_total * plane);
        for bn in 0..n {
            for &p in parts {
                let v = self.value(p);
                let c = v.shape()[1];
                data.extend_from_slice(&v.data()[bn * c * plane..(bn + 1) * c * plane]);
            }
        }
        let out = Tensor4::from_vec([n, c_total, h, w], data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Back-propagates `seed` (d loss / d output) and returns per-node gradients.
    pub fn backward(&self, output: Var, seed: Tensor4<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(output) {
            return Err(Error::Shape(format!("seed {:?} vs output {:?}", seed.shape(), self.shape(output))));
        }
        let mut grads: Vec<Option<Tensor4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else { continue };
            let node = &self.nodes[i];
            self.backward_node(node, g, lower);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor4<T>, grads: &mut [Option<Tensor4<T>>]) {
        fn slot<T: Real>(grads: &mut [Option<Tensor4<T>>], v: Var, shape: [usize; 4]) -> &mut Tensor4<T> {
            grads[v.0].get_or_insert_with(|| Tensor4::zeros(shape))
        }
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Relu(x) => {
                let xs = self.value(*x);
                let gx = slot(grads, *x, xs.shape());
                for ((d, &gv), &xv) in gx.data_mut().iter_mut().zip(g.data()).zip(xs.data()) {
                    if xv > T::zero() {
                        *d += gv;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let gx = slot(grads, *x, y.shape());
                for ((d, &gv), &yv) in gx.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                    *d += gv * yv * (T::one() - yv);
                }
            }
            Op::Add(a, b) => {
                slot(grads, *a, g.shape()).add_assign(g);
                slot(grads, *b, g.shape()).add_assign(g);
            }
            Op::Dropout { x, mask } => {
                let gx = slot(grads, *x, g.shape());
                for ((d, &gv), &m) in gx.data_mut().iter_mut().zip(g.data()).zip(mask) {
                    *d += gv * m;
                }
            }
            Op::Concat(parts) => {
                let [n, c_total, h, w] = g.shape();
                let plane = h * w;
                let mut c_off = 0;
                for &p in parts {
                    let ps = self.shape(p);
                    let c = ps[1];
                    let gp = slot(grads, p, ps);
                    for bn in 0..n {
                        let src = &g.data()[(bn * c_total + c_off) * plane..(bn * c_total + c_off + c) * plane];
                        let dst = &mut gp.data_mut()[bn * c * plane..(bn + 1) * c * plane];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    c_off += c;
                }
            }
            Op::MaxPool { x, argmax } => {
                let gx = slot(grads, *x, self.shape(*x));
                for (&idx, &gv) in argmax.iter().zip(g.data()) {
                    gx.data_mut()[idx] += gv;
                }
            }
            Op::AdaptiveAvgPool(x) => {
                let [n, c, h, w] = self.shape(*x);
                let [_, _, oh, ow] = g.shape();
                let gx = slot(grads, *x, [n, c, h, w]);
                for bn in 0..n {
                    for ch in 0..c {
                        let base = (bn * c + ch) * h * w;
                        for oy in 0..oh {
                            let (y0, y1) = pool_window(oy, h, oh);
                            for ox in 0..ow {
                                let (x0, x1) = pool_window(ox, w, ow);
                                let share = g.at(bn, ch, oy, ox) / T::lit(((y1 - y0) * (x1 - x0)) as f64);
                                for iy in y0..y1 {
                                    for d in &mut gx.data_mut()[base + iy * w + x0..base + iy * w + x1] {
                                        *d += share;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Upsample2x(x) => {
                let [n, c, h, w] = self.shape(*x);
                let gx = slot(grads, *x, [n, c, h, w]);
                for bn in 0..n {
                    for ch in 0..c {
                        let base = (bn * c + ch) * h * w;
                        for oy in 0..2 * h {
                            for ox in 0..2 * w {
                                gx.data_mut()[base + (oy / 2) * w + ox / 2] += g.at(bn, ch, oy, ox);
                            }
                        }
                    }
                }
            }
            Op::Bilinear(x) => {
                let [n, c, h, w] = self.shape(*x);
                let [_, _, oh, ow] = g.shape();
                let ty = bilinear_taps(h, oh);
                let tx = bilinear_taps(w, ow);
                let gx = slot(grads, *x, [n, c, h, w]);
                for bn in 0..n {
                    for ch in 0..c {
                        let base = (bn * c + ch) * h * w;
                        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                            let (fy, gy) = (T::lit(fy), T::lit(1.0 - fy));
                            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                                let (fx, gxw) = (T::lit(fx), T::lit(1.0 - fx));
                                let gv = g.at(bn, ch, oy, ox);
                                let d = gx.data_mut();
                                d[base + y0 * w + x0] += gv * gy * gxw;
                                d[base + y0 * w + x1] += gv * gy * fx;
                                d[base + y1 * w + x0] += gv * fy * gxw;
                                d[base + y1 * w + x1] += gv * fy * fx;
                            }
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, invstd, train } => {
                let [n, c, h, w] = self.shape(*x);
                let plane = h * w;
                let m = T::lit((n * plane) as f64);
                let gv = self.value(*gamma).data().to_vec();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bn in 0..n {
                    for ch in 0..c {
                        let base = (bn * c + ch) * plane;
                        for i in 0..plane {
                            let dy = g.data()[base + i];
                            dgamma[ch] += dy * xhat[base + i];
                            dbeta[ch] += dy;
                        }
                    }
                }
                let gx = slot(grads, *x, [n, c, h, w]);
                for bn in 0..n {
                    for ch in 0..c {
                        let base = (bn * c + ch) * plane;
                        for i in 0..plane {
                            let dy = g.data()[base + i];
                            let d = if *train {
                                // d/dx of gamma * (x - mean) * invstd with batch statistics
                                gv[ch] * invstd[ch] / m * (m * dy - dbeta[ch] - xhat[base + i] * dgamma[ch])
                            } else {
                                gv[ch] * invstd[ch] * dy
                            };
                            gx.data_mut()[base + i] += d;
                        }
                    }
                }
                let gg = slot(grads, *gamma, [1, c, 1, 1]);
                for (d, &v) in gg.data_mut().iter_mut().zip(&dgamma) {
                    *d += v;
                }
                let gb = slot(grads, *beta, [1, c, 1, 1]);
                for (d, &v) in gb.data_mut().iter_mut().zip(&dbeta) {
                    *d += v;
                }
            }
            Op::Conv2d { x, w, b, spec } => self.conv_backward(*x, *w, *b, *spec, g, grads),
        }
    }

    fn conv_backward(&self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec, g: &Tensor4<T>, grads: &mut [Option<Tensor4<T>>]) {
        let xv = self.value(x);
        let wv = self.value(w);
        let [n, cin, h, wd] = xv.shape();
        let [cout, cin_pg, kh, kw] = wv.shape();
        let [_, _, oh, ow] = g.shape();
        let ConvSpec { stride, padding: pad, groups } = spec;
        let cout_pg = cout / groups;
        let out_plane = oh * ow;

        if let Some(b) = b {
            let gb = grads[b.0].get_or_insert_with(|| Tensor4::zeros([1, cout, 1, 1]));
            for bn in 0..n {
                for oc in 0..cout {
                    gb.data_mut()[oc] += g.channel(bn, oc).iter().copied().sum::<T>();
                }
            }
        }

        let mut dw = vec![T::zero(); wv.numel()];
        let mut dx = vec![T::zero(); xv.numel()];
        for bn in 0..n {
            for oc in 0..cout {
                let grp = oc / cout_pg;
                let gplane = &g.data()[(bn * cout + oc) * out_plane..(bn * cout + oc + 1) * out_plane];
                for icg in 0..cin_pg {
                    let ic = grp * cin_pg + icg;
                    let inp = xv.channel(bn, ic);
                    let dx_plane = &mut dx[(bn * cin + ic) * h * wd..(bn * cin + ic + 1) * h * wd];
                    for ky in 0..kh {
                        let (y0, y1) = valid_range(ky, h, oh, stride, pad);
                        for kx in 0..kw {
                            let widx = ((oc * cin_pg + icg) * kh + ky) * kw + kx;
                            let wt = wv.data()[widx];
                            let (x0, x1) = valid_range(kx, wd, ow, stride, pad);
                            if x0 >= x1 {
                                continue;
                            }
                            let mut acc = T::zero();
                            for oy in y0..y1 {
                                let iy = oy * stride + ky - pad;
                                let g_row = &gplane[oy * ow..(oy + 1) * ow];
                                let in_row = &inp[iy * wd..(iy + 1) * wd];
                                let dx_row = &mut dx_plane[iy * wd..(iy + 1) * wd];
                                if stride == 1 {
                                    let shift = kx + x0 - pad;
                                    let span = x1 - x0;
                                    for ((&gv, &iv), d) in g_row[x0..x1]
                                        .iter()
                                        .zip(&in_row[shift..shift + span])
                                        .zip(dx_row[shift..shift + span].iter_mut())
                                    {
                                        acc += gv * iv;
                                        *d += wt * gv;
                                    }
                                } else {
                                    for ox in x0..x1 {
                                        let ix = ox * stride + kx - pad;
                                        acc += g_row[ox] * in_row[ix];
                                        dx_row[ix] += wt * g_row[ox];
                                    }
                                }
                            }
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
        let gw = grads[w.0].get_or_insert_with(|| Tensor4::zeros(wv.shape()));
        for (d, v) in gw.data_mut().iter_mut().zip(dw) {
            *d += v;
        }
        let gx = grads[x.0].get_or_insert_with(|| Tensor4::zeros(xv.shape()));
        for (d, v) in gx.data_mut().iter_mut().zip(dx) {
            *d += v;
        }
    }

    /// Adds parameter-node gradients into the store's `grad` tensors.
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) {
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                let e = store.entry_mut(*id);
                e.grad.add_assign(g);
                e.has_grad = true;
            }
        }
    }

    /// Blends recorded batch statistics into the running buffers.
    pub fn apply_running_updates(&self, store: &mut ParamStore<T>) {
        let mom = T::lit(BN_MOMENTUM);
        for u in &self.running {
            for (r, &b) in store.entry_mut(u.mean_id).value.data_mut().iter_mut().zip(&u.batch_mean) {
                *r = (T::one() - mom) * *r + mom * b;
            }
            for (r, &b) in store.entry_mut(u.var_id).value.data_mut().iter_mut().zip(&u.batch_var) {
                *r = (T::one() - mom) * *r + mom * b;
            }
        }
    }
}

#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor4<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor4<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}
