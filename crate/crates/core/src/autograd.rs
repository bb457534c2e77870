//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! tape in reverse. Leaves created with [`Graph::param`] receive gradients,
//! leaves created with [`Graph::input`] are constants. Binary elementwise ops
//! broadcast numpy-style over the four axes.

use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    LogSigmoid,
    Elu,
    Square,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Unary(Var, Unary),
    MinConst(Var, T),
    Clamp(Var, T, T),
    ConcatElu(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, pad: usize },
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Var, Var),
    SliceChannels(Var, usize),
    InstanceNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T> },
    SpaceToDepth(Var),
    DepthToSpace(Var),
    SumPerSample(Var),
    SumAll(Var),
    MeanAll(Var),
    GlobalAvgPool(Var),
    SoftmaxCrossEntropy { logits: Var, probs: Vec<T>, labels: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub const NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn broadcast_shape(a: Shape, b: Shape) -> Shape {
    let mut out = [0; 4];
    for d in 0..4 {
        out[d] = if a[d] == b[d] {
            a[d]
        } else if a[d] == 1 {
            b[d]
        } else if b[d] == 1 {
            a[d]
        } else {
            panic!("shapes {a:?} and {b:?} do not broadcast");
        };
    }
    out
}

fn bcast_strides(shape: Shape) -> [usize; 4] {
    let full = [shape[1] * shape[2] * shape[3], shape[2] * shape[3], shape[3], 1];
    let mut s = [0; 4];
    for d in 0..4 {
        s[d] = if shape[d] == 1 { 0 } else { full[d] };
    }
    s
}

/// Visits every output index of a broadcast pair with the matching input offsets.
fn for_each_bcast(out: Shape, a: Shape, b: Shape, mut f: impl FnMut(usize, usize, usize)) {
    let sa = bcast_strides(a);
    let sb = bcast_strides(b);
    let mut o = 0;
    for n in 0..out[0] {
        for c in 0..out[1] {
            for h in 0..out[2] {
                let ba = n * sa[0] + c * sa[1] + h * sa[2];
                let bb = n * sb[0] + c * sb[1] + h * sb[2];
                for w in 0..out[3] {
                    f(o, ba + w * sa[3], bb + w * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

fn binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(a.shape(), b.shape());
    let mut out = Tensor::zeros(shape);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for_each_bcast(shape, a.shape(), b.shape(), |o, ia, ib| od[o] = f(ad[ia], bd[ib]));
    out
}

/// Sums `g` down to `shape` over the broadcast axes.
fn reduce_to<T: Scalar>(g: &Tensor<T>, shape: Shape) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Tensor::zeros(shape);
    let gd = g.data();
    let od = out.data_mut();
    for_each_bcast(g.shape(), shape, shape, |o, i, _| od[i] = od[i] + gd[o]);
    out
}

fn log_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn elu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x.exp_m1()
    }
}

fn elu_grad<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        x.exp()
    }
}

/// Unfolds one sample `[cin, h, w]` into `[cin·kh·kw, oh·ow]` columns.
#[allow(clippy::too_many_arguments)]
/// Output columns `[lo, hi)` whose input column `ox + kx − pad` is in bounds.
fn valid_cols(ow: usize, w: usize, kx: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).min(ow);
    let hi = (w + pad).saturating_sub(kx).min(ow).max(lo);
    (lo, hi)
}

fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    cols: &mut [T],
) {
    let oh = h + 2 * pad + 1 - kh;
    let ow = w + 2 * pad + 1 - kw;
    let mut row = 0;
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let (lo, hi) = valid_cols(ow, w, kx, pad);
                    line[..lo].fill(T::zero());
                    line[lo..hi].copy_from_slice(&src[lo + kx - pad..hi + kx - pad]);
                    line[hi..].fill(T::zero());
                }
                row += 1;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    cols: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    x: &mut [T],
) {
    let oh = h + 2 * pad + 1 - kh;
    let ow = w + 2 * pad + 1 - kw;
    let mut row = 0;
    for ci in 0..cin {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &src[oy * ow..(oy + 1) * ow];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let (lo, hi) = valid_cols(ow, w, kx, pad);
                    for (d, &v) in dst[lo + kx - pad..hi + kx - pad].iter_mut().zip(&line[lo..hi]) {
                        *d = *d + v;
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn space_to_depth<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor::zeros([n, c * 4, h / 2, w / 2]);
    for s in 0..n {
        for ci in 0..c {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            out.set([s, ci * 4 + dy * 2 + dx, i, j], x.at([s, ci, 2 * i + dy, 2 * j + dx]));
                        }
                    }
                }
            }
        }
    }
    out
}

fn depth_to_space<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c4, h, w] = x.shape();
    let c = c4 / 4;
    let mut out = Tensor::zeros([n, c, h * 2, w * 2]);
    for s in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            out.set([s, ci, 2 * i + dy, 2 * j + dx], x.at([s, ci * 4 + dy * 2 + dx, i, j]));
                        }
                    }
                }
            }
        }
    }
    out
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = binary(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = binary(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = binary(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let v = self.value(a).map(|x| x * k);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, k), ng)
    }

    pub fn offset(&mut self, a: Var, k: T) -> Var {
        let v = self.value(a).map(|x| x + k);
        let ng = self.ng(a);
        self.push(v, Op::Offset(a), ng)
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(T) -> T = match kind {
            Unary::Neg => |x: T| -x,
            Unary::Exp => |x: T| x.exp(),
            Unary::Log => |x: T| x.ln(),
            Unary::Tanh => |x: T| x.tanh(),
            Unary::Sigmoid => sigmoid,
            Unary::LogSigmoid => log_sigmoid,
            Unary::Elu => elu,
            Unary::Square => |x: T| x * x,
        };
        let v = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(v, Op::Unary(a, kind), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Neg)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::LogSigmoid)
    }
    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Elu)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    /// `min(a, k)`; the gradient is zero wherever `a ≥ k`.
    pub fn min_const(&mut self, a: Var, k: T) -> Var {
        let v = self.value(a).map(|x| x.min(k));
        let ng = self.ng(a);
        self.push(v, Op::MinConst(a, k), ng)
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        let ng = self.ng(a);
        self.push(v, Op::Clamp(a, lo, hi), ng)
    }

    /// `concat(ELU(x), ELU(−x))` along channels.
    pub fn concat_elu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let [n, c, h, w] = x.shape();
        let plane = c * h * w;
        let mut out = Tensor::zeros([n, 2 * c, h, w]);
        for s in 0..n {
            let src = x.sample(s);
            let dst = out.sample_mut(s);
            for i in 0..plane {
                dst[i] = elu(src[i]);
                dst[plane + i] = elu(-src[i]);
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::ConcatElu(a), ng)
    }

    /// Stride-1 convolution; `w` is `[cout, cin, kh, kw]`, `b` is `[1, cout, 1, 1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let [n, cin, h, wd] = xv.shape();
        let [cout, wcin, kh, kw] = wv.shape();
        assert_eq!(cin, wcin, "conv2d: input has {cin} channels, kernel expects {wcin}");
        let oh = h + 2 * pad + 1 - kh;
        let ow = wd + 2 * pad + 1 - kw;
        let k = cin * kh * kw;
        let hw = oh * ow;
        let mut out = Tensor::zeros([n, cout, oh, ow]);
        let direct = kh == 1 && kw == 1 && pad == 0;
        let mut cols = if direct { Vec::new() } else { vec![T::zero(); k * hw] };
        for s in 0..n {
            let colref: &[T] = if direct {
                xv.sample(s)
            } else {
                im2col(xv.sample(s), cin, h, wd, kh, kw, pad, &mut cols);
                &cols
            };
            T::gemm(
                cout,
                k,
                hw,
                wv.data(),
                (k as isize, 1),
                colref,
                (hw as isize, 1),
                T::zero(),
                out.sample_mut(s),
                (hw as isize, 1),
            );
        }
        if let Some(b) = b {
            let bv = self.value(b).data().to_vec();
            assert_eq!(bv.len(), cout, "conv2d: bias length");
            for s in 0..n {
                let d = out.sample_mut(s);
                for (co, &bias) in bv.iter().enumerate() {
                    for v in &mut d[co * hw..(co + 1) * hw] {
                        *v = *v + bias;
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Conv2d { x, w, b, pad }, ng)
    }

    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let [n, c, h, w] = x.shape();
        let quarter = T::lit(0.25);
        let out = Tensor::from_fn([n, c, h / 2, w / 2], |[s, ci, i, j]| {
            (x.at([s, ci, 2 * i, 2 * j])
                + x.at([s, ci, 2 * i + 1, 2 * j])
                + x.at([s, ci, 2 * i, 2 * j + 1])
                + x.at([s, ci, 2 * i + 1, 2 * j + 1]))
                * quarter
        });
        let ng = self.ng(a);
        self.push(out, Op::AvgPool2(a), ng)
    }

    pub fn upsample2(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let [n, c, h, w] = x.shape();
        let out = Tensor::from_fn([n, c, h * 2, w * 2], |[s, ci, i, j]| x.at([s, ci, i / 2, j / 2]));
        let ng = self.ng(a);
        self.push(out, Op::Upsample2(a), ng)
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let [n, ca, h, w] = av.shape();
        let [nb, cb, hb, wb] = bv.shape();
        assert_eq!((n, h, w), (nb, hb, wb), "concat: mismatched batch or spatial dims");
        let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
        for s in 0..n {
            data.extend_from_slice(av.sample(s));
            data.extend_from_slice(bv.sample(s));
        }
        let out = Tensor::from_vec([n, ca + cb, h, w], data).expect("concat shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Concat(a, b), ng)
    }

    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let [n, c, h, w] = x.shape();
        assert!(start + len <= c, "slice_channels out of range");
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for s in 0..n {
            data.extend_from_slice(&x.sample(s)[start * plane..(start + len) * plane]);
        }
        let out = Tensor::from_vec([n, len, h, w], data).expect("slice shape");
        let ng = self.ng(a);
        self.push(out, Op::SliceChannels(a, start), ng)
    }

    /// Per-sample, per-channel normalization over the spatial axes followed by
    /// a per-channel affine map (`gamma`, `beta` are `[1, C, 1, 1]`).
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let m = h * w;
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Tensor::zeros([n, c, h, w]);
        let mut means = Vec::with_capacity(n * c);
        let mut rstds = Vec::with_capacity(n * c);
        let mf = T::lit(m as f64);
        let eps = T::lit(NORM_EPS);
        for s in 0..n {
            let src = xv.sample(s);
            let dst = out.sample_mut(s);
            for ci in 0..c {
                let p = &src[ci * m..(ci + 1) * m];
                let mean = p.iter().copied().sum::<T>() / mf;
                let var = p.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
                let rstd = T::one() / (var + eps).sqrt();
                for (o, &v) in dst[ci * m..(ci + 1) * m].iter_mut().zip(p) {
                    *o = gv[ci] * (v - mean) * rstd + bv[ci];
                }
                means.push(mean);
                rstds.push(rstd);
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(out, Op::InstanceNorm { x, gamma, beta, mean: means, rstd: rstds }, ng)
    }

    /// `c×h×w → 4c×(h/2)×(w/2)`.
    pub fn space_to_depth(&mut self, a: Var) -> Var {
        let v = space_to_depth(self.value(a));
        let ng = self.ng(a);
        self.push(v, Op::SpaceToDepth(a), ng)
    }

    pub fn depth_to_space(&mut self, a: Var) -> Var {
        let v = depth_to_space(self.value(a));
        let ng = self.ng(a);
        self.push(v, Op::DepthToSpace(a), ng)
    }

    /// `[N, ...] → [N, 1, 1, 1]`.
    pub fn sum_per_sample(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.shape()[0];
        let data = (0..n).map(|s| x.sample(s).iter().copied().sum()).collect();
        let out = Tensor::from_vec([n, 1, 1, 1], data).expect("per-sample shape");
        let ng = self.ng(a);
        self.push(out, Op::SumPerSample(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor::scalar(x.sum() / T::lit(x.len() as f64));
        let ng = self.ng(a);
        self.push(v, Op::MeanAll(a), ng)
    }

    /// `[N, C, H, W] → [N, C, 1, 1]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let [n, c, h, w] = x.shape();
        let m = T::lit((h * w) as f64);
        let out = Tensor::from_fn([n, c, 1, 1], |[s, ci, _, _]| {
            x.sample(s)[ci * h * w..(ci + 1) * h * w].iter().copied().sum::<T>() / m
        });
        let ng = self.ng(a);
        self.push(out, Op::GlobalAvgPool(a), ng)
    }

    /// Mean pixelwise cross-entropy of channel-softmax `logits` against
    /// `labels` (one class index per `(n, h, w)` in row-major order).
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let x = self.value(logits);
        let [n, k, h, w] = x.shape();
        let plane = h * w;
        assert_eq!(labels.len(), n * plane, "one label per pixel");
        let probs = softmax_channels(x);
        let mut loss = T::zero();
        let tiny = T::min_positive_value();
        for s in 0..n {
            let p = probs.sample(s);
            for i in 0..plane {
                let lab = labels[s * plane + i];
                assert!(lab < k, "label {lab} out of range for {k} classes");
                loss = loss - p[lab * plane + i].max(tiny).ln();
            }
        }
        let v = Tensor::scalar(loss / T::lit((n * plane) as f64));
        let ng = self.ng(logits);
        self.push(
            v,
            Op::SoftmaxCrossEntropy { logits, probs: probs.into_vec(), labels: labels.to_vec() },
            ng,
        )
    }

    /// Reverse sweep from `root`, seeding with ones of `root`'s shape.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot => *slot = Some(t),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, reduce_to(g, self.shape(*a)));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, reduce_to(g, self.shape(*b)));
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, reduce_to(g, self.shape(*a)));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, reduce_to(&g.map(|v| -v), self.shape(*b)));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if av.shape() == bv.shape() {
                    if self.ng(*a) {
                        self.acc(grads, *a, g.zip_map(bv, |x, y| x * y));
                    }
                    if self.ng(*b) {
                        self.acc(grads, *b, g.zip_map(av, |x, y| x * y));
                    }
                } else {
                    let mut ga = Tensor::zeros(av.shape());
                    let mut gb = Tensor::zeros(bv.shape());
                    {
                        let (ad, bd, gd) = (av.data(), bv.data(), g.data());
                        let gad = ga.data_mut();
                        let gbd = gb.data_mut();
                        for_each_bcast(g.shape(), av.shape(), bv.shape(), |o, ia, ib| {
                            gad[ia] = gad[ia] + gd[o] * bd[ib];
                            gbd[ib] = gbd[ib] + gd[o] * ad[ia];
                        });
                    }
                    self.acc(grads, *a, ga);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Scale(a, k) => {
                let k = *k;
                self.acc(grads, *a, g.map(|v| v * k));
            }
            Op::Offset(a) => self.acc(grads, *a, g.clone()),
            Op::Unary(a, kind) => {
                let x = self.value(*a);
                let gx = match kind {
                    Unary::Neg => g.map(|v| -v),
                    Unary::Exp => g.zip_map(out, |gv, y| gv * y),
                    Unary::Log => g.zip_map(x, |gv, xv| gv / xv),
                    Unary::Tanh => g.zip_map(out, |gv, y| gv * (T::one() - y * y)),
                    Unary::Sigmoid => g.zip_map(out, |gv, y| gv * y * (T::one() - y)),
                    Unary::LogSigmoid => g.zip_map(x, |gv, xv| gv * sigmoid(-xv)),
                    Unary::Elu => g.zip_map(x, |gv, xv| gv * elu_grad(xv)),
                    Unary::Square => g.zip_map(x, |gv, xv| gv * (xv + xv)),
                };
                self.acc(grads, *a, gx);
            }
            Op::MinConst(a, k) => {
                let k = *k;
                let gx = g.zip_map(self.value(*a), |gv, xv| if xv < k { gv } else { T::zero() });
                self.acc(grads, *a, gx);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let gx = g.zip_map(self.value(*a), |gv, xv| if xv >= lo && xv <= hi { gv } else { T::zero() });
                self.acc(grads, *a, gx);
            }
            Op::ConcatElu(a) => {
                let x = self.value(*a);
                let [n, c, h, w] = x.shape();
                let plane = c * h * w;
                let mut gx = Tensor::zeros(x.shape());
                for s in 0..n {
                    let xs = x.sample(s);
                    let gs = g.sample(s);
                    let d = gx.sample_mut(s);
                    for i in 0..plane {
                        d[i] = gs[i] * elu_grad(xs[i]) - gs[plane + i] * elu_grad(-xs[i]);
                    }
                }
                self.acc(grads, *a, gx);
            }
            Op::Conv2d { x, w, b, pad } => self.conv2d_backward(g, *x, *w, *b, *pad, grads),
            Op::AvgPool2(a) => {
                let quarter = T::lit(0.25);
                let gx = Tensor::from_fn(self.shape(*a), |[s, c, i, j]| g.at([s, c, i / 2, j / 2]) * quarter);
                self.acc(grads, *a, gx);
            }
            Op::Upsample2(a) => {
                let gx = Tensor::from_fn(self.shape(*a), |[s, c, i, j]| {
                    g.at([s, c, 2 * i, 2 * j])
                        + g.at([s, c, 2 * i + 1, 2 * j])
                        + g.at([s, c, 2 * i, 2 * j + 1])
                        + g.at([s, c, 2 * i + 1, 2 * j + 1])
                });
                self.acc(grads, *a, gx);
            }
            Op::Concat(a, b) => {
                let ca = self.shape(*a)[1];
                let cb = self.shape(*b)[1];
                let [n, _, h, w] = g.shape();
                let plane = h * w;
                if self.ng(*a) {
                    let mut d = Vec::with_capacity(n * ca * plane);
                    for s in 0..n {
                        d.extend_from_slice(&g.sample(s)[..ca * plane]);
                    }
                    self.acc(grads, *a, Tensor::from_vec([n, ca, h, w], d).expect("concat grad"));
                }
                if self.ng(*b) {
                    let mut d = Vec::with_capacity(n * cb * plane);
                    for s in 0..n {
                        d.extend_from_slice(&g.sample(s)[ca * plane..]);
                    }
                    self.acc(grads, *b, Tensor::from_vec([n, cb, h, w], d).expect("concat grad"));
                }
            }
            Op::SliceChannels(a, start) => {
                let shape = self.shape(*a);
                let len = g.shape()[1];
                let plane = shape[2] * shape[3];
                let mut gx = Tensor::zeros(shape);
                for s in 0..shape[0] {
                    gx.sample_mut(s)[start * plane..(start + len) * plane].copy_from_slice(g.sample(s));
                }
                self.acc(grads, *a, gx);
            }
            Op::InstanceNorm { x, gamma, beta, mean, rstd } => {
                let xv = self.value(*x);
                let gam = self.value(*gamma).data();
                let [n, c, h, w] = xv.shape();
                let m = h * w;
                let mf = T::lit(m as f64);
                let mut gx = Tensor::zeros(xv.shape());
                let mut gg = Tensor::zeros([1, c, 1, 1]);
                let mut gb = Tensor::zeros([1, c, 1, 1]);
                for s in 0..n {
                    let xs = xv.sample(s);
                    let gs = g.sample(s);
                    let dst = gx.sample_mut(s);
                    for ci in 0..c {
                        let (mu, r) = (mean[s * c + ci], rstd[s * c + ci]);
                        let range = ci * m..(ci + 1) * m;
                        let mut sum_g = T::zero();
                        let mut sum_gx = T::zero();
                        for (&xv, &gv) in xs[range.clone()].iter().zip(&gs[range.clone()]) {
                            let xhat = (xv - mu) * r;
                            sum_g = sum_g + gv;
                            sum_gx = sum_gx + gv * xhat;
                        }
                        gg.data_mut()[ci] = gg.data()[ci] + sum_gx;
                        gb.data_mut()[ci] = gb.data()[ci] + sum_g;
                        let k = gam[ci] * r / mf;
                        for ((o, &xv), &gv) in dst[range.clone()].iter_mut().zip(&xs[range.clone()]).zip(&gs[range]) {
                            let xhat = (xv - mu) * r;
                            *o = k * (mf * gv - sum_g - xhat * sum_gx);
                        }
                    }
                }
                self.acc(grads, *x, gx);
                self.acc(grads, *gamma, gg);
                self.acc(grads, *beta, gb);
            }
            Op::SpaceToDepth(a) => self.acc(grads, *a, depth_to_space(g)),
            Op::DepthToSpace(a) => self.acc(grads, *a, space_to_depth(g)),
            Op::SumPerSample(a) => {
                let shape = self.shape(*a);
                let gx = Tensor::from_fn(shape, |[s, _, _, _]| g.data()[s]);
                self.acc(grads, *a, gx);
            }
            Op::SumAll(a) => {
                let gv = g.data()[0];
                self.acc(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::MeanAll(a) => {
                let shape = self.shape(*a);
                let gv = g.data()[0] / T::lit(shape.iter().product::<usize>() as f64);
                self.acc(grads, *a, Tensor::full(shape, gv));
            }
            Op::GlobalAvgPool(a) => {
                let shape = self.shape(*a);
                let m = T::lit((shape[2] * shape[3]) as f64);
                let gx = Tensor::from_fn(shape, |[s, c, _, _]| g.at([s, c, 0, 0]) / m);
                self.acc(grads, *a, gx);
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let shape = self.shape(*logits);
                let [n, k, h, w] = shape;
                let plane = h * w;
                let scale = g.data()[0] / T::lit((n * plane) as f64);
                let mut gx = Tensor::from_vec(shape, probs.clone()).expect("probs shape");
                for s in 0..n {
                    let d = gx.sample_mut(s);
                    for i in 0..plane {
                        let lab = labels[s * plane + i];
                        d[lab * plane + i] = d[lab * plane + i] - T::one();
                    }
                    let _ = k;
                    for v in d.iter_mut() {
                        *v = *v * scale;
                    }
                }
                self.acc(grads, *logits, gx);
            }
        }
    }

    fn conv2d_backward(
        &self,
        g: &Tensor<T>,
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let [n, cin, h, wd] = xv.shape();
        let [cout, _, kh, kw] = wv.shape();
        let [_, _, oh, ow] = g.shape();
        let k = cin * kh * kw;
        let hw = oh * ow;
        let direct = kh == 1 && kw == 1 && pad == 0;
        let need_x = self.ng(x);
        let need_w = self.ng(w);
        if let Some(b) = b {
            if self.ng(b) {
                let mut gb = Tensor::zeros([1, cout, 1, 1]);
                for s in 0..n {
                    let gs = g.sample(s);
                    for co in 0..cout {
                        let sum: T = gs[co * hw..(co + 1) * hw].iter().copied().sum();
                        gb.data_mut()[co] = gb.data()[co] + sum;
                    }
                }
                self.acc(grads, b, gb);
            }
        }
        if !need_x && !need_w {
            return;
        }
        let mut gw = Tensor::zeros(wv.shape());
        let mut gx = Tensor::zeros(xv.shape());
        let mut cols = if direct || !need_w { Vec::new() } else { vec![T::zero(); k * hw] };
        let mut gcols = if direct || !need_x { Vec::new() } else { vec![T::zero(); k * hw] };
        for s in 0..n {
            let gs = g.sample(s);
            if need_w {
                let colref: &[T] = if direct {
                    xv.sample(s)
                } else {
                    im2col(xv.sample(s), cin, h, wd, kh, kw, pad, &mut cols);
                    &cols
                };
                // gw[cout, k] += g[cout, hw] · colsᵀ[hw, k]
                T::gemm(
                    cout,
                    hw,
                    k,
                    gs,
                    (hw as isize, 1),
                    colref,
                    (1, hw as isize),
                    T::one(),
                    gw.data_mut(),
                    (k as isize, 1),
                );
            }
            if need_x {
                // gcols[k, hw] = wᵀ[k, cout] · g[cout, hw]
                if direct {
                    T::gemm(
                        k,
                        cout,
                        hw,
                        wv.data(),
                        (1, k as isize),
                        gs,
                        (hw as isize, 1),
                        T::zero(),
                        gx.sample_mut(s),
                        (hw as isize, 1),
                    );
                } else {
                    T::gemm(
                        k,
                        cout,
                        hw,
                        wv.data(),
                        (1, k as isize),
                        gs,
                        (hw as isize, 1),
                        T::zero(),
                        &mut gcols,
                        (hw as isize, 1),
                    );
                    col2im_add(&gcols, cin, h, wd, kh, kw, pad, gx.sample_mut(s));
                }
            }
        }
        if need_w {
            self.acc(grads, w, gw);
        }
        if need_x {
            self.acc(grads, x, gx);
        }
    }
}

/// Channel softmax of `[N, K, H, W]` logits.
pub fn softmax_channels<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, k, h, w] = x.shape();
    let plane = h * w;
    let mut out = Tensor::zeros(x.shape());
    for s in 0..n {
        let src = x.sample(s);
        let dst = out.sample_mut(s);
        for i in 0..plane {
            let mut mx = T::neg_infinity();
            for c in 0..k {
                mx = mx.max(src[c * plane + i]);
            }
            let mut z = T::zero();
            for c in 0..k {
                let e = (src[c * plane + i] - mx).exp();
                dst[c * plane + i] = e;
                z = z + e;
            }
            for c in 0..k {
                dst[c * plane + i] = dst[c * plane + i] / z;
            }
        }
    }
    out
}
