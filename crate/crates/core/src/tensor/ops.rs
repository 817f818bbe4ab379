//! Primitive forward/backward rules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::{self, ConvGeom};
use super::{Element, GradReverseAttr, Tensor};
use crate::error::{Error, Result};

/// A differentiable primitive together with its attributes.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// Inputs: x (N,C,H,W), weight (O,C,kh,kw), optional bias (O).
    Conv2d { stride: usize, pad: usize },
    /// Inputs: x (N,in), weight (out,in), optional bias (out).
    Linear,
    Relu,
    Sigmoid,
    /// Softmax over dimension 1.
    Softmax,
    Add,
    Mul,
    /// `scale * x + shift`.
    Affine { scale: f64, shift: f64 },
    ConcatChannels,
    SliceChannels { start: usize, len: usize },
    /// (N,C) → (N,C,h,w).
    BroadcastSpatial { h: usize, w: usize },
    GlobalAvgPool,
    /// Inputs: x (N,C,...), scale (C), shift (C). Statistics are taken per
    /// sample over every entry of that sample.
    ChannelAffineNorm { eps: f64 },
    Dropout { p: f64, train: bool, seed: u64 },
    /// Elementwise Huber-style penalty.
    SmoothL1 { beta: f64 },
    Log,
    Exp,
    Pow { exponent: f64 },
    Clamp { min: f64, max: f64 },
    Mean,
    Sum,
    GradReverse { lambda: f64 },
}

impl Primitive {
    /// Every primitive kind name, in a fixed order.
    pub const KINDS: [&'static str; 22] = [
        "conv2d",
        "linear",
        "relu",
        "sigmoid",
        "softmax",
        "add",
        "mul",
        "affine",
        "concat_channels",
        "slice_channels",
        "broadcast_spatial",
        "global_avg_pool",
        "channel_affine_norm",
        "dropout",
        "smooth_l1",
        "log",
        "exp",
        "pow",
        "clamp",
        "mean",
        "sum",
        "grad_reverse",
    ];

    pub fn kind(&self) -> &'static str {
        match self {
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::Linear => "linear",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Softmax => "softmax",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Affine { .. } => "affine",
            Primitive::ConcatChannels => "concat_channels",
            Primitive::SliceChannels { .. } => "slice_channels",
            Primitive::BroadcastSpatial { .. } => "broadcast_spatial",
            Primitive::GlobalAvgPool => "global_avg_pool",
            Primitive::ChannelAffineNorm { .. } => "channel_affine_norm",
            Primitive::Dropout { .. } => "dropout",
            Primitive::SmoothL1 { .. } => "smooth_l1",
            Primitive::Log => "log",
            Primitive::Exp => "exp",
            Primitive::Pow { .. } => "pow",
            Primitive::Clamp { .. } => "clamp",
            Primitive::Mean => "mean",
            Primitive::Sum => "sum",
            Primitive::GradReverse { .. } => "grad_reverse",
        }
    }
}

pub(crate) enum Saved<T> {
    None,
    Conv(ConvGeom),
    Mask(Vec<T>),
    Norm { xhat: Vec<T>, inv_std: Vec<T> },
}

pub(crate) struct Op<T> {
    pub prim: Primitive,
    saved: Saved<T>,
}

impl<T: Element> Op<T> {
    pub fn kind(&self) -> &'static str {
        self.prim.kind()
    }
}

fn arity(prim: &Primitive, inputs: usize) -> Result<()> {
    let ok = match prim {
        Primitive::Conv2d { .. } | Primitive::Linear => inputs == 2 || inputs == 3,
        Primitive::Add | Primitive::Mul => inputs == 2,
        Primitive::ChannelAffineNorm { .. } => inputs == 3,
        Primitive::ConcatChannels => inputs >= 1,
        _ => inputs == 1,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::shape(prim.kind(), format!("wrong number of inputs: {inputs}")))
    }
}

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn map<T: Element>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Vec<T> {
    x.data().iter().map(|&v| f(v)).collect()
}

fn c<T: Element>(v: f64) -> T {
    T::from_f64(v)
}

/// (N, C, rest) view of a tensor with rank ≥ 2.
fn channel_split(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(op, format!("need rank >= 2, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Applies `prim` to `inputs`, recording a graph node when any input
/// requires a gradient.
pub fn apply_primitive<T: Element>(prim: Primitive, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    arity(&prim, inputs.len())?;
    let x = inputs[0];
    let kind = prim.kind();
    let (shape, data, saved) = match &prim {
        Primitive::Conv2d { stride, pad } => {
            let w = inputs[1];
            let g = ConvGeom::new(x.shape(), w.shape(), *stride, *pad).ok_or_else(|| {
                Error::shape(
                    kind,
                    format!("input {:?}, kernel {:?}, stride {stride}, pad {pad}", x.shape(), w.shape()),
                )
            })?;
            let b = inputs.get(2).copied();
            if let Some(b) = b {
                if b.shape() != [g.o] {
                    return Err(Error::shape(kind, format!("bias {:?} for {} filters", b.shape(), g.o)));
                }
            }
            let out = conv::forward(&g, x.data(), w.data(), b.map(|b| b.data()));
            (g.out_shape(), out, Saved::Conv(g))
        }
        Primitive::Linear => {
            let w = inputs[1];
            let (&[n, fin], &[fout, win]) = (x.shape(), w.shape()) else {
                return Err(Error::shape(kind, format!("input {:?}, weight {:?}", x.shape(), w.shape())));
            };
            if fin != win {
                return Err(Error::shape(kind, format!("input width {fin} vs weight width {win}")));
            }
            let mut out = vec![T::zero(); n * fout];
            T::gemm(n, fin, fout, T::one(), x.data(), (fin as isize, 1), w.data(), (1, fin as isize), T::zero(), &mut out, (fout as isize, 1));
            if let Some(b) = inputs.get(2) {
                if b.shape() != [fout] {
                    return Err(Error::shape(kind, format!("bias {:?} for {fout} outputs", b.shape())));
                }
                for row in out.chunks_mut(fout) {
                    row.iter_mut().zip(b.data()).for_each(|(v, &bb)| *v = *v + bb);
                }
            }
            (vec![n, fout], out, Saved::None)
        }
        Primitive::Relu => (x.shape().to_vec(), map(x, |v| v.max(T::zero())), Saved::None),
        Primitive::Sigmoid => (x.shape().to_vec(), map(x, sigmoid), Saved::None),
        Primitive::Softmax => {
            let (n, ch, r) = channel_split(kind, x.shape())?;
            let xd = x.data();
            let mut out = vec![T::zero(); xd.len()];
            for ni in 0..n {
                for ri in 0..r {
                    let idx = |ci: usize| (ni * ch + ci) * r + ri;
                    let m = (0..ch).map(|ci| xd[idx(ci)]).fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for ci in 0..ch {
                        let e = (xd[idx(ci)] - m).exp();
                        out[idx(ci)] = e;
                        z = z + e;
                    }
                    for ci in 0..ch {
                        out[idx(ci)] = out[idx(ci)] / z;
                    }
                }
            }
            (x.shape().to_vec(), out, Saved::None)
        }
        Primitive::Add | Primitive::Mul => {
            let y = inputs[1];
            same_shape(kind, x, y)?;
            let out = x
                .data()
                .iter()
                .zip(y.data())
                .map(|(&a, &b)| if prim == Primitive::Add { a + b } else { a * b })
                .collect();
            (x.shape().to_vec(), out, Saved::None)
        }
        Primitive::Affine { scale, shift } => {
            let (s, t) = (c::<T>(*scale), c::<T>(*shift));
            (x.shape().to_vec(), map(x, |v| s * v + t), Saved::None)
        }
        Primitive::ConcatChannels => {
            let (n, _, r) = channel_split(kind, x.shape())?;
            for t in inputs {
                let (tn, _, tr) = channel_split(kind, t.shape())?;
                if tn != n || tr != r || t.shape()[2..] != x.shape()[2..] {
                    return Err(Error::shape(kind, format!("{:?} vs {:?}", t.shape(), x.shape())));
                }
            }
            let total: usize = inputs.iter().map(|t| t.shape()[1]).sum();
            let mut out = Vec::with_capacity(n * total * r);
            for ni in 0..n {
                for t in inputs {
                    let block = t.shape()[1] * r;
                    out.extend_from_slice(&t.data()[ni * block..(ni + 1) * block]);
                }
            }
            let mut shape = x.shape().to_vec();
            shape[1] = total;
            (shape, out, Saved::None)
        }
        Primitive::SliceChannels { start, len } => {
            let (n, ch, r) = channel_split(kind, x.shape())?;
            if *len == 0 || start + len > ch {
                return Err(Error::shape(kind, format!("channels {start}..{} of {ch}", start + len)));
            }
            let mut out = Vec::with_capacity(n * len * r);
            for ni in 0..n {
                out.extend_from_slice(&x.data()[(ni * ch + start) * r..(ni * ch + start + len) * r]);
            }
            let mut shape = x.shape().to_vec();
            shape[1] = *len;
            (shape, out, Saved::None)
        }
        Primitive::BroadcastSpatial { h, w } => {
            let &[n, ch] = x.shape() else {
                return Err(Error::shape(kind, format!("need (N,C), got {:?}", x.shape())));
            };
            if *h == 0 || *w == 0 {
                return Err(Error::shape(kind, "spatial extents must be positive"));
            }
            let mut out = Vec::with_capacity(n * ch * h * w);
            for &v in x.data() {
                out.extend(std::iter::repeat_n(v, h * w));
            }
            (vec![n, ch, *h, *w], out, Saved::None)
        }
        Primitive::GlobalAvgPool => {
            let &[n, ch, h, w] = x.shape() else {
                return Err(Error::shape(kind, format!("need (N,C,H,W), got {:?}", x.shape())));
            };
            let inv = c::<T>(1.0 / (h * w) as f64);
            let out = x.data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() * inv).collect();
            (vec![n, ch], out, Saved::None)
        }
        Primitive::ChannelAffineNorm { eps } => {
            let (n, ch, r) = channel_split(kind, x.shape())?;
            let (scale, shift) = (inputs[1], inputs[2]);
            if scale.shape() != [ch] || shift.shape() != [ch] {
                return Err(Error::shape(
                    kind,
                    format!("scale {:?} / shift {:?} for {ch} channels", scale.shape(), shift.shape()),
                ));
            }
            let m = ch * r;
            let mut xhat = vec![T::zero(); x.numel()];
            let mut inv_std = Vec::with_capacity(n);
            let mut out = vec![T::zero(); x.numel()];
            for ni in 0..n {
                let xs = &x.data()[ni * m..(ni + 1) * m];
                let mean = xs.iter().copied().sum::<T>() / c(m as f64);
                let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / c(m as f64);
                let is = T::one() / (var + c(*eps)).sqrt();
                inv_std.push(is);
                for ci in 0..ch {
                    for ri in 0..r {
                        let i = ni * m + ci * r + ri;
                        xhat[i] = (x.data()[i] - mean) * is;
                        out[i] = scale.data()[ci] * xhat[i] + shift.data()[ci];
                    }
                }
            }
            (x.shape().to_vec(), out, Saved::Norm { xhat, inv_std })
        }
        Primitive::Dropout { p, train, seed } => {
            if !(0.0..1.0).contains(p) {
                return Err(Error::Config(format!("dropout rate must be in [0, 1), got {p}")));
            }
            if !*train || *p == 0.0 {
                return Ok(x.clone());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let keep = c::<T>(1.0 / (1.0 - p));
            let mask: Vec<T> = (0..x.numel())
                .map(|_| if rng.random::<f64>() < *p { T::zero() } else { keep })
                .collect();
            let out = x.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
            (x.shape().to_vec(), out, Saved::Mask(mask))
        }
        Primitive::SmoothL1 { beta } => {
            if *beta <= 0.0 {
                return Err(Error::Config(format!("smooth_l1 beta must be > 0, got {beta}")));
            }
            let b = c::<T>(*beta);
            let half = c::<T>(0.5);
            (
                x.shape().to_vec(),
                map(x, |v| if v.abs() < b { half * v * v / b } else { v.abs() - half * b }),
                Saved::None,
            )
        }
        Primitive::Log => (x.shape().to_vec(), map(x, T::ln), Saved::None),
        Primitive::Exp => (x.shape().to_vec(), map(x, T::exp), Saved::None),
        Primitive::Pow { exponent } => {
            let e = c::<T>(*exponent);
            (x.shape().to_vec(), map(x, |v| v.powf(e)), Saved::None)
        }
        Primitive::Clamp { min, max } => {
            if min > max {
                return Err(Error::Config(format!("clamp bounds reversed: {min} > {max}")));
            }
            let (lo, hi) = (c::<T>(*min), c::<T>(*max));
            (x.shape().to_vec(), map(x, |v| v.max(lo).min(hi)), Saved::None)
        }
        Primitive::Mean => {
            let s = x.data().iter().copied().sum::<T>() / c(x.numel() as f64);
            (vec![1], vec![s], Saved::None)
        }
        Primitive::Sum => (vec![1], vec![x.data().iter().copied().sum::<T>()], Saved::None),
        Primitive::GradReverse { lambda } => {
            GradReverseAttr::new(*lambda)?;
            (x.shape().to_vec(), x.to_vec(), Saved::None)
        }
    };
    Tensor::from_op(shape, data, Op { prim, saved }, inputs)
}

fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

impl<T: Element> Op<T> {
    /// Gradients for each input given the upstream gradient `g` of `out`.
    /// Entries are `None` for inputs that do not require a gradient.
    pub(crate) fn backward(&self, inputs: &[Tensor<T>], out: &Tensor<T>, g: &[T]) -> Vec<Option<Vec<T>>> {
        let want = |i: usize| inputs.get(i).is_some_and(|t| t.requires_grad());
        let x = &inputs[0];
        let elementwise = |f: &dyn Fn(usize) -> T| -> Vec<Option<Vec<T>>> {
            vec![Some((0..g.len()).map(|i| g[i] * f(i)).collect())]
        };
        match (&self.prim, &self.saved) {
            (Primitive::Conv2d { .. }, Saved::Conv(geom)) => {
                let (dx, dw, db) = conv::backward(geom, x.data(), inputs[1].data(), g, want(0));
                let mut res = vec![want(0).then_some(dx), Some(dw)];
                if inputs.len() == 3 {
                    res.push(Some(db));
                }
                res
            }
            (Primitive::Linear, _) => {
                let w = &inputs[1];
                let (n, fin, fout) = (x.shape()[0], x.shape()[1], w.shape()[0]);
                let mut dx = vec![T::zero(); n * fin];
                T::gemm(n, fout, fin, T::one(), g, (fout as isize, 1), w.data(), (fin as isize, 1), T::zero(), &mut dx, (fin as isize, 1));
                let mut dw = vec![T::zero(); fout * fin];
                T::gemm(fout, n, fin, T::one(), g, (1, fout as isize), x.data(), (fin as isize, 1), T::zero(), &mut dw, (fin as isize, 1));
                let mut res = vec![Some(dx), Some(dw)];
                if inputs.len() == 3 {
                    let mut db = vec![T::zero(); fout];
                    for row in g.chunks(fout) {
                        db.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                    }
                    res.push(Some(db));
                }
                res
            }
            (Primitive::Relu, _) => {
                let xd = x.data();
                elementwise(&|i| if xd[i] > T::zero() { T::one() } else { T::zero() })
            }
            (Primitive::Sigmoid, _) => {
                let y = out.data();
                elementwise(&|i| y[i] * (T::one() - y[i]))
            }
            (Primitive::Softmax, _) => {
                let (n, ch, r) = (x.shape()[0], x.shape()[1], x.numel() / (x.shape()[0] * x.shape()[1]));
                let y = out.data();
                let mut dx = vec![T::zero(); g.len()];
                for ni in 0..n {
                    for ri in 0..r {
                        let idx = |ci: usize| (ni * ch + ci) * r + ri;
                        let dot = (0..ch).map(|ci| g[idx(ci)] * y[idx(ci)]).sum::<T>();
                        for ci in 0..ch {
                            dx[idx(ci)] = y[idx(ci)] * (g[idx(ci)] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }
            (Primitive::Add, _) => vec![Some(g.to_vec()), Some(g.to_vec())],
            (Primitive::Mul, _) => {
                let (a, b) = (x.data(), inputs[1].data());
                vec![
                    Some(g.iter().zip(b).map(|(&gi, &bi)| gi * bi).collect()),
                    Some(g.iter().zip(a).map(|(&gi, &ai)| gi * ai).collect()),
                ]
            }
            (Primitive::Affine { scale, .. }, _) => {
                let s = c::<T>(*scale);
                elementwise(&|_| s)
            }
            (Primitive::ConcatChannels, _) => {
                let n = x.shape()[0];
                let r: usize = x.shape()[2..].iter().product();
                let total = out.shape()[1];
                let mut offset = 0;
                inputs
                    .iter()
                    .map(|t| {
                        let ch = t.shape()[1];
                        let mut d = Vec::with_capacity(t.numel());
                        for ni in 0..n {
                            let start = (ni * total + offset) * r;
                            d.extend_from_slice(&g[start..start + ch * r]);
                        }
                        offset += ch;
                        Some(d)
                    })
                    .collect()
            }
            (Primitive::SliceChannels { start, len }, _) => {
                let (n, ch) = (x.shape()[0], x.shape()[1]);
                let r = x.numel() / (n * ch);
                let mut dx = vec![T::zero(); x.numel()];
                for ni in 0..n {
                    dx[(ni * ch + start) * r..(ni * ch + start + len) * r]
                        .copy_from_slice(&g[ni * len * r..(ni + 1) * len * r]);
                }
                vec![Some(dx)]
            }
            (Primitive::BroadcastSpatial { h, w }, _) => {
                vec![Some(g.chunks(h * w).map(|p| p.iter().copied().sum::<T>()).collect())]
            }
            (Primitive::GlobalAvgPool, _) => {
                let hw = x.shape()[2] * x.shape()[3];
                let inv = c::<T>(1.0 / hw as f64);
                vec![Some((0..x.numel()).map(|i| g[i / hw] * inv).collect())]
            }
            (Primitive::ChannelAffineNorm { .. }, Saved::Norm { xhat, inv_std }) => {
                let (scale, n, ch) = (&inputs[1], x.shape()[0], x.shape()[1]);
                let m = x.numel() / n;
                let r = m / ch;
                let mut dx = vec![T::zero(); x.numel()];
                let mut dscale = vec![T::zero(); ch];
                let mut dshift = vec![T::zero(); ch];
                let mf = c::<T>(m as f64);
                for ni in 0..n {
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for ci in 0..ch {
                        for ri in 0..r {
                            let i = ni * m + ci * r + ri;
                            let dxh = g[i] * scale.data()[ci];
                            sum_dxhat = sum_dxhat + dxh;
                            sum_dxhat_xhat = sum_dxhat_xhat + dxh * xhat[i];
                            dscale[ci] = dscale[ci] + g[i] * xhat[i];
                            dshift[ci] = dshift[ci] + g[i];
                        }
                    }
                    for ci in 0..ch {
                        for ri in 0..r {
                            let i = ni * m + ci * r + ri;
                            let dxh = g[i] * scale.data()[ci];
                            dx[i] = inv_std[ni] / mf * (mf * dxh - sum_dxhat - xhat[i] * sum_dxhat_xhat);
                        }
                    }
                }
                vec![Some(dx), Some(dscale), Some(dshift)]
            }
            (Primitive::Dropout { .. }, Saved::Mask(mask)) => elementwise(&|i| mask[i]),
            (Primitive::SmoothL1 { beta }, _) => {
                let b = c::<T>(*beta);
                let xd = x.data();
                elementwise(&|i| {
                    let v = xd[i];
                    if v.abs() < b {
                        v / b
                    } else {
                        v.signum()
                    }
                })
            }
            (Primitive::Log, _) => {
                let xd = x.data();
                elementwise(&|i| T::one() / xd[i])
            }
            (Primitive::Exp, _) => {
                let y = out.data();
                elementwise(&|i| y[i])
            }
            (Primitive::Pow { exponent }, _) => {
                let xd = x.data();
                let e = c::<T>(*exponent);
                if *exponent == 0.0 {
                    return vec![Some(vec![T::zero(); g.len()])];
                }
                elementwise(&|i| e * xd[i].powf(e - T::one()))
            }
            (Primitive::Clamp { min, max }, _) => {
                let (lo, hi) = (c::<T>(*min), c::<T>(*max));
                let xd = x.data();
                elementwise(&|i| if xd[i] >= lo && xd[i] <= hi { T::one() } else { T::zero() })
            }
            (Primitive::Mean, _) => {
                let inv = g[0] / c(x.numel() as f64);
                vec![Some(vec![inv; x.numel()])]
            }
            (Primitive::Sum, _) => vec![Some(vec![g[0]; x.numel()])],
            (Primitive::GradReverse { lambda }, _) => {
                let s = c::<T>(-lambda);
                elementwise(&|_| s)
            }
            (prim, _) => unreachable!("missing saved state for {}", prim.kind()),
        }
    }
}

/// Method-style wrappers over [`apply_primitive`].
impl<T: Element> Tensor<T> {
    pub fn conv2d(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>, stride: usize, pad: usize) -> Result<Self> {
        let prim = Primitive::Conv2d { stride, pad };
        match bias {
            Some(b) => apply_primitive(prim, &[self, weight, b]),
            None => apply_primitive(prim, &[self, weight]),
        }
    }

    pub fn linear(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Self> {
        match bias {
            Some(b) => apply_primitive(Primitive::Linear, &[self, weight, b]),
            None => apply_primitive(Primitive::Linear, &[self, weight]),
        }
    }

    pub fn relu(&self) -> Result<Self> {
        apply_primitive(Primitive::Relu, &[self])
    }

    pub fn sigmoid(&self) -> Result<Self> {
        apply_primitive(Primitive::Sigmoid, &[self])
    }

    pub fn softmax(&self) -> Result<Self> {
        apply_primitive(Primitive::Softmax, &[self])
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        apply_primitive(Primitive::Add, &[self, other])
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Self> {
        apply_primitive(Primitive::Mul, &[self, other])
    }

    pub fn affine(&self, scale: f64, shift: f64) -> Result<Self> {
        apply_primitive(Primitive::Affine { scale, shift }, &[self])
    }

    pub fn scale(&self, factor: f64) -> Result<Self> {
        self.affine(factor, 0.0)
    }

    /// `1 - x`.
    pub fn one_minus(&self) -> Result<Self> {
        self.affine(-1.0, 1.0)
    }

    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::shape("concat_channels", "no inputs"));
        }
        apply_primitive(Primitive::ConcatChannels, parts)
    }

    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        apply_primitive(Primitive::SliceChannels { start, len }, &[self])
    }

    pub fn broadcast_spatial(&self, h: usize, w: usize) -> Result<Self> {
        apply_primitive(Primitive::BroadcastSpatial { h, w }, &[self])
    }

    pub fn global_avg_pool(&self) -> Result<Self> {
        apply_primitive(Primitive::GlobalAvgPool, &[self])
    }

    pub fn channel_affine_norm(&self, scale: &Tensor<T>, shift: &Tensor<T>, eps: f64) -> Result<Self> {
        apply_primitive(Primitive::ChannelAffineNorm { eps }, &[self, scale, shift])
    }

    pub fn dropout(&self, p: f64, train: bool, seed: u64) -> Result<Self> {
        apply_primitive(Primitive::Dropout { p, train, seed }, &[self])
    }

    pub fn smooth_l1(&self, beta: f64) -> Result<Self> {
        apply_primitive(Primitive::SmoothL1 { beta }, &[self])
    }

    pub fn log(&self) -> Result<Self> {
        apply_primitive(Primitive::Log, &[self])
    }

    pub fn exp(&self) -> Result<Self> {
        apply_primitive(Primitive::Exp, &[self])
    }

    pub fn pow(&self, exponent: f64) -> Result<Self> {
        apply_primitive(Primitive::Pow { exponent }, &[self])
    }

    pub fn clamp(&self, min: f64, max: f64) -> Result<Self> {
        apply_primitive(Primitive::Clamp { min, max }, &[self])
    }

    pub fn mean(&self) -> Result<Self> {
        apply_primitive(Primitive::Mean, &[self])
    }

    pub fn sum(&self) -> Result<Self> {
        apply_primitive(Primitive::Sum, &[self])
    }

    /// Identity forward; multiplies the backward gradient by `-lambda`.
    pub fn grad_reverse(&self, lambda: f64) -> Result<Self> {
        apply_primitive(Primitive::GradReverse { lambda }, &[self])
    }
}
