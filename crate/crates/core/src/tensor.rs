//! Dense row-major tensors and the primitive layers every network block is
//! built from.
//!
//! Images use the channel-major `[C, H, W]` layout. All reductions inside a
//! single output element accumulate sequentially in a fixed order, so the
//! results are bit-identical regardless of how many rayon workers run the
//! outer loops.

use rayon::prelude::*;

use crate::error::{dim_err, param_err, Result};

/// Below this many multiply-adds an op runs on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(dim_err!("shape {shape:?} must be a non-empty list of positive dims"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(dim_err!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self { shape, data: vec![value; numel] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self { shape, data: (0..numel).map(f).collect() }
    }

    /// Rank-1 tensor from a slice.
    pub fn vector(values: &[f64]) -> Self {
        Self { shape: vec![values.len().max(1)], data: values.to_vec() }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(dim_err!("item() on tensor of shape {:?}", self.shape)),
        }
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            s => Err(dim_err!("expected a [C, H, W] tensor, got {s:?}")),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[a, b] => Ok((a, b)),
            s => Err(dim_err!("expected a rank-2 tensor, got {s:?}")),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, alpha: f64) -> Self {
        self.map(|v| alpha * v)
    }

    /// Sequential left-to-right sum.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(dim_err!("shape mismatch {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    /// Swap the two spatial axes of a `[C, H, W]` tensor.
    pub fn transpose_hw(&self) -> Result<Self> {
        let (c, h, w) = self.dims3()?;
        let mut out = vec![0.0; self.numel()];
        for ch in 0..c {
            let src = &self.data[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    dst[x * h + y] = src[y * w + x];
                }
            }
        }
        Ok(Self { shape: vec![c, w, h], data: out })
    }
}

/// Splits `shape` around `axis` into `(outer, axis_len, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Runs `f(chunk_index, chunk)` over `out.chunks_mut(chunk)`, in parallel when
/// the op is big enough to amortize the pool.
pub(crate) fn for_each_chunk<F>(out: &mut [f64], chunk: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if work >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
        out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    } else {
        out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Which axis a channel-mixing op (linear, layernorm) acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// The last dimension, `[..., C]`.
    Last,
    /// The leading dimension, as in `[C, H, W]` feature maps.
    Channel,
}

impl Axis {
    pub(crate) fn index(self, rank: usize) -> usize {
        match self {
            Axis::Last => rank - 1,
            Axis::Channel => 0,
        }
    }
}

/// `y[..., o] = sum_i w[o, i] * x[..., i] + b[o]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    linear_axis(x, w, b, Axis::Last)
}

/// Channel mixing on a channel-major tensor: `y[o, ...] = sum_i w[o, i] * x[i, ...] + b[o]`.
pub fn linear_channels(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    linear_axis(x, w, b, Axis::Channel)
}

pub fn linear_axis(x: &Tensor, w: &Tensor, b: Option<&Tensor>, axis: Axis) -> Result<Tensor> {
    let (cout, cin) = w.dims2()?;
    let ax = axis.index(x.rank());
    let (outer, xc, inner) = split_axis(x.shape(), ax);
    if xc != cin {
        return Err(dim_err!("linear: input has {xc} features on axis {ax}, weight expects {cin}"));
    }
    if let Some(b) = b {
        if b.numel() != cout {
            return Err(dim_err!("linear: bias has {} entries, expected {cout}", b.numel()));
        }
    }
    let mut shape = x.shape().to_vec();
    shape[ax] = cout;
    let mut out = vec![0.0; outer * cout * inner];
    let (xd, wd) = (x.data(), w.data());
    let bd = b.map(Tensor::data);
    let work = outer * cout * cin * inner;
    if inner == 1 {
        for_each_chunk(&mut out, cout, work, |row, dst| {
            let xs = &xd[row * cin..(row + 1) * cin];
            for (o, d) in dst.iter_mut().enumerate() {
                let wr = &wd[o * cin..(o + 1) * cin];
                let mut acc = 0.0;
                for (wv, xv) in wr.iter().zip(xs) {
                    acc += wv * xv;
                }
                *d = acc + bd.map_or(0.0, |b| b[o]);
            }
        });
    } else {
        for_each_chunk(&mut out, inner, work, |row, dst| {
            let (blk, o) = (row / cout, row % cout);
            let base = blk * cin * inner;
            for (i, &wv) in wd[o * cin..(o + 1) * cin].iter().enumerate() {
                let xs = &xd[base + i * inner..base + (i + 1) * inner];
                for (d, xv) in dst.iter_mut().zip(xs) {
                    *d += wv * xv;
                }
            }
            if let Some(b) = bd {
                for d in dst.iter_mut() {
                    *d += b[o];
                }
            }
        });
    }
    Tensor::new(shape, out)
}

/// Stride, zero padding and channel groups for [`conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, pad: usize, groups: usize) -> Self {
        Self { stride, pad, groups }
    }

    /// Stride 1, padding `k / 2`: preserves spatial size for odd `k`.
    pub const fn same(k: usize) -> Self {
        Self { stride: 1, pad: k / 2, groups: 1 }
    }

    pub const fn depthwise(k: usize, channels: usize) -> Self {
        Self { stride: 1, pad: k / 2, groups: channels }
    }
}

/// Resolved geometry of one conv2d application.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub cin_g: usize,
    pub cout_g: usize,
    pub spec: ConvSpec,
}

impl ConvGeom {
    pub(crate) fn new(x: &[usize], w: &[usize], spec: ConvSpec) -> Result<Self> {
        let &[cin, h, wd] = x else {
            return Err(dim_err!("conv2d: input must be [C, H, W], got {x:?}"));
        };
        let &[cout, cin_g, kh, kw] = w else {
            return Err(dim_err!("conv2d: weight must be [Cout, Cin/g, k, k], got {w:?}"));
        };
        let ConvSpec { stride, pad, groups } = spec;
        if stride == 0 || groups == 0 {
            return Err(param_err!("conv2d: stride and groups must be positive"));
        }
        if cin % groups != 0 || cout % groups != 0 {
            return Err(param_err!("conv2d: channels {cin}->{cout} not divisible by groups {groups}"));
        }
        if cin_g != cin / groups {
            return Err(dim_err!("conv2d: weight expects {cin_g} inputs per group, input gives {}", cin / groups));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(param_err!("conv2d: padded input {h}x{wd} (+{pad}) smaller than kernel {kh}x{kw}"));
        }
        Ok(Self {
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
            cin_g,
            cout_g: cout / groups,
            spec,
        })
    }

    /// Output columns `ox` for which `ox * s + k - p` lands inside `[0, len)`.
    pub(crate) fn valid_range(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let (s, p) = (self.spec.stride, self.spec.pad);
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        if len + p <= k {
            return (0, 0);
        }
        let hi = ((len - 1 + p - k) / s + 1).min(out_len);
        (lo.min(hi), hi)
    }

    pub(crate) fn macs(&self) -> usize {
        self.cout * self.ho * self.wo * self.cin_g * self.kh * self.kw
    }
}

/// 2D cross-correlation (no kernel flip) with zero padding.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: ConvSpec) -> Result<Tensor> {
    let g = ConvGeom::new(x.shape(), w.shape(), spec)?;
    if let Some(b) = b {
        if b.numel() != g.cout {
            return Err(dim_err!("conv2d: bias has {} entries, expected {}", b.numel(), g.cout));
        }
    }
    let (xd, wd) = (x.data(), w.data());
    let bd = b.map(Tensor::data);
    let plane = g.ho * g.wo;
    let mut out = vec![0.0; g.cout * plane];
    let s = spec.stride;
    for_each_chunk(&mut out, plane, g.macs(), |o, dst| {
        let group = o / g.cout_g;
        for ci in 0..g.cin_g {
            let c = group * g.cin_g + ci;
            let src = &xd[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (y0, y1) = g.valid_range(ky, g.h, g.ho);
                for kx in 0..g.kw {
                    let wv = wd[((o * g.cin_g + ci) * g.kh + ky) * g.kw + kx];
                    let (x0, x1) = g.valid_range(kx, g.w, g.wo);
                    for oy in y0..y1 {
                        let iy = oy * s + ky - spec.pad;
                        let row = &src[iy * g.w..(iy + 1) * g.w];
                        let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                        for ox in x0..x1 {
                            drow[ox] += wv * row[ox * s + kx - spec.pad];
                        }
                    }
                }
            }
        }
        if let Some(b) = bd {
            for d in dst.iter_mut() {
                *d += b[o];
            }
        }
    });
    Tensor::new([g.cout, g.ho, g.wo], out)
}

/// Layer normalization over the last dimension.
pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layernorm_axis(x, gamma, beta, eps, Axis::Last)
}

/// Layer normalization over the channels of each spatial position of a `[C, ...]` map.
pub fn layernorm_channels(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layernorm_axis(x, gamma, beta, eps, Axis::Channel)
}

pub fn layernorm_axis(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64, axis: Axis) -> Result<Tensor> {
    let ax = axis.index(x.rank());
    let (_, c, inner) = split_axis(x.shape(), ax);
    if gamma.numel() != c || beta.numel() != c {
        return Err(dim_err!("layernorm: affine params must have {c} entries"));
    }
    let mut out = vec![0.0; x.numel()];
    let stats = layernorm_stats(x, eps, axis);
    let (xd, gd, bd) = (x.data(), gamma.data(), beta.data());
    for_each_chunk(&mut out, inner, x.numel() * 4, |row, dst| {
        let (blk, ch) = (row / c, row % c);
        let src = &xd[row * inner..(row + 1) * inner];
        for (p, (d, &xv)) in dst.iter_mut().zip(src).enumerate() {
            let (mean, std) = stats[blk * inner + p];
            *d = (xv - mean) / std * gd[ch] + bd[ch];
        }
    });
    Tensor::new(x.shape().to_vec(), out)
}

/// Per-position `(mean, sqrt(var + eps))`, indexed `outer * inner + p`.
pub(crate) fn layernorm_stats(x: &Tensor, eps: f64, axis: Axis) -> Vec<(f64, f64)> {
    let ax = axis.index(x.rank());
    let (outer, c, inner) = split_axis(x.shape(), ax);
    let xd = x.data();
    let mut stats = Vec::with_capacity(outer * inner);
    for blk in 0..outer {
        let base = blk * c * inner;
        let mut mean = vec![0.0; inner];
        for ch in 0..c {
            for (m, v) in mean.iter_mut().zip(&xd[base + ch * inner..base + (ch + 1) * inner]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= c as f64);
        let mut var = vec![0.0; inner];
        for ch in 0..c {
            let src = &xd[base + ch * inner..base + (ch + 1) * inner];
            for ((s, v), m) in var.iter_mut().zip(src).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        stats.extend(mean.into_iter().zip(var).map(|(m, v)| (m, (v / c as f64 + eps).sqrt())));
    }
    stats
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid_scalar(x)
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(silu_scalar)
}

pub fn softplus(x: &Tensor) -> Tensor {
    x.map(softplus_scalar)
}

/// `[C*r*r, H, W] -> [C, r*H, r*W]` with `out[c, r*h+dy, r*w+dx] = x[c*r*r + dy*r + dx, h, w]`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (cr, h, w) = x.dims3()?;
    if r == 0 || cr % (r * r) != 0 {
        return Err(param_err!("pixel_shuffle: {cr} channels not divisible by r^2 = {}", r * r));
    }
    let c = cr / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![0.0; x.numel()];
    let xd = x.data();
    for ch in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                let src = &xd[(ch * r * r + dy * r + dx) * h * w..][..h * w];
                for y in 0..h {
                    let orow = (ch * oh + r * y + dy) * ow;
                    for xx in 0..w {
                        out[orow + r * xx + dx] = src[y * w + xx];
                    }
                }
            }
        }
    }
    Tensor::new([c, oh, ow], out)
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (c, oh, ow) = x.dims3()?;
    if r == 0 || oh % r != 0 || ow % r != 0 {
        return Err(param_err!("pixel_unshuffle: {oh}x{ow} not divisible by {r}"));
    }
    let (h, w) = (oh / r, ow / r);
    let mut out = vec![0.0; x.numel()];
    let xd = x.data();
    for ch in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                let dst = &mut out[(ch * r * r + dy * r + dx) * h * w..][..h * w];
                for y in 0..h {
                    let irow = (ch * oh + r * y + dy) * ow;
                    for xx in 0..w {
                        dst[y * w + xx] = xd[irow + r * xx + dx];
                    }
                }
            }
        }
    }
    Tensor::new([c * r * r, h, w], out)
}

/// Copies each value of a `[C, h, w]` map onto its `n x n` block of a `[C, n*h, n*w]` map.
pub fn repeat_blocks(x: &Tensor, n: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if n == 0 {
        return Err(param_err!("repeat_blocks: block size must be positive"));
    }
    let (oh, ow) = (h * n, w * n);
    let xd = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            let row = &xd[(ch * h + y / n) * w..][..w];
            out.extend((0..ow).map(|xx| row[xx / n]));
        }
    }
    Tensor::new([c, oh, ow], out)
}

/// Sums each `n x n` block; the adjoint of [`repeat_blocks`].
pub fn block_sum(x: &Tensor, n: usize) -> Result<Tensor> {
    let (c, oh, ow) = x.dims3()?;
    if n == 0 || oh % n != 0 || ow % n != 0 {
        return Err(param_err!("block_sum: {oh}x{ow} not divisible by {n}"));
    }
    let (h, w) = (oh / n, ow / n);
    let mut out = vec![0.0; c * h * w];
    let xd = x.data();
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                out[(ch * h + y / n) * w + xx / n] += xd[(ch * oh + y) * ow + xx];
            }
        }
    }
    Tensor::new([c, h, w], out)
}

/// Multiplies every element of channel `c` (leading axis) by `s[c]`.
pub fn scale_channels(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    let c = x.shape()[0];
    if s.numel() != c {
        return Err(dim_err!("scale_channels: {} factors for {c} channels", s.numel()));
    }
    let inner = x.numel() / c;
    let data = x
        .data()
        .chunks(inner)
        .zip(s.data())
        .flat_map(|(row, &f)| row.iter().map(move |v| f * v))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Channels `[start, start + len)` along the leading axis.
pub fn slice_channels(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let c = x.shape()[0];
    if len == 0 || start + len > c {
        return Err(dim_err!("slice_channels: [{start}, {}) out of {c} channels", start + len));
    }
    let inner = x.numel() / c;
    let mut shape = x.shape().to_vec();
    shape[0] = len;
    Tensor::new(shape, x.data()[start * inner..(start + len) * inner].to_vec())
}

/// Mirror index into `[0, len)` without repeating the edge sample (numpy "reflect").
pub fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    (if m < len as isize { m } else { period - m }) as usize
}

/// Reflect-pads a `[C, H, W]` map on the bottom and right edges.
pub fn reflect_pad(x: &Tensor, pad_bottom: usize, pad_right: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let (oh, ow) = (h + pad_bottom, w + pad_right);
    let xd = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            let sy = reflect_index(y as isize, h);
            out.extend((0..ow).map(|xx| xd[(ch * h + sy) * w + reflect_index(xx as isize, w)]));
        }
    }
    Tensor::new([c, oh, ow], out)
}

/// Top-left `h x w` window of a `[C, H, W]` map.
pub fn crop(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    crop_at(x, 0, 0, h, w)
}

pub fn crop_at(x: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor> {
    let (c, xh, xw) = x.dims3()?;
    if top + h > xh || left + w > xw || h == 0 || w == 0 {
        return Err(dim_err!("crop {h}x{w} at ({top},{left}) outside {xh}x{xw}"));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in top..top + h {
            out.extend_from_slice(&xd[(ch * xh + y) * xw + left..][..w]);
        }
    }
    Tensor::new([c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new([2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new([0, 2], vec![]).is_err());
    }

    #[test]
    fn linear_identity_and_bias_only() {
        let x = t(&[2, 3], &[1.0, -2.0, 3.5, 0.25, 7.0, -1.0]);
        let eye = Tensor::from_fn([3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        assert_eq!(linear(&x, &eye, None).unwrap(), x);

        let y = linear(&x, &Tensor::zeros([2, 3]), Some(&t(&[2], &[1.0, 2.0]))).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn linear_hand_product() {
        let y = linear(&t(&[2], &[1.0, 2.0]), &t(&[2, 2], &[1.0, 1.0, 2.0, -1.0]), None).unwrap();
        assert_eq!(y.data(), &[3.0, 0.0]);
    }

    #[test]
    fn linear_shape_mismatch() {
        let err = linear(&Tensor::zeros([4, 3]), &Tensor::zeros([2, 2]), None);
        assert!(matches!(err, Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn linear_channels_matches_transposed_linear() {
        let x = Tensor::from_fn([3, 2, 2], |i| (i as f64 * 0.37).sin());
        let w = Tensor::from_fn([4, 3], |i| (i as f64 * 0.91).cos());
        let y = linear_channels(&x, &w, None).unwrap();
        for p in 0..4 {
            for o in 0..4 {
                let want: f64 = (0..3).map(|i| w.data()[o * 3 + i] * x.data()[i * 4 + p]).sum();
                assert!((y.data()[o * 4 + p] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn conv_identity_kernels() {
        let x = Tensor::from_fn([1, 4, 5], |i| i as f64 - 3.0);
        let one = Tensor::full([1, 1, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &one, None, ConvSpec::new(1, 0, 1)).unwrap(), x);

        let mut delta = Tensor::zeros([1, 1, 3, 3]);
        delta.data_mut()[4] = 1.0;
        assert_eq!(conv2d(&x, &delta, None, ConvSpec::same(3)).unwrap(), x);
    }

    #[test]
    fn conv_strided_sum() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = conv2d(&x, &Tensor::full([1, 1, 2, 2], 1.0), None, ConvSpec::new(2, 0, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn conv_rejects_bad_params() {
        let x = Tensor::zeros([2, 3, 3]);
        let w = Tensor::zeros([2, 2, 3, 3]);
        assert!(matches!(conv2d(&x, &w, None, ConvSpec::new(0, 1, 1)), Err(crate::Error::Parameter(_))));
        assert!(matches!(conv2d(&x, &w, None, ConvSpec::new(1, 0, 3)), Err(crate::Error::Parameter(_))));
        let big = Tensor::zeros([2, 2, 7, 7]);
        assert!(matches!(conv2d(&x, &big, None, ConvSpec::new(1, 1, 1)), Err(crate::Error::Parameter(_))));
    }

    #[test]
    fn depthwise_equals_per_channel() {
        let x = Tensor::from_fn([3, 5, 4], |i| ((i * 7919) % 13) as f64 / 13.0 - 0.5);
        let w = Tensor::from_fn([3, 1, 3, 3], |i| ((i * 104729) % 17) as f64 / 17.0 - 0.5);
        let y = conv2d(&x, &w, None, ConvSpec::depthwise(3, 3)).unwrap();
        for c in 0..3 {
            let xc = slice_channels(&x, c, 1).unwrap();
            let wc = slice_channels(&w, c, 1).unwrap();
            let yc = conv2d(&xc, &wc, None, ConvSpec::same(3)).unwrap();
            assert_eq!(yc, slice_channels(&y, c, 1).unwrap());
        }
    }

    #[test]
    fn layernorm_cases() {
        let one = Tensor::full([2], 1.0);
        let zero = Tensor::zeros([2]);
        let y = layernorm(&t(&[2], &[0.0, 2.0]), &one, &zero, 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);

        let c = layernorm(&Tensor::full([3, 4], 2.5), &Tensor::full([4], 1.0), &Tensor::zeros([4]), 1e-5).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));

        let x = Tensor::from_fn([3, 4], |i| (i as f64).sqrt());
        let g = Tensor::from_fn([4], |i| 0.5 + i as f64);
        let b = Tensor::from_fn([4], |i| i as f64 - 1.5);
        let with_b = layernorm(&x, &g, &b, 1e-5).unwrap();
        let without = layernorm(&x, &g, &Tensor::zeros([4]), 1e-5).unwrap();
        let shifted = Tensor::from_fn([3, 4], |i| without.data()[i] + b.data()[i % 4]);
        assert!(with_b.max_abs_diff(&shifted).unwrap() < 1e-15);
    }

    #[test]
    fn layernorm_channels_matches_last_axis_on_transpose() {
        let x = Tensor::from_fn([3, 2, 2], |i| (i as f64 * 1.3).sin());
        let g = t(&[3], &[1.0, 0.5, 2.0]);
        let b = t(&[3], &[0.0, 0.1, -0.2]);
        let y = layernorm_channels(&x, &g, &b, 1e-5).unwrap();
        for p in 0..4 {
            let col = Tensor::from_fn([3], |c| x.data()[c * 4 + p]);
            let yc = layernorm(&col, &g, &b, 1e-5).unwrap();
            for c in 0..3 {
                assert!((yc.data()[c] - y.data()[c * 4 + p]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu_scalar(0.0), 0.0);
        assert!((silu_scalar(1.0) - 0.731_058_578_630_004_9).abs() < 1e-15);
        // |silu(x) - x| = x * e^-x / (1 + e^-x) < x * e^-x.
        for x in [5.0_f64, 20.0, 40.0] {
            assert!((silu_scalar(x) - x).abs() <= x * (-x).exp() + x * f64::EPSILON);
        }
        assert!((silu_scalar(40.0) - 40.0).abs() < 1e-8);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus_scalar(0.0) - std::f64::consts::LN_2).abs() < 1e-16);
        assert_eq!(softplus_scalar(800.0), 800.0);
        assert!(softplus_scalar(-800.0) >= 0.0);
    }

    #[test]
    fn pixel_shuffle_layout() {
        let x = t(&[4, 1, 1], &[1.0, 2.0, 3.0, 4.0]);
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        let z = Tensor::from_fn([2, 3, 2], |i| i as f64);
        assert_eq!(pixel_shuffle(&z, 1).unwrap(), z);
        let c = pixel_shuffle(&Tensor::full([8, 2, 3], 0.7), 2).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.7));
        assert!(matches!(pixel_shuffle(&Tensor::zeros([3, 1, 1]), 2), Err(crate::Error::Parameter(_))));
    }

    #[test]
    fn repeat_and_block_sum() {
        let x = t(&[1, 1, 2], &[1.0, 2.0]);
        let r = repeat_blocks(&x, 2).unwrap();
        assert_eq!(r.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        assert_eq!(block_sum(&r, 2).unwrap().data(), &[4.0, 8.0]);
    }

    #[test]
    fn reflect_pad_and_crop() {
        assert_eq!(reflect_index(-1, 4), 1);
        assert_eq!(reflect_index(4, 4), 2);
        assert_eq!(reflect_index(9, 4), 3);
        let x = t(&[1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let p = reflect_pad(&x, 1, 2).unwrap();
        assert_eq!(p.shape(), &[1, 3, 5]);
        assert_eq!(&p.data()[..5], &[1.0, 2.0, 3.0, 2.0, 1.0]);
        assert_eq!(&p.data()[10..], &[1.0, 2.0, 3.0, 2.0, 1.0]);
        assert_eq!(crop(&p, 2, 3).unwrap(), x);
        assert_eq!(reflect_pad(&x, 0, 0).unwrap(), x);
    }

    #[test]
    fn transpose_roundtrip() {
        let x = Tensor::from_fn([2, 3, 4], |i| i as f64);
        let t1 = x.transpose_hw().unwrap();
        assert_eq!(t1.shape(), &[2, 4, 3]);
        assert_eq!(t1.data()[1], x.data()[4]);
        assert_eq!(t1.transpose_hw().unwrap(), x);
    }
}
