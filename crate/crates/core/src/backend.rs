//! The op vocabulary the network is written against.
//!
//! Blocks and the full model are generic over [`Backend`], so the same code
//! path drives plain inference ([`Eager`]) and recorded training
//! ([`crate::grad::GradTape`]).

use crate::error::Result;
use crate::scan::{self, DirectionOrder, SelectiveParams};
use crate::tensor::{self, Axis, ConvGeom, ConvSpec, Tensor};

pub trait Backend {
    type Value: Clone;

    fn tensor<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor;

    fn shape<'a>(&'a self, v: &'a Self::Value) -> &'a [usize] {
        self.tensor(v).shape()
    }

    fn linear(&mut self, x: &Self::Value, w: &Self::Value, b: Option<&Self::Value>, axis: Axis) -> Result<Self::Value>;
    fn conv2d(&mut self, x: &Self::Value, w: &Self::Value, b: Option<&Self::Value>, spec: ConvSpec) -> Result<Self::Value>;
    fn layernorm(&mut self, x: &Self::Value, gamma: &Self::Value, beta: &Self::Value, eps: f64, axis: Axis) -> Result<Self::Value>;
    fn silu(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn softplus(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn scale_channels(&mut self, x: &Self::Value, s: &Self::Value) -> Result<Self::Value>;
    /// Elementwise clamp to `[0, 1]`.
    fn clamp01(&mut self, x: &Self::Value) -> Result<Self::Value>;
    /// Elementwise `1 - x`.
    fn one_minus(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn repeat_blocks(&mut self, x: &Self::Value, n: usize) -> Result<Self::Value>;
    fn pixel_shuffle(&mut self, x: &Self::Value, r: usize) -> Result<Self::Value>;
    fn flatten_direction(&mut self, x: &Self::Value, dir: DirectionOrder) -> Result<Self::Value>;
    fn unflatten_direction(&mut self, x: &Self::Value, dir: DirectionOrder, h: usize, w: usize) -> Result<Self::Value>;
    fn slice_channels(&mut self, x: &Self::Value, start: usize, len: usize) -> Result<Self::Value>;
    #[allow(clippy::too_many_arguments)]
    fn selective_scan(
        &mut self,
        u: &Self::Value,
        delta: &Self::Value,
        a_log: &Self::Value,
        b_seq: &Self::Value,
        c_seq: &Self::Value,
        d_skip: &Self::Value,
    ) -> Result<Self::Value>;
}

/// FLOPs charged for one linear application: two per multiply-add.
pub fn linear_flops(x: &[usize], w: &[usize], axis: Axis) -> u64 {
    let numel: usize = x.iter().product();
    let cin = x[axis.index(x.len())];
    2 * (numel / cin * w[0] * cin) as u64
}

pub fn scan_flops(l: usize, d: usize, n: usize) -> u64 {
    // State update and readout are one multiply-add per state entry; the skip adds one per channel.
    2 * (l * d * (2 * n + 1)) as u64
}

/// Direct evaluation on [`Tensor`]s, optionally tallying FLOPs.
#[derive(Debug, Default)]
pub struct Eager {
    flops: Option<u64>,
}

impl Eager {
    pub fn new() -> Self {
        Self { flops: None }
    }

    pub fn counting() -> Self {
        Self { flops: Some(0) }
    }

    pub fn flops(&self) -> Option<u64> {
        self.flops
    }

    fn charge(&mut self, n: u64) {
        if let Some(f) = self.flops.as_mut() {
            *f += n;
        }
    }
}

impl Backend for Eager {
    type Value = Tensor;

    fn tensor<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }

    fn linear(&mut self, x: &Tensor, w: &Tensor, b: Option<&Tensor>, axis: Axis) -> Result<Tensor> {
        let y = tensor::linear_axis(x, w, b, axis)?;
        self.charge(linear_flops(x.shape(), w.shape(), axis));
        Ok(y)
    }

    fn conv2d(&mut self, x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: ConvSpec) -> Result<Tensor> {
        let y = tensor::conv2d(x, w, b, spec)?;
        self.charge(2 * ConvGeom::new(x.shape(), w.shape(), spec)?.macs() as u64);
        Ok(y)
    }

    fn layernorm(&mut self, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64, axis: Axis) -> Result<Tensor> {
        tensor::layernorm_axis(x, gamma, beta, eps, axis)
    }

    fn silu(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(tensor::silu(x))
    }

    fn softplus(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(tensor::softplus(x))
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.add(b)
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.mul(b)
    }

    fn scale_channels(&mut self, x: &Tensor, s: &Tensor) -> Result<Tensor> {
        tensor::scale_channels(x, s)
    }

    fn clamp01(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(x.map(|v| v.clamp(0.0, 1.0)))
    }

    fn one_minus(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(x.map(|v| 1.0 - v))
    }

    fn repeat_blocks(&mut self, x: &Tensor, n: usize) -> Result<Tensor> {
        tensor::repeat_blocks(x, n)
    }

    fn pixel_shuffle(&mut self, x: &Tensor, r: usize) -> Result<Tensor> {
        tensor::pixel_shuffle(x, r)
    }

    fn flatten_direction(&mut self, x: &Tensor, dir: DirectionOrder) -> Result<Tensor> {
        scan::flatten_direction(x, dir)
    }

    fn unflatten_direction(&mut self, x: &Tensor, dir: DirectionOrder, h: usize, w: usize) -> Result<Tensor> {
        scan::unflatten_direction(x, dir, h, w)
    }

    fn slice_channels(&mut self, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        tensor::slice_channels(x, start, len)
    }

    fn selective_scan(
        &mut self,
        u: &Tensor,
        delta: &Tensor,
        a_log: &Tensor,
        b_seq: &Tensor,
        c_seq: &Tensor,
        d_skip: &Tensor,
    ) -> Result<Tensor> {
        let p = SelectiveParams::new(a_log.clone(), delta.clone(), b_seq.clone(), c_seq.clone(), d_skip.clone())?;
        let y = scan::selective_scan(u, &p)?;
        let (l, d, n) = p.dims();
        self.charge(scan_flops(l, d, n));
        Ok(y)
    }
}
