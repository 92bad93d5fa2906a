//! Selective state-space kernel.
//!
//! `A` is diagonal per channel and parameterized as `A = -exp(a_log)`, so the
//! zero-order-hold discretization is closed form:
//!
//! ```text
//! a_bar = exp(delta * a)
//! b_bar = (exp(delta * a) - 1) / a * b = phi(delta * a) * delta * b,   phi(x) = expm1(x) / x
//! ```
//!
//! The recurrence `h_k = a_bar_k * h_{k-1} + b_bar_k * u_k`,
//! `y_k = <c_k, h_k> + d * u_k` runs sequentially per channel in O(L * D * N).

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, param_err, Error, Result};
use crate::tensor::{self, Tensor};

/// Below this `|delta * a|` the ZOH factor switches to its Taylor series.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-6;

/// `expm1(x) / x`, continuous through `x = 0`.
pub fn zoh_phi(x: f64) -> f64 {
    if x.abs() < ZOH_SERIES_THRESHOLD {
        1.0 + x / 2.0 + x * x / 6.0
    } else {
        x.exp_m1() / x
    }
}

/// Derivative of [`zoh_phi`].
pub fn zoh_phi_deriv(x: f64) -> f64 {
    if x.abs() < 1e-3 {
        0.5 + x / 3.0 + x * x / 8.0 + x * x * x / 30.0
    } else {
        (x * x.exp() - x.exp_m1()) / (x * x)
    }
}

/// Zero-order-hold discretization of one diagonal state entry.
pub fn discretize_zoh(delta: f64, a: f64, b: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0) {
        return Err(param_err!("discretize_zoh: delta must be positive, got {delta}"));
    }
    if !(a < 0.0) {
        return Err(param_err!("discretize_zoh: a must be negative, got {a}"));
    }
    let x = delta * a;
    Ok((x.exp(), zoh_phi(x) * delta * b))
}

/// Per-timestep parameters of a selective scan over `L` steps, `D` channels and state size `N`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveParams {
    /// `[D, N]`; `A = -exp(a_log)`.
    pub a_log: Tensor,
    /// `[L, D]`, strictly positive.
    pub delta: Tensor,
    /// `[L, N]`
    pub b_seq: Tensor,
    /// `[L, N]`
    pub c_seq: Tensor,
    /// `[D]`
    pub d_skip: Tensor,
}

impl SelectiveParams {
    pub fn new(a_log: Tensor, delta: Tensor, b_seq: Tensor, c_seq: Tensor, d_skip: Tensor) -> Result<Self> {
        let p = Self { a_log, delta, b_seq, c_seq, d_skip };
        p.validate()?;
        Ok(p)
    }

    /// `(L, D, N)`
    pub fn dims(&self) -> (usize, usize, usize) {
        let (d, n) = (self.a_log.shape()[0], self.a_log.shape()[1]);
        (self.delta.shape()[0], d, n)
    }

    fn validate(&self) -> Result<()> {
        let (d, n) = self.a_log.dims2()?;
        let (l, dd) = self.delta.dims2()?;
        if dd != d {
            return Err(dim_err!("delta has {dd} channels, a_log has {d}"));
        }
        for (name, t) in [("b_seq", &self.b_seq), ("c_seq", &self.c_seq)] {
            if t.shape() != [l, n] {
                return Err(dim_err!("{name} must be [{l}, {n}], got {:?}", t.shape()));
            }
        }
        if self.d_skip.numel() != d {
            return Err(dim_err!("d_skip must have {d} entries, got {}", self.d_skip.numel()));
        }
        if let Some(bad) = self.delta.data().iter().find(|&&v| !(v > 0.0)) {
            return Err(param_err!("delta must be strictly positive, found {bad}"));
        }
        Ok(())
    }

    /// `A = -exp(a_log)` as a `[D, N]` tensor.
    pub fn a(&self) -> Tensor {
        self.a_log.map(|v| -v.exp())
    }
}

/// Builds input-dependent scan parameters: `delta = softplus(x W_delta^T + b_delta)`,
/// `B = x W_B^T`, `C = x W_C^T`.
pub fn selective_params_from_input(
    x_seq: &Tensor,
    w_delta: &Tensor,
    b_delta: &Tensor,
    w_b: &Tensor,
    w_c: &Tensor,
    a_log: &Tensor,
    d_skip: &Tensor,
) -> Result<SelectiveParams> {
    x_seq.dims2()?;
    let delta = tensor::softplus(&tensor::linear(x_seq, w_delta, Some(b_delta))?);
    let b_seq = tensor::linear(x_seq, w_b, None)?;
    let c_seq = tensor::linear(x_seq, w_c, None)?;
    SelectiveParams::new(a_log.clone(), delta, b_seq, c_seq, d_skip.clone())
}

/// Runs the recurrence for one channel, calling `visit(k, n, a_bar, b_bar, h_prev, h)`
/// for every state update. Returns the channel's outputs.
pub(crate) fn scan_channel(
    u: &[f64],
    p: &SelectiveParams,
    ch: usize,
    mut visit: impl FnMut(usize, usize, f64, f64, f64, f64),
) -> Vec<f64> {
    let (l, d, n) = p.dims();
    let a: Vec<f64> = p.a_log.data()[ch * n..(ch + 1) * n].iter().map(|v| -v.exp()).collect();
    let (delta, bs, cs) = (p.delta.data(), p.b_seq.data(), p.c_seq.data());
    let skip = p.d_skip.data()[ch];
    let mut h = vec![0.0; n];
    let mut y = Vec::with_capacity(l);
    for k in 0..l {
        let dt = delta[k * d + ch];
        let uk = u[k * d + ch];
        let mut acc = 0.0;
        for j in 0..n {
            let x = dt * a[j];
            let a_bar = x.exp();
            let b_bar = zoh_phi(x) * dt * bs[k * n + j];
            let prev = h[j];
            h[j] = a_bar * prev + b_bar * uk;
            visit(k, j, a_bar, b_bar, prev, h[j]);
            acc += cs[k * n + j] * h[j];
        }
        y.push(acc + skip * uk);
    }
    y
}

/// Selective scan of `u: [L, D]`; channels are independent and run in parallel.
pub fn selective_scan(u: &Tensor, p: &SelectiveParams) -> Result<Tensor> {
    let (l, d, n) = p.dims();
    if u.shape() != [l, d] {
        return Err(dim_err!("selective_scan: u must be [{l}, {d}], got {:?}", u.shape()));
    }
    let run = |ch: usize| scan_channel(u.data(), p, ch, |_, _, _, _, _, _| {});
    let cols: Vec<Vec<f64>> = if l * d * n >= 1 << 14 {
        (0..d).into_par_iter().map(run).collect()
    } else {
        (0..d).map(run).collect()
    };
    let mut out = vec![0.0; l * d];
    for (ch, col) in cols.iter().enumerate() {
        for (k, v) in col.iter().enumerate() {
            out[k * d + ch] = *v;
        }
    }
    Tensor::new([l, d], out)
}

/// Same recurrence, processed in sequence chunks of `chunk` steps with the state
/// carried across chunk boundaries. Produces output bit-identical to
/// [`selective_scan`].
pub fn selective_scan_chunked(u: &Tensor, p: &SelectiveParams, chunk: usize) -> Result<Tensor> {
    let (l, d, n) = p.dims();
    if u.shape() != [l, d] {
        return Err(dim_err!("selective_scan: u must be [{l}, {d}], got {:?}", u.shape()));
    }
    if chunk == 0 {
        return Err(param_err!("chunk length must be positive"));
    }
    let a = p.a();
    let mut h = vec![0.0; d * n];
    let mut out = vec![0.0; l * d];
    let (delta, bs, cs, ud) = (p.delta.data(), p.b_seq.data(), p.c_seq.data(), u.data());
    for start in (0..l).step_by(chunk) {
        let end = (start + chunk).min(l);
        for (ch, hc) in h.chunks_mut(n).enumerate() {
            let skip = p.d_skip.data()[ch];
            for k in start..end {
                let dt = delta[k * d + ch];
                let uk = ud[k * d + ch];
                let mut acc = 0.0;
                for (j, hj) in hc.iter_mut().enumerate() {
                    let x = dt * a.data()[ch * n + j];
                    *hj = x.exp() * *hj + zoh_phi(x) * dt * bs[k * n + j] * uk;
                    acc += cs[k * n + j] * *hj;
                }
                out[k * d + ch] = acc + skip * uk;
            }
        }
    }
    Tensor::new([l, d], out)
}

/// Convolution kernel `K_j = <c, a_bar^j * b_bar>` of a time-invariant diagonal SSM.
pub fn lti_kernel(a_bar: &[f64], b_bar: &[f64], c: &[f64], len: usize) -> Result<Tensor> {
    if a_bar.len() != b_bar.len() || a_bar.len() != c.len() {
        return Err(dim_err!("lti_kernel: a_bar, b_bar, c must share the state size"));
    }
    if len == 0 {
        return Err(param_err!("lti_kernel: length must be positive"));
    }
    let mut power: Vec<f64> = b_bar.to_vec();
    let mut k = Vec::with_capacity(len);
    for _ in 0..len {
        k.push(c.iter().zip(&power).map(|(c, p)| c * p).sum());
        power.iter_mut().zip(a_bar).for_each(|(p, a)| *p *= a);
    }
    Tensor::new([len], k)
}

/// Causal convolution `y_k = sum_{j<=k} K_j u_{k-j} + d_skip * u_k`.
pub fn lti_apply(u: &Tensor, kernel: &Tensor, d_skip: f64) -> Result<Tensor> {
    if u.numel() != kernel.numel() {
        return Err(dim_err!("lti_apply: u has {} steps, kernel {}", u.numel(), kernel.numel()));
    }
    let (ud, kd) = (u.data(), kernel.data());
    let y = (0..ud.len())
        .map(|k| (0..=k).map(|j| kd[j] * ud[k - j]).sum::<f64>() + d_skip * ud[k])
        .collect();
    Tensor::new([ud.len()], y)
}

/// How a 2D grid is unfolded into a 1D scan sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DirectionOrder {
    /// Row-major raster.
    H,
    /// Column-major raster.
    V,
    /// Reversed row-major.
    RH,
    /// Reversed column-major.
    RV,
}

impl DirectionOrder {
    pub const ALL: [DirectionOrder; 4] = [Self::H, Self::V, Self::RH, Self::RV];

    pub fn tag(self) -> u8 {
        match self {
            Self::H => 0,
            Self::V => 1,
            Self::RH => 2,
            Self::RV => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    /// Raster index (`y * w + x`) of the pixel visited at each sequence step.
    pub fn order(self, h: usize, w: usize) -> Vec<usize> {
        let hv: Vec<usize> = match self {
            Self::H | Self::RH => (0..h * w).collect(),
            Self::V | Self::RV => (0..w).flat_map(|x| (0..h).map(move |y| y * w + x)).collect(),
        };
        match self {
            Self::RH | Self::RV => hv.into_iter().rev().collect(),
            _ => hv,
        }
    }
}

impl fmt::Display for DirectionOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::H => "H",
            Self::V => "V",
            Self::RH => "RH",
            Self::RV => "RV",
        })
    }
}

impl FromStr for DirectionOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "H" => Ok(Self::H),
            "V" => Ok(Self::V),
            "RH" => Ok(Self::RH),
            "RV" => Ok(Self::RV),
            _ => Err(param_err!("unknown scan direction {s:?}")),
        }
    }
}

/// `[C, H, W] -> [H*W, C]` following `dir`.
pub fn flatten_direction(x: &Tensor, dir: DirectionOrder) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let xd = x.data();
    let mut out = Vec::with_capacity(c * h * w);
    for pos in dir.order(h, w) {
        out.extend((0..c).map(|ch| xd[ch * h * w + pos]));
    }
    Tensor::new([h * w, c], out)
}

/// Inverse of [`flatten_direction`].
pub fn unflatten_direction(seq: &Tensor, dir: DirectionOrder, h: usize, w: usize) -> Result<Tensor> {
    let (l, c) = seq.dims2()?;
    if l != h * w {
        return Err(dim_err!("unflatten: {l} steps cannot fill a {h}x{w} grid"));
    }
    let sd = seq.data();
    let mut out = vec![0.0; l * c];
    for (k, pos) in dir.order(h, w).into_iter().enumerate() {
        for ch in 0..c {
            out[ch * l + pos] = sd[k * c + ch];
        }
    }
    Tensor::new([c, h, w], out)
}
