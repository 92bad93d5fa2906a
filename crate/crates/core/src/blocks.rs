//! Hierarchical Mamba Block (HMB) and its parts.
//!
//! An HMB holds a local branch (L-SSM) at full resolution and a region branch
//! (R-SSM) on an `n`-times downsampled map, both scanning in one direction.
//! The region output is repeated back onto its `n x n` blocks and blended with
//! the local output through per-channel factors `s_f`, then a gated FFN runs
//! with scaled residuals:
//!
//! ```text
//! F      = s_f * L-SSM(LN(I_l)) + (1 - s_f) * repeat(R-SSM(LN(I_r))) + s1 * I_l
//! F_next = G-FFN(F) + s2 * F
//! ```

use rand::Rng;

use crate::backend::Backend;
use crate::error::{dim_err, param_err, Result};
use crate::scan::DirectionOrder;
use crate::tensor::{Axis, ConvSpec, Tensor};

pub const LN_EPS: f64 = 1e-5;
/// Kernel size of the depthwise conv inside each SSM branch.
pub const DW_KERNEL: usize = 3;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Callback for [`LayerNormWeights::try_map`] and friends: `(name, param) -> mapped`.
pub type MapFn<'f, 'a, T, U> = dyn FnMut(&str, &'a T) -> Result<U> + 'f;

/// Uniform in `[-bound, bound]`, rounded to f32 so fresh weights survive serialization exactly.
pub(crate) fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| (rng.gen_range(-bound..=bound) as f32) as f64)
}

pub(crate) fn fan_in_uniform(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    uniform(rng, shape, 1.0 / (fan_in as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormWeights<T = Tensor> {
    pub gamma: T,
    pub beta: T,
}

impl LayerNormWeights {
    pub fn new(c: usize) -> Self {
        Self { gamma: Tensor::full([c], 1.0), beta: Tensor::zeros([c]) }
    }
}

impl<T> LayerNormWeights<T> {
    pub fn try_map<'a, U>(&'a self, prefix: &str, f: &mut MapFn<'_, 'a, T, U>) -> Result<LayerNormWeights<U>> {
        Ok(LayerNormWeights { gamma: f(&join(prefix, "gamma"), &self.gamma)?, beta: f(&join(prefix, "beta"), &self.beta)? })
    }
}

/// Weights of one SSM branch (L-SSM or R-SSM). `D` is the expanded width.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmBranchWeights<T = Tensor> {
    /// `[D, C_in]`, scan-path expansion.
    pub in_x: T,
    /// `[D, C_in]`, gate-path expansion.
    pub in_z: T,
    /// `[D, 1, k, k]` depthwise kernel.
    pub dw: T,
    /// `[D]`
    pub dw_bias: T,
    /// `[D, D]`
    pub w_delta: T,
    /// `[D]`
    pub b_delta: T,
    /// `[N, D]`
    pub w_b: T,
    /// `[N, D]`
    pub w_c: T,
    /// `[D, N]`
    pub a_log: T,
    /// `[D]`
    pub d_skip: T,
    pub norm: LayerNormWeights<T>,
    /// `[C_out, D]`
    pub out: T,
}

impl SsmBranchWeights {
    pub fn init(rng: &mut impl Rng, c_in: usize, c_out: usize, inner: usize, state: usize) -> Self {
        // dt in [1e-3, 1e-1] log-uniformly; bias is softplus^-1(dt).
        let b_delta = Tensor::from_fn([inner], |_| {
            let dt = (rng.gen_range(1e-3f64.ln()..0.1f64.ln())).exp();
            ((dt + (-dt).exp_m1()) as f32) as f64
        });
        Self {
            in_x: fan_in_uniform(rng, &[inner, c_in]),
            in_z: fan_in_uniform(rng, &[inner, c_in]),
            dw: fan_in_uniform(rng, &[inner, 1, DW_KERNEL, DW_KERNEL]),
            dw_bias: Tensor::zeros([inner]),
            w_delta: uniform(rng, &[inner, inner], 0.1 / (inner as f64).sqrt()),
            b_delta,
            w_b: fan_in_uniform(rng, &[state, inner]),
            w_c: fan_in_uniform(rng, &[state, inner]),
            a_log: Tensor::from_fn([inner, state], |i| (((i % state) + 1) as f64).ln() as f32 as f64),
            d_skip: Tensor::full([inner], 1.0),
            norm: LayerNormWeights::new(inner),
            out: fan_in_uniform(rng, &[c_out, inner]),
        }
    }

    /// Zeroes every projection and bias so the branch outputs exactly zero.
    pub fn zero_projections(&mut self) {
        for t in [&mut self.in_x, &mut self.in_z, &mut self.dw, &mut self.dw_bias, &mut self.w_delta, &mut self.w_b, &mut self.w_c, &mut self.out] {
            t.data_mut().fill(0.0);
        }
    }
}

impl<T> SsmBranchWeights<T> {
    pub fn try_map<'a, U>(&'a self, prefix: &str, f: &mut MapFn<'_, 'a, T, U>) -> Result<SsmBranchWeights<U>> {
        let p = |n: &str| join(prefix, n);
        Ok(SsmBranchWeights {
            in_x: f(&p("in_x"), &self.in_x)?,
            in_z: f(&p("in_z"), &self.in_z)?,
            dw: f(&p("dw"), &self.dw)?,
            dw_bias: f(&p("dw_bias"), &self.dw_bias)?,
            w_delta: f(&p("w_delta"), &self.w_delta)?,
            b_delta: f(&p("b_delta"), &self.b_delta)?,
            w_b: f(&p("w_b"), &self.w_b)?,
            w_c: f(&p("w_c"), &self.w_c)?,
            a_log: f(&p("a_log"), &self.a_log)?,
            d_skip: f(&p("d_skip"), &self.d_skip)?,
            norm: self.norm.try_map(&p("norm"), f)?,
            out: f(&p("out"), &self.out)?,
        })
    }
}

/// Gated feed-forward network: LN, 1x1 expand to `2 * C_h`, split, multiply halves, 1x1 project.
#[derive(Clone, Debug, PartialEq)]
pub struct GffnWeights<T = Tensor> {
    pub norm: LayerNormWeights<T>,
    /// `[2 * C_h, C, 1, 1]`
    pub w1: T,
    pub b1: T,
    /// `[C, C_h, 1, 1]`
    pub w2: T,
    pub b2: T,
}

impl GffnWeights {
    pub fn init(rng: &mut impl Rng, c: usize, hidden: usize) -> Self {
        Self {
            norm: LayerNormWeights::new(c),
            w1: fan_in_uniform(rng, &[2 * hidden, c, 1, 1]),
            b1: Tensor::zeros([2 * hidden]),
            w2: fan_in_uniform(rng, &[c, hidden, 1, 1]),
            b2: Tensor::zeros([c]),
        }
    }
}

impl<T> GffnWeights<T> {
    pub fn try_map<'a, U>(&'a self, prefix: &str, f: &mut MapFn<'_, 'a, T, U>) -> Result<GffnWeights<U>> {
        let p = |n: &str| join(prefix, n);
        Ok(GffnWeights {
            norm: self.norm.try_map(&p("norm"), f)?,
            w1: f(&p("w1"), &self.w1)?,
            b1: f(&p("b1"), &self.b1)?,
            w2: f(&p("w2"), &self.w2)?,
            b2: f(&p("b2"), &self.b2)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HmbWeights<T = Tensor> {
    pub ln1: LayerNormWeights<T>,
    pub ln1r: LayerNormWeights<T>,
    /// Local branch, `C -> C`.
    pub lssm: SsmBranchWeights<T>,
    /// Region branch, `C_r -> C`.
    pub rssm: SsmBranchWeights<T>,
    /// `[C]` skip scale around the SSM stage.
    pub s1: T,
    /// `[C]` skip scale around the G-FFN.
    pub s2: T,
    /// `[C]` fusion factors, clamped to `[0, 1]` at use.
    pub s_f: T,
    pub gffn: GffnWeights<T>,
    /// `[C_r, C]`, maps the fused region output back to the carried region width.
    pub carry: T,
    pub dir: DirectionOrder,
}

/// Widths that fix every HMB weight shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HmbDims {
    pub channels: usize,
    pub region_channels: usize,
    pub local_inner: usize,
    pub region_inner: usize,
    pub state: usize,
    pub ffn_hidden: usize,
}

impl HmbWeights {
    pub fn init(rng: &mut impl Rng, dims: HmbDims, dir: DirectionOrder) -> Self {
        let HmbDims { channels: c, region_channels: cr, local_inner, region_inner, state, ffn_hidden } = dims;
        Self {
            ln1: LayerNormWeights::new(c),
            ln1r: LayerNormWeights::new(cr),
            lssm: SsmBranchWeights::init(rng, c, c, local_inner, state),
            rssm: SsmBranchWeights::init(rng, cr, c, region_inner, state),
            s1: Tensor::full([c], 1.0),
            s2: Tensor::full([c], 1.0),
            s_f: Tensor::full([c], 0.5),
            gffn: GffnWeights::init(rng, c, ffn_hidden),
            carry: fan_in_uniform(rng, &[cr, c]),
            dir,
        }
    }

    /// Zeroes both SSM branches, the G-FFN and the region carry; scales are untouched.
    pub fn zero_branches(&mut self) {
        self.lssm.zero_projections();
        self.rssm.zero_projections();
        for t in [&mut self.gffn.w1, &mut self.gffn.b1, &mut self.gffn.w2, &mut self.gffn.b2, &mut self.carry] {
            t.data_mut().fill(0.0);
        }
    }
}

impl<T> HmbWeights<T> {
    pub fn try_map<'a, U>(&'a self, prefix: &str, f: &mut MapFn<'_, 'a, T, U>) -> Result<HmbWeights<U>> {
        let p = |n: &str| join(prefix, n);
        Ok(HmbWeights {
            ln1: self.ln1.try_map(&p("ln1"), f)?,
            ln1r: self.ln1r.try_map(&p("ln1r"), f)?,
            lssm: self.lssm.try_map(&p("lssm"), f)?,
            rssm: self.rssm.try_map(&p("rssm"), f)?,
            s1: f(&p("s1"), &self.s1)?,
            s2: f(&p("s2"), &self.s2)?,
            s_f: f(&p("s_f"), &self.s_f)?,
            gffn: self.gffn.try_map(&p("gffn"), f)?,
            carry: f(&p("carry"), &self.carry)?,
            dir: self.dir,
        })
    }
}

/// One SSM branch on a `[C_in, h, w]` map:
///
/// ```text
/// b1  = LN(SSM(SiLU(DWConv(Linear(x)))))
/// b2  = SiLU(Linear(x))
/// out = Linear(b1 * b2)
/// ```
///
/// `SSM` unfolds the map along `dir`, derives input-dependent `delta`, `B`, `C`
/// from the unfolded sequence, scans, and folds back.
pub fn ssm_branch<B: Backend>(be: &mut B, x: &B::Value, w: &SsmBranchWeights<B::Value>, dir: DirectionOrder) -> Result<B::Value> {
    let &[_, h, wd] = be.shape(x) else {
        return Err(dim_err!("ssm_branch: input must be [C, H, W], got {:?}", be.shape(x)));
    };
    if !be.tensor(x).is_finite() {
        return Err(param_err!("ssm_branch: non-finite input"));
    }
    let inner = be.shape(&w.in_x)[0];
    let k = be.shape(&w.dw)[2];
    let xp = be.linear(x, &w.in_x, None, Axis::Channel)?;
    let xc = be.conv2d(&xp, &w.dw, Some(&w.dw_bias), ConvSpec::depthwise(k, inner))?;
    let xa = be.silu(&xc)?;
    let seq = be.flatten_direction(&xa, dir)?;
    let dt_pre = be.linear(&seq, &w.w_delta, Some(&w.b_delta), Axis::Last)?;
    let delta = be.softplus(&dt_pre)?;
    let b_seq = be.linear(&seq, &w.w_b, None, Axis::Last)?;
    let c_seq = be.linear(&seq, &w.w_c, None, Axis::Last)?;
    let ys = be.selective_scan(&seq, &delta, &w.a_log, &b_seq, &c_seq, &w.d_skip)?;
    let y = be.unflatten_direction(&ys, dir, h, wd)?;
    let b1 = be.layernorm(&y, &w.norm.gamma, &w.norm.beta, LN_EPS, Axis::Channel)?;
    let z = be.linear(x, &w.in_z, None, Axis::Channel)?;
    let b2 = be.silu(&z)?;
    let m = be.mul(&b1, &b2)?;
    be.linear(&m, &w.out, None, Axis::Channel)
}

/// `n x n` stride-`n` convolution producing the region map.
pub fn region_project<B: Backend>(be: &mut B, x: &B::Value, n: usize, w: &B::Value, b: Option<&B::Value>) -> Result<B::Value> {
    let &[_, h, wd] = be.shape(x) else {
        return Err(dim_err!("region_project: input must be [C, H, W]"));
    };
    if n == 0 || h % n != 0 || wd % n != 0 {
        return Err(crate::Error::Internal(format!("region_project: {h}x{wd} not divisible by region size {n}")));
    }
    be.conv2d(x, w, b, ConvSpec::new(n, 0, 1))
}

/// `s_f * x_l + (1 - s_f) * repeat(x_r)` with `s_f` clamped to `[0, 1]`.
pub fn fuse<B: Backend>(be: &mut B, x_l: &B::Value, x_r: &B::Value, s_f: &B::Value, n: usize) -> Result<B::Value> {
    let (ls, rs) = (be.shape(x_l).to_vec(), be.shape(x_r).to_vec());
    if ls.len() != 3 || rs.len() != 3 || ls[0] != rs[0] || ls[1] != rs[1] * n || ls[2] != rs[2] * n {
        return Err(dim_err!("fuse: local {ls:?} and region {rs:?} do not match at region size {n}"));
    }
    let sf = be.clamp01(s_f)?;
    let local = be.scale_channels(x_l, &sf)?;
    let rep = be.repeat_blocks(x_r, n)?;
    let inv = be.one_minus(&sf)?;
    let region = be.scale_channels(&rep, &inv)?;
    be.add(&local, &region)
}

pub fn gffn<B: Backend>(be: &mut B, f: &B::Value, w: &GffnWeights<B::Value>) -> Result<B::Value> {
    let expanded = be.shape(&w.w1)[0];
    if expanded % 2 != 0 {
        return Err(param_err!("gffn: expansion width {expanded} must be even"));
    }
    let normed = be.layernorm(f, &w.norm.gamma, &w.norm.beta, LN_EPS, Axis::Channel)?;
    let h = be.conv2d(&normed, &w.w1, Some(&w.b1), ConvSpec::new(1, 0, 1))?;
    let half = expanded / 2;
    let h1 = be.slice_channels(&h, 0, half)?;
    let h2 = be.slice_channels(&h, half, half)?;
    let gated = be.mul(&h1, &h2)?;
    be.conv2d(&gated, &w.w2, Some(&w.b2), ConvSpec::new(1, 0, 1))
}

/// One HMB step. Returns `(F_next_l, F_next_r)`.
pub fn hmb_forward<B: Backend>(
    be: &mut B,
    i_l: &B::Value,
    i_r: &B::Value,
    w: &HmbWeights<B::Value>,
    n: usize,
) -> Result<(B::Value, B::Value)> {
    let nl = be.layernorm(i_l, &w.ln1.gamma, &w.ln1.beta, LN_EPS, Axis::Channel)?;
    let f_l = ssm_branch(be, &nl, &w.lssm, w.dir)?;
    let nr = be.layernorm(i_r, &w.ln1r.gamma, &w.ln1r.beta, LN_EPS, Axis::Channel)?;
    let f_r = ssm_branch(be, &nr, &w.rssm, w.dir)?;
    let fused = fuse(be, &f_l, &f_r, &w.s_f, n)?;
    let skip = be.scale_channels(i_l, &w.s1)?;
    let f = be.add(&fused, &skip)?;
    let g = gffn(be, &f, &w.gffn)?;
    let s = be.scale_channels(&f, &w.s2)?;
    let next_l = be.add(&g, &s)?;
    let next_r = be.linear(&f_r, &w.carry, None, Axis::Channel)?;
    Ok((next_l, next_r))
}
