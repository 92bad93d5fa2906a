//! Full Hi-Mamba model: shallow conv, `N2` direction-alternation groups of
//! `N1` HMBs each, and a conv + pixel-shuffle reconstruction head.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{scan_flops, Backend, Eager};
use crate::blocks::{self, fan_in_uniform, join, HmbDims, HmbWeights, MapFn, DW_KERNEL};
use crate::error::{param_err, Error, Result};
use crate::scan::DirectionOrder;
use crate::tensor::{self, ConvSpec, Tensor};

/// Smallest accepted input side, in pixels.
pub const MIN_INPUT_SIDE: usize = 8;

fn default_lambda() -> f32 {
    2.0
}

fn default_dir_cycle() -> Vec<DirectionOrder> {
    DirectionOrder::ALL.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiMambaConfig {
    pub scale: usize,
    #[serde(rename = "C")]
    pub channels: usize,
    #[serde(rename = "C_r")]
    pub region_channels: usize,
    #[serde(rename = "n")]
    pub region_size: usize,
    #[serde(rename = "N1")]
    pub blocks_per_group: usize,
    #[serde(rename = "N2")]
    pub groups: usize,
    #[serde(rename = "lambda", alias = "λ", default = "default_lambda")]
    pub expansion: f32,
    #[serde(rename = "N_state")]
    pub state_size: usize,
    #[serde(rename = "C_h")]
    pub ffn_hidden: usize,
    #[serde(default = "default_dir_cycle")]
    pub dir_cycle: Vec<DirectionOrder>,
}

impl HiMambaConfig {
    /// Desk-scale preset: 16 channels, 2 groups of 4 HMBs.
    pub fn tiny() -> Self {
        Self {
            scale: 2,
            channels: 16,
            region_channels: 8,
            region_size: 4,
            blocks_per_group: 4,
            groups: 2,
            expansion: 2.0,
            state_size: 8,
            ffn_hidden: 16,
            dir_cycle: default_dir_cycle(),
        }
    }

    /// Desk-scale preset: 32 channels, 4 groups of 4 HMBs.
    pub fn mini() -> Self {
        Self { channels: 32, region_channels: 16, groups: 4, ffn_hidden: 32, ..Self::tiny() }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "tiny" => Some(Self::tiny()),
            "mini" => Some(Self::mini()),
            _ => None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Accepts a preset name or a path to a JSON config.
    pub fn load(spec: &str) -> Result<Self> {
        if let Some(cfg) = Self::preset(spec) {
            return Ok(cfg);
        }
        Self::from_json(&std::fs::read_to_string(Path::new(spec))?)
    }

    fn expanded(&self, c: usize) -> Result<usize> {
        let inner = self.expansion as f64 * c as f64;
        if !(inner >= 1.0) || inner.fract() != 0.0 {
            return Err(param_err!("expansion {} times {c} channels is not a positive integer", self.expansion));
        }
        Ok(inner as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.scale) {
            return Err(param_err!("scale must be 2, 3 or 4, got {}", self.scale));
        }
        let positive = [
            ("C", self.channels),
            ("C_r", self.region_channels),
            ("n", self.region_size),
            ("N1", self.blocks_per_group),
            ("N_state", self.state_size),
            ("C_h", self.ffn_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(param_err!("{name} must be positive"));
        }
        if self.dir_cycle.is_empty() {
            return Err(param_err!("dir_cycle must not be empty"));
        }
        self.expanded(self.channels)?;
        self.expanded(self.region_channels)?;
        Ok(())
    }

    pub fn hmb_dims(&self) -> HmbDims {
        HmbDims {
            channels: self.channels,
            region_channels: self.region_channels,
            local_inner: self.expanded(self.channels).expect("validated config"),
            region_inner: self.expanded(self.region_channels).expect("validated config"),
            state: self.state_size,
            ffn_hidden: self.ffn_hidden,
        }
    }

    /// Scan direction of HMB `i` within a group.
    pub fn direction(&self, i: usize) -> DirectionOrder {
        self.dir_cycle[i % self.dir_cycle.len()]
    }

    /// Height and width after reflect-padding up to a multiple of the region size.
    pub fn padded_size(&self, h: usize, w: usize) -> (usize, usize) {
        let n = self.region_size;
        (h.div_ceil(n) * n, w.div_ceil(n) * n)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupWeights<T = Tensor> {
    /// `[C_r, C, n, n]`
    pub region_w: T,
    pub region_b: T,
    pub hmbs: Vec<HmbWeights<T>>,
    /// `[C, C, 3, 3]`
    pub refine_w: T,
    pub refine_b: T,
}

impl<T> GroupWeights<T> {
    pub fn try_map<'a, U>(&'a self, prefix: &str, f: &mut MapFn<'_, 'a, T, U>) -> Result<GroupWeights<U>> {
        let p = |n: &str| join(prefix, n);
        Ok(GroupWeights {
            region_w: f(&p("region_w"), &self.region_w)?,
            region_b: f(&p("region_b"), &self.region_b)?,
            hmbs: self
                .hmbs
                .iter()
                .enumerate()
                .map(|(i, h)| h.try_map(&p(&format!("hmbs.{i}")), f))
                .collect::<Result<_>>()?,
            refine_w: f(&p("refine_w"), &self.refine_w)?,
            refine_b: f(&p("refine_b"), &self.refine_b)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T = Tensor> {
    pub config: HiMambaConfig,
    /// `[C, 3, 3, 3]`
    pub head_w: T,
    pub head_b: T,
    pub groups: Vec<GroupWeights<T>>,
    /// `[3 * scale^2, C, 3, 3]`
    pub recon_w: T,
    pub recon_b: T,
}

impl<T> ModelWeights<T> {
    /// Maps every parameter in a fixed order (head, groups in order, reconstruction),
    /// passing its dotted name.
    pub fn try_map<'a, U>(&'a self, f: &mut MapFn<'_, 'a, T, U>) -> Result<ModelWeights<U>> {
        Ok(ModelWeights {
            config: self.config.clone(),
            head_w: f("head_w", &self.head_w)?,
            head_b: f("head_b", &self.head_b)?,
            groups: self
                .groups
                .iter()
                .enumerate()
                .map(|(i, g)| g.try_map(&format!("groups.{i}"), f))
                .collect::<Result<_>>()?,
            recon_w: f("recon_w", &self.recon_w)?,
            recon_b: f("recon_b", &self.recon_b)?,
        })
    }

    /// `(name, param)` pairs in traversal order.
    pub fn named_params(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.try_map(&mut |name, t| {
            out.push((name.to_string(), t));
            Ok(())
        })
        .expect("infallible visitor");
        out
    }

    pub fn params(&self) -> Vec<&T> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }
}

impl ModelWeights {
    /// Random initialization; every value is exactly representable in f32.
    pub fn init(config: &HiMambaConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, cr, n) = (config.channels, config.region_channels, config.region_size);
        let head_w = fan_in_uniform(&mut rng, &[c, 3, 3, 3]);
        let groups = (0..config.groups)
            .map(|_| GroupWeights {
                region_w: fan_in_uniform(&mut rng, &[cr, c, n, n]),
                region_b: Tensor::zeros([cr]),
                hmbs: (0..config.blocks_per_group)
                    .map(|i| HmbWeights::init(&mut rng, config.hmb_dims(), config.direction(i)))
                    .collect(),
                refine_w: fan_in_uniform(&mut rng, &[c, c, 3, 3]),
                refine_b: Tensor::zeros([c]),
            })
            .collect();
        let out = 3 * config.scale * config.scale;
        Ok(Self {
            config: config.clone(),
            head_w,
            head_b: Tensor::zeros([c]),
            groups,
            recon_w: fan_in_uniform(&mut rng, &[out, c, 3, 3]),
            recon_b: Tensor::zeros([out]),
        })
    }

    /// Zeroes every branch, carry and refinement weight, making each group an exact identity
    /// while `s1 = s2 = 1`.
    pub fn zero_deep_path(&mut self) {
        for g in &mut self.groups {
            g.hmbs.iter_mut().for_each(HmbWeights::zero_branches);
            g.refine_w.data_mut().fill(0.0);
            g.refine_b.data_mut().fill(0.0);
        }
    }

    /// Rebuilds weights from tensors in [`ModelWeights::try_map`] order.
    pub fn from_params(config: &HiMambaConfig, params: Vec<Tensor>) -> Result<Self> {
        let template = Self::init(config, 0)?;
        let mut it = params.into_iter();
        let w = template.try_map(&mut |name, t| {
            let p = it.next().ok_or_else(|| Error::Internal(format!("missing parameter {name}")))?;
            if p.shape() != t.shape() {
                return Err(crate::error::dim_err!("{name}: expected {:?}, got {:?}", t.shape(), p.shape()));
            }
            Ok(p)
        })?;
        if it.next().is_some() {
            return Err(Error::Internal("more tensors than parameters".into()));
        }
        Ok(w)
    }

    pub fn num_elements(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::serialize::save_weights(self, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        crate::serialize::load_weights(path)
    }
}

/// One direction-alternation group with its group residual.
pub fn dahmg_forward<B: Backend>(be: &mut B, f_in: &B::Value, g: &GroupWeights<B::Value>, config: &HiMambaConfig) -> Result<B::Value> {
    let n = config.region_size;
    let mut f_r = blocks::region_project(be, f_in, n, &g.region_w, Some(&g.region_b))?;
    let mut f_l = f_in.clone();
    for hmb in &g.hmbs {
        (f_l, f_r) = blocks::hmb_forward(be, &f_l, &f_r, hmb, n)?;
    }
    let refined = be.conv2d(&f_l, &g.refine_w, Some(&g.refine_b), ConvSpec::same(3))?;
    be.add(&refined, f_in)
}

/// Model body on an input whose sides are already multiples of the region size.
pub fn model_forward<B: Backend>(be: &mut B, w: &ModelWeights<B::Value>, img: &B::Value) -> Result<B::Value> {
    let f_l = be.conv2d(img, &w.head_w, Some(&w.head_b), ConvSpec::same(3))?;
    let mut f_d = f_l.clone();
    for g in &w.groups {
        f_d = dahmg_forward(be, &f_d, g, &w.config)?;
    }
    let merged = be.add(&f_l, &f_d)?;
    let r = be.conv2d(&merged, &w.recon_w, Some(&w.recon_b), ConvSpec::same(3))?;
    be.pixel_shuffle(&r, w.config.scale)
}

/// Super-resolves a `[3, H, W]` image: reflect-pads to a multiple of the region size,
/// runs the model, and crops back to `[3, scale * H, scale * W]`.
pub fn himamba_forward(img: &Tensor, weights: &ModelWeights) -> Result<Tensor> {
    himamba_forward_with(&mut Eager::new(), img, weights)
}

pub fn himamba_forward_with(be: &mut Eager, img: &Tensor, weights: &ModelWeights) -> Result<Tensor> {
    let (c, h, w) = img.dims3()?;
    if c != 3 {
        return Err(Error::Input(format!("expected a 3-channel image, got {c} channels")));
    }
    if h < MIN_INPUT_SIDE || w < MIN_INPUT_SIDE {
        return Err(Error::Input(format!("image {w}x{h} is smaller than {MIN_INPUT_SIDE}x{MIN_INPUT_SIDE}")));
    }
    let (ph, pw) = weights.config.padded_size(h, w);
    let s = weights.config.scale;
    if (ph, pw) == (h, w) {
        return model_forward(be, weights, img);
    }
    let padded = tensor::reflect_pad(img, ph - h, pw - w)?;
    let out = model_forward(be, weights, &padded)?;
    tensor::crop(&out, s * h, s * w)
}

fn branch_params(c_in: usize, c_out: usize, inner: usize, state: usize) -> usize {
    let k2 = DW_KERNEL * DW_KERNEL;
    2 * inner * c_in       // in_x, in_z
        + inner * k2 + inner // depthwise kernel + bias
        + inner * inner + inner // delta projection
        + 2 * state * inner  // B, C projections
        + inner * state      // a_log
        + inner              // d_skip
        + 2 * inner          // norm
        + c_out * inner // out
}

/// Parameter count from the configuration alone.
pub fn count_params(config: &HiMambaConfig) -> Result<u64> {
    config.validate()?;
    let d = config.hmb_dims();
    let (c, cr, n, ch) = (config.channels, config.region_channels, config.region_size, config.ffn_hidden);
    let hmb = 2 * c
        + 2 * cr
        + branch_params(c, c, d.local_inner, d.state)
        + branch_params(cr, c, d.region_inner, d.state)
        + 3 * c
        + (2 * c + 2 * ch * c + 2 * ch + c * ch + c)
        + cr * c;
    let group = cr * c * n * n + cr + config.blocks_per_group * hmb + c * c * 9 + c;
    let out = 3 * config.scale * config.scale;
    Ok((c * 27 + c + config.groups * group + out * c * 9 + out) as u64)
}

fn branch_flops(pixels: usize, c_in: usize, c_out: usize, inner: usize, state: usize) -> u64 {
    let p = pixels as u64;
    let (ci, co, d, n) = (c_in as u64, c_out as u64, inner as u64, state as u64);
    let k2 = (DW_KERNEL * DW_KERNEL) as u64;
    2 * p * (d * ci + d * k2 + d * d + 2 * n * d + d * ci + co * d) + scan_flops(pixels, inner, state)
}

/// FLOPs (2 per multiply-add) of conv, linear and scan ops for an `h x w` input,
/// measured at the reflect-padded size the model actually runs on.
pub fn count_flops(config: &HiMambaConfig, h: usize, w: usize) -> Result<u64> {
    config.validate()?;
    let (ph, pw) = config.padded_size(h, w);
    let (p, pr) = (ph * pw, ph * pw / (config.region_size * config.region_size));
    let d = config.hmb_dims();
    let (c, cr, n, ch) = (config.channels as u64, config.region_channels as u64, config.region_size as u64, config.ffn_hidden as u64);
    let hmb = branch_flops(p, config.channels, config.channels, d.local_inner, d.state)
        + branch_flops(pr, config.region_channels, config.channels, d.region_inner, d.state)
        + 2 * p as u64 * (2 * ch * c + c * ch)
        + 2 * pr as u64 * cr * c;
    let group = 2 * pr as u64 * cr * c * n * n + config.blocks_per_group as u64 * hmb + 2 * p as u64 * c * c * 9;
    let out = 3 * (config.scale * config.scale) as u64;
    Ok(2 * p as u64 * c * 27 + config.groups as u64 * group + 2 * p as u64 * out * c * 9)
}
