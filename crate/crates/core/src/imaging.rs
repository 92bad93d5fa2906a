//! Image-space utilities for super-resolution evaluation: color conversion,
//! bicubic resampling, dihedral transforms, PSNR/SSIM and self-ensemble inference.
//!
//! Images are `[C, H, W]` tensors with values in `[0, 1]`.

use crate::error::{dim_err, Error, Result};
use crate::network::{himamba_forward, ModelWeights};
use crate::tensor::{self, Tensor};

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// Catmull-Rom family parameter of the cubic resampling kernel.
pub const CUBIC_A: f64 = -0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorSpace {
    Rgb,
    YCbCr,
}

/// A 3-channel image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    pub data: Tensor,
    pub space: ColorSpace,
}

impl ImagePlane {
    /// From interleaved 8-bit RGB.
    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 3 {
            return Err(Error::Input(format!("expected {} bytes for {width}x{height} RGB, got {}", width * height * 3, bytes.len())));
        }
        let plane = width * height;
        let data = Tensor::from_fn([3, height, width], |i| {
            let (c, p) = (i / plane, i % plane);
            f64::from(bytes[p * 3 + c]) / 255.0
        });
        Ok(Self { data, space: ColorSpace::Rgb })
    }

    pub fn from_tensor(data: Tensor) -> Result<Self> {
        if data.dims3()?.0 != 3 {
            return Err(dim_err!("image must have 3 channels, got {:?}", data.shape()));
        }
        Ok(Self { data, space: ColorSpace::Rgb })
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    /// Interleaved 8-bit samples; values are clamped to `[0, 1]` and rounded half away from zero.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let (h, w) = (self.height(), self.width());
        let plane = h * w;
        let d = self.data.data();
        (0..plane * 3).map(|i| quantize(d[(i % 3) * plane + i / 3])).collect()
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds every value to the nearest 8-bit level.
pub fn quantize_tensor(x: &Tensor) -> Tensor {
    x.map(|v| f64::from(quantize(v)) / 255.0)
}

/// BT.601 studio-swing luma of a `[3, H, W]` RGB image, as a `[1, H, W]` map in `[0, 1]`.
pub fn rgb_to_y(img: &Tensor) -> Result<Tensor> {
    let (c, h, w) = img.dims3()?;
    if c != 3 {
        return Err(dim_err!("rgb_to_y: expected 3 channels, got {c}"));
    }
    let d = img.data();
    let p = h * w;
    Tensor::new([1, h, w], (0..p).map(|i| (16.0 + 65.481 * d[i] + 128.553 * d[p + i] + 24.966 * d[2 * p + i]) / 255.0).collect())
}

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic_weight(x: f64) -> f64 {
    let a = CUBIC_A;
    let t = x.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Normalized taps `(source index, weight)` for each output sample along one axis.
pub fn resample_taps(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = in_len as f64 / out_len as f64;
    let stretch = scale.max(1.0);
    let support = 2.0 * stretch;
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = (center - support - 0.5).floor() as isize;
            let hi = (center + support - 0.5).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = (lo..=hi)
                .filter_map(|j| {
                    let w = cubic_weight((j as f64 + 0.5 - center) / stretch);
                    (w != 0.0).then(|| (j.clamp(0, in_len as isize - 1) as usize, w))
                })
                .collect();
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Separable bicubic resize of a `[C, H, W]` image; antialiased when shrinking, edges clamped.
pub fn bicubic_resize(img: &Tensor, out_w: usize, out_h: usize) -> Result<Tensor> {
    let (c, h, w) = img.dims3()?;
    if out_w == 0 || out_h == 0 {
        return Err(Error::Parameter("bicubic_resize: target size must be positive".into()));
    }
    if (out_w, out_h) == (w, h) {
        return Ok(img.clone());
    }
    let tx = resample_taps(w, out_w);
    let ty = resample_taps(h, out_h);
    let d = img.data();
    let mut horiz = vec![0.0; c * h * out_w];
    for ch in 0..c {
        for y in 0..h {
            let row = &d[(ch * h + y) * w..][..w];
            for (x, taps) in tx.iter().enumerate() {
                horiz[(ch * h + y) * out_w + x] = taps.iter().map(|&(j, wt)| wt * row[j]).sum();
            }
        }
    }
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        for (y, taps) in ty.iter().enumerate() {
            for x in 0..out_w {
                out[(ch * out_h + y) * out_w + x] = taps.iter().map(|&(j, wt)| wt * horiz[(ch * h + j) * out_w + x]).sum();
            }
        }
    }
    Tensor::new([c, out_h, out_w], out)
}

/// Crops bottom/right so both sides are multiples of `scale`.
pub fn mod_crop(img: &Tensor, scale: usize) -> Result<Tensor> {
    let (_, h, w) = img.dims3()?;
    tensor::crop(img, h - h % scale, w - w % scale)
}

/// Bicubic downsampling by an integer factor.
pub fn degrade(hr: &Tensor, scale: usize) -> Result<Tensor> {
    let (_, h, w) = hr.dims3()?;
    if h % scale != 0 || w % scale != 0 {
        return Err(dim_err!("degrade: {h}x{w} not divisible by {scale}"));
    }
    bicubic_resize(hr, w / scale, h / scale)
}

fn flip_h(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let d = x.data();
    Tensor::new([c, h, w], (0..c * h * w).map(|i| d[i - i % w + (w - 1 - i % w)]).collect())
}

/// Quarter turn counter-clockwise.
fn rot90(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let d = x.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out[(ch * w + (w - 1 - xx)) * h + y] = d[(ch * h + y) * w + xx];
            }
        }
    }
    Tensor::new([c, w, h], out)
}

/// Element `t` of the dihedral group on `[C, H, W]` maps: optional horizontal flip
/// (`t >= 4`) followed by `t % 4` counter-clockwise quarter turns.
pub fn dihedral(x: &Tensor, t: usize) -> Result<Tensor> {
    let mut y = if t >= 4 { flip_h(x)? } else { x.clone() };
    for _ in 0..t % 4 {
        y = rot90(&y)?;
    }
    Ok(y)
}

/// Inverse of [`dihedral`].
pub fn dihedral_inverse(x: &Tensor, t: usize) -> Result<Tensor> {
    let mut y = x.clone();
    for _ in 0..(4 - t % 4) % 4 {
        y = rot90(&y)?;
    }
    if t >= 4 {
        y = flip_h(&y)?;
    }
    Ok(y)
}

fn shave(x: &Tensor, border: usize) -> Result<Tensor> {
    let (_, h, w) = as_chw(x)?.dims3()?;
    if 2 * border >= h || 2 * border >= w {
        return Err(dim_err!("shave {border} leaves nothing of a {h}x{w} image"));
    }
    tensor::crop_at(&as_chw(x)?, border, border, h - 2 * border, w - 2 * border)
}

fn as_chw(x: &Tensor) -> Result<Tensor> {
    match x.shape() {
        &[h, w] => x.reshape([1, h, w]),
        &[_, _, _] => Ok(x.clone()),
        s => Err(dim_err!("expected [H, W] or [C, H, W], got {s:?}")),
    }
}

/// PSNR in dB for data in `[0, 1]`, after cropping `border` pixels from every side.
pub fn psnr(a: &Tensor, b: &Tensor, border: usize) -> Result<f64> {
    a.expect_same_shape(b)?;
    let (a, b) = (shave(a, border)?, shave(b, border)?);
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for xx in 0..ow {
            tmp[y * ow + xx] = k.iter().enumerate().map(|(i, kv)| kv * x[y * w + xx + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for xx in 0..ow {
            out[y * ow + xx] = k.iter().enumerate().map(|(i, kv)| kv * tmp[(y + i) * ow + xx]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let k = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let e_aa = filter_valid(&prod(a, a), h, w, &k);
    let e_bb = filter_valid(&prod(b, b), h, w, &k);
    let e_ab = filter_valid(&prod(a, b), h, w, &k);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2))
        })
        .sum();
    total / n as f64
}

/// Mean SSIM (11x11 Gaussian window, sigma 1.5) after cropping `border` pixels;
/// multi-channel inputs average the per-channel scores.
pub fn ssim(a: &Tensor, b: &Tensor, border: usize) -> Result<f64> {
    a.expect_same_shape(b)?;
    let (a, b) = (shave(a, border)?, shave(b, border)?);
    let (c, h, w) = a.dims3()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(dim_err!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels after shaving, got {h}x{w}"));
    }
    let p = h * w;
    let total: f64 = (0..c).map(|ch| ssim_plane(&a.data()[ch * p..][..p], &b.data()[ch * p..][..p], h, w)).sum();
    Ok(total / c as f64)
}

/// Anything that maps an LR `[3, H, W]` image to an SR image.
pub trait Upscaler {
    fn upscale(&self, img: &Tensor) -> Result<Tensor>;
}

impl Upscaler for ModelWeights {
    fn upscale(&self, img: &Tensor) -> Result<Tensor> {
        himamba_forward(img, self)
    }
}

/// Pixel replication by an integer factor.
#[derive(Clone, Copy, Debug)]
pub struct NearestUpscaler {
    pub scale: usize,
}

impl Upscaler for NearestUpscaler {
    fn upscale(&self, img: &Tensor) -> Result<Tensor> {
        tensor::repeat_blocks(img, self.scale)
    }
}

/// Bicubic interpolation by an integer factor.
#[derive(Clone, Copy, Debug)]
pub struct BicubicUpscaler {
    pub scale: usize,
}

impl Upscaler for BicubicUpscaler {
    fn upscale(&self, img: &Tensor) -> Result<Tensor> {
        let (_, h, w) = img.dims3()?;
        bicubic_resize(img, w * self.scale, h * self.scale)
    }
}

/// Mean over the eight dihedral transforms of the input, each output mapped back
/// through the inverse transform. Sums pairwise in a fixed tree.
pub fn self_ensemble(img: &Tensor, model: &impl Upscaler) -> Result<Tensor> {
    let outs = (0..8)
        .map(|t| dihedral_inverse(&model.upscale(&dihedral(img, t)?)?, t))
        .collect::<Result<Vec<_>>>()?;
    let pair = |a: &Tensor, b: &Tensor| a.add(b);
    let s01 = pair(&outs[0], &outs[1])?;
    let s23 = pair(&outs[2], &outs[3])?;
    let s45 = pair(&outs[4], &outs[5])?;
    let s67 = pair(&outs[6], &outs[7])?;
    let total = pair(&pair(&s01, &s23)?, &pair(&s45, &s67)?)?;
    Ok(total.scale(0.125))
}
