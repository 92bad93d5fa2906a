use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use himamba_core::imaging::{self, mod_crop, psnr, quantize_tensor, rgb_to_y, self_ensemble, ssim, BicubicUpscaler, Upscaler};
use himamba_core::{Error, Result, Tensor};

use crate::io::{list_pngs, load_png};

#[derive(Clone, Copy, Debug, Default)]
pub struct EvalOptions {
    pub self_ensemble: bool,
}

/// Y-channel metrics for one image, with the bicubic baseline alongside.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub bicubic_psnr: f64,
}

#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    fn mean(&self, f: impl Fn(&EvalRow) -> f64) -> f64 {
        self.rows.iter().map(f).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_psnr(&self) -> f64 {
        self.mean(|r| r.psnr)
    }

    pub fn mean_ssim(&self) -> f64 {
        self.mean(|r| r.ssim)
    }

    pub fn mean_bicubic_psnr(&self) -> f64 {
        self.mean(|r| r.bicubic_psnr)
    }

    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "image,psnr_y,ssim_y,bicubic_psnr_y")?;
        for r in &self.rows {
            writeln!(out, "{},{:.4},{:.6},{:.4}", r.name, r.psnr, r.ssim, r.bicubic_psnr)?;
        }
        writeln!(out, "mean,{:.4},{:.6},{:.4}", self.mean_psnr(), self.mean_ssim(), self.mean_bicubic_psnr())?;
        Ok(())
    }
}

/// Y-channel `(psnr, ssim, bicubic_psnr)` of one image.
pub type Scores = (f64, f64, f64);

/// Scores one HR image: mod-crop, bicubic downsample to 8-bit LR, super-resolve, quantize,
/// and compare on Y with a `scale`-pixel shave.
pub fn evaluate_image(model: &impl Upscaler, hr: &Tensor, scale: usize, opts: EvalOptions) -> Result<Scores> {
    let hr = mod_crop(hr, scale)?;
    let lr = quantize_tensor(&imaging::degrade(&hr, scale)?);
    let sr = if opts.self_ensemble { self_ensemble(&lr, model)? } else { model.upscale(&lr)? };
    let y_hr = rgb_to_y(&hr)?;
    let y_sr = rgb_to_y(&quantize_tensor(&sr))?;
    let y_bic = rgb_to_y(&quantize_tensor(&BicubicUpscaler { scale }.upscale(&lr)?))?;
    Ok((psnr(&y_sr, &y_hr, scale)?, ssim(&y_sr, &y_hr, scale)?, psnr(&y_bic, &y_hr, scale)?))
}

/// Evaluates every PNG in `hr_dir`. Unreadable files become warnings; images run in
/// parallel and rows come back in file-name order.
pub fn run_eval(model: &(impl Upscaler + Sync), hr_dir: impl AsRef<Path>, scale: usize, opts: EvalOptions) -> Result<EvalReport> {
    let files = list_pngs(hr_dir.as_ref())?;
    if files.is_empty() {
        return Err(Error::Input(format!("no PNG images in {}", hr_dir.as_ref().display())));
    }
    let results: Vec<(PathBuf, Result<Scores>)> = files
        .into_par_iter()
        .map(|path| {
            let r = load_png(&path).and_then(|hr| evaluate_image(model, &hr, scale, opts));
            (path, r)
        })
        .collect();
    let mut report = EvalReport::default();
    for (path, r) in results {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        match r {
            Ok((p, s, b)) => report.rows.push(EvalRow { name, psnr: p, ssim: s, bicubic_psnr: b }),
            Err(e) => report.warnings.push(format!("{name}: {e}")),
        }
    }
    if report.rows.is_empty() {
        return Err(Error::Input("no image could be evaluated".into()));
    }
    Ok(report)
}
