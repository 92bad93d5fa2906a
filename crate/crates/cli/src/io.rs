use std::path::{Path, PathBuf};

use himamba_core::imaging::ImagePlane;
use himamba_core::{Error, Result, Tensor};

/// Loads any PNG as 8-bit RGB in `[0, 1]`.
pub fn load_png(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(ImagePlane::from_rgb8(w as usize, h as usize, img.as_raw())?.data)
}

/// Saves a `[3, H, W]` tensor as 8-bit RGB PNG, clamping and rounding half away from zero.
pub fn save_png(img: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let plane = ImagePlane::from_tensor(img.clone())?;
    let buf = image::RgbImage::from_raw(plane.width() as u32, plane.height() as u32, plane.to_rgb8())
        .ok_or_else(|| Error::Internal("image buffer size mismatch".into()))?;
    buf.save_with_format(path.as_ref(), image::ImageFormat::Png)
        .map_err(|e| Error::Input(format!("{}: {e}", path.as_ref().display())))
}

/// `*.png` files in `dir`, sorted by name.
pub fn list_pngs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}
