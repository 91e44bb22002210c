//! Paired image quality metrics on the `[-1, 1]` scale.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{read_png, to_signed, write_png, Image};
use crate::error::{Error, Result};

/// Dynamic range of `[-1, 1]` images.
pub const PEAK: f64 = 2.0;
/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_same(a: &Image, b: &Image, op: &'static str) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::ShapeMismatch {
            op,
            left: vec![a.height, a.width],
            right: vec![b.height, b.width],
        });
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b, "mse")?;
    let sum: f64 = a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.pixels.len() as f64)
}

/// `10 log10(peak^2 / mse)`, capped at [`PSNR_CAP`].
pub fn psnr(mse: f64, peak: f64) -> Result<f64> {
    if mse.is_nan() || mse < 0.0 {
        return Err(Error::invalid(format!("psnr of negative mse {mse}")));
    }
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering with the Gaussian window.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully contained 11x11 Gaussian windows (sigma 1.5).
pub fn ssim(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    check_same(a, b, "ssim")?;
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {}x{}",
            a.height, a.width
        )));
    }
    let (h, w) = (a.height, a.width);
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { a.pixels.iter().zip(&b.pixels).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(&a.pixels, h, w, &taps);
    let mu_b = filter_valid(&b.pixels, h, w, &taps);
    let aa = filter_valid(&prod(|x, _| x * x), h, w, &taps);
    let bb = filter_valid(&prod(|_, y| y * y), h, w, &taps);
    let ab = filter_valid(&prod(|x, y| x * y), h, w, &taps);
    let c1 = (K1 * peak).powi(2);
    let c2 = (K2 * peak).powi(2);
    let mut sum = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(sum / mu_a.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub mse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

impl ImageMetrics {
    pub fn compute(name: impl Into<String>, pred: &Image, reference: &Image) -> Result<Self> {
        let m = mse(pred, reference)?;
        Ok(ImageMetrics {
            name: name.into(),
            mse: m,
            psnr_db: psnr(m, PEAK)?,
            ssim: ssim(pred, reference, PEAK)?,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    /// Mean and population standard deviation.
    pub fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count();
        if n == 0 {
            return Summary::default();
        }
        let mean = values.clone().sum::<f64>() / n as f64;
        let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Summary { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub direction: String,
    pub images: Vec<ImageMetrics>,
    pub mse: Summary,
    /// Mean of per-image PSNR values.
    pub psnr_db: Summary,
    pub ssim: Summary,
}

impl MetricReport {
    pub fn from_images(direction: impl Into<String>, images: Vec<ImageMetrics>) -> Self {
        MetricReport {
            direction: direction.into(),
            mse: Summary::of(images.iter().map(|m| m.mse)),
            psnr_db: Summary::of(images.iter().map(|m| m.psnr_db)),
            ssim: Summary::of(images.iter().map(|m| m.ssim)),
            images,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Compares every PNG of `pred_dir` with the same-named PNG of `ref_dir`.
/// Both folders must contain exactly the same file names.
pub fn evaluate_set(pred_dir: &Path, ref_dir: &Path, direction: &str) -> Result<MetricReport> {
    let pred = png_names(pred_dir)?;
    let refs = png_names(ref_dir)?;
    if let Some(n) = pred.iter().find(|n| refs.binary_search(n).is_err()) {
        return Err(Error::MissingCounterpart(ref_dir.join(n)));
    }
    if let Some(n) = refs.iter().find(|n| pred.binary_search(n).is_err()) {
        return Err(Error::MissingCounterpart(pred_dir.join(n)));
    }
    if pred.is_empty() {
        return Err(Error::invalid(format!("no PNG files in {}", pred_dir.display())));
    }
    let images = pred
        .par_iter()
        .map(|name| {
            let p = to_signed(&read_png(&pred_dir.join(name))?);
            let r = to_signed(&read_png(&ref_dir.join(name))?);
            ImageMetrics::compute(name.clone(), &p, &r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_images(direction, images))
}

/// Side-by-side `[-1, 1]` images separated by a one-pixel gap.
pub fn montage(panels: &[&Image]) -> Result<Image> {
    let first = panels.first().ok_or_else(|| Error::invalid("montage needs panels"))?;
    let h = first.height;
    if let Some(p) = panels.iter().find(|p| p.height != h) {
        return Err(Error::ShapeMismatch {
            op: "montage",
            left: vec![h, first.width],
            right: vec![p.height, p.width],
        });
    }
    let width = panels.iter().map(|p| p.width).sum::<usize>() + panels.len() - 1;
    let mut out = Image::filled(h, width, 1.0);
    let mut x0 = 0;
    for p in panels {
        for y in 0..h {
            for x in 0..p.width {
                out.pixels[y * width + x0 + x] = p.at(y, x);
            }
        }
        x0 += p.width + 1;
    }
    Ok(out)
}

/// Writes a source | translated | reference montage as PNG.
pub fn write_montage(path: &Path, source: &Image, translated: &Image, reference: &Image) -> Result<PathBuf> {
    let m = montage(&[source, translated, reference])?;
    write_png(path, &crate::data::to_unit(&m))?;
    Ok(path.to_path_buf())
}
