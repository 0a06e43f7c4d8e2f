//! Full-reference image quality metrics and histogram entropy.

use crate::error::{Error, Result};
use crate::image::Image;

pub const PSNR_CAP: f64 = 100.0;
pub const PSNR_MSE_FLOOR: f64 = 1e-10;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check(a: &Image, b: &Image) -> Result<()> {
    if !a.same_dims(b) {
        let (ha, wa, ca) = a.dims();
        let (hb, wb, cb) = b.dims();
        return Err(Error::shape("metric", &[ha, wa, ca], &[hb, wb, cb]));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check(a, b)?;
    let n = a.data().len().max(1);
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64)
}

/// `10 log10(1 / MSE)` for unit-range images, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m < PSNR_MSE_FLOOR {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filter of one `h × w` plane.
fn filter(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
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

fn plane(img: &Image, c: usize) -> Vec<f64> {
    let ch = img.channels();
    img.data().iter().skip(c).step_by(ch).copied().collect()
}

/// Local statistics at one window position combined into the SSIM index.
pub fn ssim_index(mx: f64, my: f64, sxx: f64, syy: f64, sxy: f64) -> f64 {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let vx = sxx - mx * mx;
    let vy = syy - my * my;
    let cov = sxy - mx * my;
    ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// Single-scale SSIM with an 11×11 Gaussian window over valid positions,
/// averaged over positions and then channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check(a, b)?;
    let (h, w, ch) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let mut total = 0.0;
    for c in 0..ch {
        let (x, y) = (plane(a, c), plane(b, c));
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter(p, h, w, &taps));
        let n = mx.len();
        let sum: f64 = (0..n)
            .map(|i| ssim_index(mx[i], my[i], sxx[i], syy[i], sxy[i]))
            .sum();
        total += sum / n as f64;
    }
    Ok(total / ch as f64)
}

/// 8-bit gray level of a pixel value in `[0, 1]`.
pub fn gray_level(v: f64) -> usize {
    (v.clamp(0.0, 1.0) * 255.0).round() as usize
}

/// Shannon entropy in bits of the 256-bin histogram of the luma channel.
pub fn entropy(img: &Image) -> f64 {
    let luma = img.luma();
    let mut hist = [0usize; 256];
    for v in luma.data() {
        hist[gray_level(*v)] += 1;
    }
    let n = luma.data().len().max(1) as f64;
    hist.iter()
        .filter(|c| **c > 0)
        .map(|c| {
            let p = *c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Quality {
    pub psnr: f64,
    pub ssim: f64,
}

impl Quality {
    pub fn of(a: &Image, b: &Image) -> Result<Quality> {
        Ok(Quality {
            psnr: psnr(a, b)?,
            ssim: ssim(a, b)?,
        })
    }

    /// Mean over pairs; zero for an empty set.
    pub fn mean(items: &[Quality]) -> Quality {
        let n = items.len().max(1) as f64;
        Quality {
            psnr: items.iter().map(|q| q.psnr).sum::<f64>() / n,
            ssim: items.iter().map(|q| q.ssim).sum::<f64>() / n,
        }
    }
}
