//! Frame-level quality metrics.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::train::losses::FeatureProvider;

pub const PSNR_CAP_DB: f64 = 100.0;
const PSNR_MSE_FLOOR: f64 = 1e-10;

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

pub fn mse(pred: &Image, target: &Image) -> Result<f64> {
    pred.check_same_shape(target)?;
    let n = pred.data().len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / n)
}

/// `10 log10(1 / MSE)`, capped at 100 dB.
pub fn psnr(pred: &Image, target: &Image) -> Result<f64> {
    let m = mse(pred, target)?;
    if m < PSNR_MSE_FLOOR {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Structural similarity over every full window position, averaged over
/// positions and channels.
pub fn ssim(pred: &Image, target: &Image) -> Result<f64> {
    pred.check_same_shape(target)?;
    let (h, w) = pred.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::validation(format!(
            "SSIM needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let g = gaussian_window();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for ch in 0..3 {
        let x = |r: usize, c: usize| pred.pixel(r, c)[ch] as f64;
        let y = |r: usize, c: usize| target.pixel(r, c)[ch] as f64;
        for r in 0..oh {
            for c in 0..ow {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let wt = g[i] * g[j];
                        let (a, b) = (x(r + i, c + j), y(r + i, c + j));
                        mx += wt * a;
                        my += wt * b;
                        xx += wt * a * a;
                        yy += wt * b * b;
                        xy += wt * a * b;
                    }
                }
                let vx = xx - mx * mx;
                let vy = yy - my * my;
                let cov = xy - mx * my;
                total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            }
        }
    }
    Ok(total / (3 * oh * ow) as f64)
}

fn unit_normalize(f: &Tensor) -> Result<Tensor> {
    let norm = (f.sqr()?.sum_keepdim(1)? + 1e-20)?.sqrt()?;
    Ok(f.broadcast_div(&norm)?)
}

/// Weighted sum over layers of the mean squared difference between
/// channel-normalized feature maps.
pub fn perceptual_distance(pred: &Image, target: &Image, features: &dyn FeatureProvider) -> Result<f64> {
    pred.check_same_shape(target)?;
    let x = Image::batch_to_tensor(&[pred, target], DType::F64, &Device::Cpu)?;
    let maps = features.features(&x)?;
    let weights = features.layer_weights();
    if weights.len() != maps.len() {
        return Err(Error::validation(format!(
            "feature provider `{}` gave {} layers but {} weights",
            features.name(),
            maps.len(),
            weights.len()
        )));
    }
    let mut total = 0.0;
    for (f, w) in maps.iter().zip(weights) {
        let f = unit_normalize(&f.to_dtype(DType::F64)?)?;
        let d = (f.get(0)? - f.get(1)?)?.sqr()?.mean_all()?.to_scalar::<f64>()?;
        total += w * d;
    }
    Ok(total)
}
