//! Image-quality metrics.
//!
//! SSIM works on luma (`0.299 R + 0.587 G + 0.114 B` for 3-channel input)
//! with an 11×11 Gaussian window (σ = 1.5), `C1 = 0.01²`, `C2 = 0.03²` for a
//! unit dynamic range, and averages the map over valid window positions
//! only (no padding).

use thiserror::Error;

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("image shapes differ: {0} vs {1} values")]
    Shape(usize, usize),
    #[error("image {width}×{height} is smaller than the {window}×{window} window")]
    TooSmall { width: usize, height: usize, window: usize },
    #[error("buffer of {len} values is not {width}×{height}×{channels}")]
    Layout { len: usize, width: usize, height: usize, channels: usize },
}

/// PSNR in dB for images with values in `[0, 1]`; identical images give
/// `f64::INFINITY`.
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(MetricError::Shape(a.len(), b.len()));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

/// PSNR restricted to pixels where `mask` is set (all channels of a pixel).
pub fn masked_psnr(a: &[f64], b: &[f64], mask: &[bool], channels: usize) -> Result<f64, MetricError> {
    if a.len() != b.len() || a.len() != mask.len() * channels {
        return Err(MetricError::Shape(a.len(), b.len()));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (p, &m) in mask.iter().enumerate() {
        if m {
            for c in 0..channels {
                let d = a[p * channels + c] - b[p * channels + c];
                sum += d * d;
            }
            count += channels;
        }
    }
    if count == 0 || sum == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * (sum / count as f64).log10())
}

fn to_luma(img: &[f64], width: usize, height: usize, channels: usize) -> Result<Vec<f64>, MetricError> {
    if img.len() != width * height * channels || !(channels == 1 || channels == 3) {
        return Err(MetricError::Layout {
            len: img.len(),
            width,
            height,
            channels,
        });
    }
    Ok(if channels == 1 {
        img.to_vec()
    } else {
        img.chunks_exact(3).map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]).collect()
    })
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering with the normalized Gaussian window.
fn filter(img: &[f64], width: usize, height: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let ow = width - k + 1;
    let oh = height - k + 1;
    let mut rows = vec![0.0; height * ow];
    for y in 0..height {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| win[i] * img[y * width + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| win[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity of two `width × height × channels` images
/// (`channels` 1 or 3).
pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize, channels: usize) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::Shape(a.len(), b.len()));
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(MetricError::TooSmall {
            width,
            height,
            window: SSIM_WINDOW,
        });
    }
    let x = to_luma(a, width, height, channels)?;
    let y = to_luma(b, width, height, channels)?;
    let win = gaussian_window();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let mx = filter(&x, width, height, &win);
    let my = filter(&y, width, height, &win);
    let sxx = filter(&xx, width, height, &win);
    let syy = filter(&yy, width, height, &win);
    let sxy = filter(&xy, width, height, &win);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cxy = sxy[i] - ux * uy;
        total += ((2.0 * ux * uy + C1) * (2.0 * cxy + C2)) / ((ux * ux + uy * uy + C1) * (vx + vy + C2));
    }
    Ok(total / mx.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_pcg::Pcg64;

    #[test]
    fn psnr_cases() {
        let a = vec![0.3; 12];
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = vec![0.4; 12];
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &b[..6]).is_err());

        let mut rng = Pcg64::seed_from_u64(1);
        let x: Vec<f64> = (0..300).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..300).map(|_| rng.random_range(0.0..1.0)).collect();
        let mse = x.iter().zip(&y).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / 300.0;
        assert!((psnr(&x, &y).unwrap() - 10.0 * (1.0 / mse).log10()).abs() < 1e-12);
    }

    #[test]
    fn ssim_cases() {
        let mut rng = Pcg64::seed_from_u64(2);
        let (w, h) = (16, 13);
        let a: Vec<f64> = (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        assert!((ssim(&a, &a, w, h, 3).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ssim(&a, &b, w, h, 3).unwrap(), ssim(&b, &a, w, h, 3).unwrap());

        let (ca, cb) = (0.2, 0.7);
        let ka = vec![ca; w * h];
        let kb = vec![cb; w * h];
        let closed = (2.0 * ca * cb + C1) / (ca * ca + cb * cb + C1);
        assert!((ssim(&ka, &kb, w, h, 1).unwrap() - closed).abs() < 1e-12);
        assert!(matches!(ssim(&a[..30], &a[..30], 5, 2, 3), Err(MetricError::TooSmall { .. })));
    }
}
