//! Image quality metrics for unit-range images.

use crate::error::{McmsError, Result};
use crate::tensor::{Real, Tensor4};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// `-10 log10(MSE)` with peak 1. Identical inputs give `f64::INFINITY`.
pub fn psnr<T: Real>(x: &Tensor4<T>, y: &Tensor4<T>) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(McmsError::shape("psnr", format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable `valid` filtering of an `h x w` plane.
fn filter(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn grey<T: Real>(x: &Tensor4<T>, n: usize) -> Vec<f64> {
    let (c, hw) = (x.c(), x.h() * x.w());
    (0..hw)
        .map(|i| (0..c).map(|ch| x.plane(n, ch)[i].to_f64_lossy()).sum::<f64>() / c as f64)
        .collect()
}

/// Mean SSIM of the channel-mean greyscale images, 11x11 Gaussian window
/// (sigma 1.5), `K1 = 0.01`, `K2 = 0.03`, dynamic range 1. Averaged over the
/// batch.
pub fn ssim<T: Real>(x: &Tensor4<T>, y: &Tensor4<T>) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(McmsError::shape("ssim", format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    let (h, w) = (x.h(), x.w());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(McmsError::shape("ssim", format!("{h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let g = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for n in 0..x.n() {
        let (a, b) = (grey(x, n), grey(y, n));
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mu_a = filter(&a, h, w, &g);
        let mu_b = filter(&b, h, w, &g);
        let aa = filter(&prod(&a, &a), h, w, &g);
        let bb = filter(&prod(&b, &b), h, w, &g);
        let ab = filter(&prod(&a, &b), h, w, &g);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / x.n() as f64)
}
