//! Per-image PSNR/SSIM against the sharp reference, next to the blurry
//! baseline.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::blur_synth::ImagePair;
use crate::error::Result;
use crate::net::{McmsModel, SIZE_MULTIPLE};
use crate::tensor::kernels::reflect;
use crate::tensor::{Real, Tensor4};
use crate::train_eval::metrics::{psnr, ssim};

pub const CSV_HEADER: &str = "id,psnr_db,ssim,baseline_psnr_db,baseline_ssim";

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub baseline_psnr_db: f64,
    pub baseline_ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean: EvalRow,
}

impl EvalReport {
    fn new(rows: Vec<EvalRow>) -> Self {
        let n = rows.len().max(1) as f64;
        let avg = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let mean = EvalRow {
            id: "MEAN".into(),
            psnr_db: avg(|r| r.psnr_db),
            ssim: avg(|r| r.ssim),
            baseline_psnr_db: avg(|r| r.baseline_psnr_db),
            baseline_ssim: avg(|r| r.baseline_ssim),
        };
        EvalReport { rows, mean }
    }

    /// Header, one line per image, then the `MEAN` line; 4 decimals, and
    /// identical images print as `inf`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in self.rows.iter().chain(std::iter::once(&self.mean)) {
            writeln!(
                out,
                "{},{:.4},{:.4},{:.4},{:.4}",
                r.id, r.psnr_db, r.ssim, r.baseline_psnr_db, r.baseline_ssim
            )
            .expect("writing to a String");
        }
        out
    }
}

/// Reflect-pad the bottom and right edges up to the next multiple of `m`.
pub fn pad_to_multiple<T: Real>(x: &Tensor4<T>, m: usize) -> Tensor4<T> {
    let (h, w) = (x.h(), x.w());
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return x.clone();
    }
    Tensor4::from_fn([x.n(), x.c(), ph, pw], |n, c, y, xx| {
        x.at(n, c, reflect(y as isize, h), reflect(xx as isize, w))
    })
}

/// Top-left `h x w` window.
pub fn crop_to<T: Real>(x: &Tensor4<T>, h: usize, w: usize) -> Tensor4<T> {
    Tensor4::from_fn([x.n(), x.c(), h, w], |n, c, y, xx| x.at(n, c, y, xx))
}

/// Restore an image of any size: pad to a multiple of 32, run the model, clamp
/// to `[0, 1]`, crop back.
pub fn deblur<T: Real>(model: &McmsModel<T>, blurry: &Tensor4<T>) -> Result<Tensor4<T>> {
    let padded = pad_to_multiple(blurry, SIZE_MULTIPLE);
    let out = model.restore(&padded)?;
    Ok(crop_to(&out, blurry.h(), blurry.w()))
}

/// Metrics for every pair, in input order.
pub fn evaluate<T: Real>(model: &McmsModel<T>, pairs: &[ImagePair<T>]) -> Result<EvalReport> {
    let rows = pairs
        .par_iter()
        .map(|p| {
            let restored = deblur(model, &p.blurry)?;
            Ok(EvalRow {
                id: p.id.clone(),
                psnr_db: psnr(&restored, &p.sharp)?,
                ssim: ssim(&restored, &p.sharp)?,
                baseline_psnr_db: psnr(&p.blurry, &p.sharp)?,
                baseline_ssim: ssim(&p.blurry, &p.sharp)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::new(rows))
}
