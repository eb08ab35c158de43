//! 8-bit RGB PNG <-> `(1, 3, h, w)` tensors in `[0, 1]`.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{McmsError, Result};
use crate::freq::{split_hf_lf, FrequencyMask};
use crate::tensor::{Real, Tensor4};

pub fn load_png<T: Real>(path: &Path) -> Result<Tensor4<T>> {
    let img = image::open(path)
        .map_err(|source| McmsError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Tensor4::from_fn([1, 3, h as usize, w as usize], |_, c, y, x| {
        T::of(img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
    }))
}

/// Quantize one value in `[0, 1]` to a byte, clamping out-of-range input.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn to_rgb8<T: Real>(x: &Tensor4<T>) -> Result<RgbImage> {
    let [n, c, h, w] = x.shape();
    if n != 1 || c != 3 {
        return Err(McmsError::shape("to_rgb8", format!("expected (1, 3, h, w), got {:?}", x.shape())));
    }
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |px, py| {
        let at = |ch| to_byte(x.at(0, ch, py as usize, px as usize).to_f64_lossy());
        Rgb([at(0), at(1), at(2)])
    }))
}

pub fn save_png<T: Real>(path: &Path, x: &Tensor4<T>) -> Result<()> {
    to_rgb8(x)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| McmsError::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Map a signed component in `[-1, 1]` into `[0, 1]` for 8-bit storage.
pub fn encode_offset(v: f64) -> f64 {
    v * 0.5 + 0.5
}

pub fn decode_offset(v: f64) -> f64 {
    2.0 * v - 1.0
}

/// Save the HF/LF split of `x` as two offset-encoded PNGs. LF is quantized
/// first and HF stores `x - LF_quantized`, so decoding both and summing is
/// within 1/255 of `x` even though each file is quantized. LF overshoot past
/// the encodable range is clipped and ends up in HF.
pub fn save_split_pngs<T: Real>(x: &Tensor4<T>, mask: &FrequencyMask, hf_path: &Path, lf_path: &Path) -> Result<()> {
    let (_, lf) = split_hf_lf(x, mask)?;
    let lf_enc = lf.map(|v| T::of(to_byte(encode_offset(v.to_f64_lossy())) as f64 / 255.0));
    let lf_dec = lf_enc.map(|v| T::of(decode_offset(v.to_f64_lossy())));
    let hf_enc = x.sub(&lf_dec)?.map(|v| T::of(encode_offset(v.to_f64_lossy())));
    save_png(hf_path, &hf_enc)?;
    save_png(lf_path, &lf_enc)
}

/// Load one offset-encoded component.
pub fn load_offset_png<T: Real>(path: &Path) -> Result<Tensor4<T>> {
    Ok(load_png::<T>(path)?.map(|v| T::of(decode_offset(v.to_f64_lossy()))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_on_byte_grid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let x = Tensor4::<f32>::from_fn([1, 3, 5, 7], |_, c, y, x| ((c * 35 + y * 7 + x) * 2) as f32 / 255.0);
        save_png(&p, &x).unwrap();
        let back: Tensor4<f32> = load_png(&p).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn clamps_and_rejects() {
        assert_eq!(to_byte(-0.2), 0);
        assert_eq!(to_byte(1.7), 255);
        assert_eq!(to_byte(0.5), 128);
        assert!(to_rgb8(&Tensor4::<f32>::zeros([1, 1, 2, 2])).is_err());
        assert!(load_png::<f32>(Path::new("/nonexistent/x.png")).is_err());
    }

    #[test]
    fn split_pngs_sum_to_input() {
        let dir = tempfile::tempdir().unwrap();
        let x = crate::blur_synth::procedural_scene(40, 56, 3);
        let x = x.map(|v| to_byte(v as f64) as f32 / 255.0);
        let (hp, lp) = (dir.path().join("x_hf.png"), dir.path().join("x_lf.png"));
        for tau in [0.05, 0.1, 0.3] {
            let mask = FrequencyMask::new(40, 56, tau).unwrap();
            save_split_pngs(&x, &mask, &hp, &lp).unwrap();
            let hf: Tensor4<f64> = load_offset_png(&hp).unwrap();
            let lf: Tensor4<f64> = load_offset_png(&lp).unwrap();
            let err = hf.add(&lf).unwrap().max_abs_diff(&x.cast());
            assert!(err <= 1.0 / 255.0 + 1e-6, "tau {tau}: {err}");
        }
        assert_eq!(decode_offset(encode_offset(-0.25)), -0.25);
    }
}
