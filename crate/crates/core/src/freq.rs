//! Orthonormal 2-D DCT-II, the low/high frequency partition built on it, and
//! the DFT used by the frequency-domain loss.
//!
//! The DCT runs as two dense `N x N` basis products per plane (separable
//! O(N^2) per row/column), which is fine up to a few hundred pixels per side.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{McmsError, Result};
use crate::tensor::kernels::gemm;
use crate::tensor::{Real, Tensor4};

/// Default cutoff for [`FrequencyMask::new`].
pub const DEFAULT_TAU: f64 = 0.1;

/// DCT-II coefficients, one plane per `(n, c)`, same shape as the source.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum<T> {
    coefficients: Tensor4<T>,
}

impl<T: Real> Spectrum<T> {
    pub fn from_coefficients(coefficients: Tensor4<T>) -> Self {
        Spectrum { coefficients }
    }

    pub fn coefficients(&self) -> &Tensor4<T> {
        &self.coefficients
    }

    pub fn into_coefficients(self) -> Tensor4<T> {
        self.coefficients
    }

    /// `(c, h, w)` of the transformed image.
    pub fn source_shape(&self) -> (usize, usize, usize) {
        let [_, c, h, w] = self.coefficients.shape();
        (c, h, w)
    }

    pub fn energy(&self) -> T {
        self.coefficients.data().iter().map(|&v| v * v).sum()
    }
}

/// Low-frequency selector over an `h x w` coefficient plane:
/// `(u, v)` is kept when `u / h + v / w <= tau`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyMask {
    h: usize,
    w: usize,
    tau: f64,
    keep: Vec<bool>,
}

impl FrequencyMask {
    pub fn new(h: usize, w: usize, tau: f64) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(McmsError::InvalidArgument(format!("mask size {h}x{w}")));
        }
        if !(0.0..=2.0).contains(&tau) {
            return Err(McmsError::InvalidArgument(format!("tau {tau} outside [0, 2]")));
        }
        let keep = (0..h)
            .flat_map(|u| (0..w).map(move |v| u as f64 / h as f64 + v as f64 / w as f64 <= tau))
            .collect();
        Ok(FrequencyMask { h, w, tau, keep })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// True for low-frequency coefficients.
    pub fn keeps(&self, u: usize, v: usize) -> bool {
        self.keep[u * self.w + v]
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Unnormalized DFT, real and imaginary planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum<T> {
    pub real: Tensor4<T>,
    pub imag: Tensor4<T>,
}

/// Orthonormal DCT-II basis, row `k` holds `alpha_k cos(pi (2i + 1) k / 2n)`.
fn dct_basis<T: Real>(n: usize) -> Vec<T> {
    let mut m = Vec::with_capacity(n * n);
    for k in 0..n {
        let alpha = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            let angle = std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64;
            m.push(T::of(alpha * angle.cos()));
        }
    }
    m
}

/// Applies `out = L x R` per plane, with `L` and `R` optionally transposed.
fn sandwich<T: Real>(x: &Tensor4<T>, left: &[T], left_t: bool, right: &[T], right_t: bool) -> Tensor4<T> {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor4::zeros([n, c, h, w]);
    let mut tmp = vec![T::zero(); h * w];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        gemm(h, h, w, left, left_t, src, false, &mut tmp, false);
        let dst = &mut out.data_mut()[p * h * w..(p + 1) * h * w];
        gemm(h, w, w, &tmp, false, right, right_t, dst, false);
    }
    out
}

/// Orthonormal 2-D DCT-II of every plane.
pub fn dct2<T: Real>(x: &Tensor4<T>) -> Spectrum<T> {
    let (bh, bw) = (dct_basis::<T>(x.h()), dct_basis::<T>(x.w()));
    Spectrum {
        coefficients: sandwich(x, &bh, false, &bw, true),
    }
}

/// Inverse of [`dct2`].
pub fn idct2<T: Real>(s: &Spectrum<T>) -> Tensor4<T> {
    let x = &s.coefficients;
    let (bh, bw) = (dct_basis::<T>(x.h()), dct_basis::<T>(x.w()));
    sandwich(x, &bh, true, &bw, false)
}

fn masked<T: Real>(s: &Spectrum<T>, mask: &FrequencyMask, keep_low: bool) -> Spectrum<T> {
    let mut coeffs = s.coefficients.clone();
    let [n, c, h, w] = coeffs.shape();
    for p in 0..n * c {
        let plane = &mut coeffs.data_mut()[p * h * w..(p + 1) * h * w];
        for (i, v) in plane.iter_mut().enumerate() {
            if mask.keep[i] != keep_low {
                *v = T::zero();
            }
        }
    }
    Spectrum { coefficients: coeffs }
}

/// Partition `x` into `(hf, lf)` through the DCT: `lf` keeps the masked
/// coefficients, `hf` the rest.
pub fn split_hf_lf<T: Real>(x: &Tensor4<T>, mask: &FrequencyMask) -> Result<(Tensor4<T>, Tensor4<T>)> {
    if mask.dims() != (x.h(), x.w()) {
        return Err(McmsError::shape(
            "split_hf_lf",
            format!("mask {:?} vs image {}x{}", mask.dims(), x.h(), x.w()),
        ));
    }
    let spec = dct2(x);
    let lf = idct2(&masked(&spec, mask, true));
    let hf = idct2(&masked(&spec, mask, false));
    Ok((hf, lf))
}

fn fft_planes<T: Real>(
    x: &Tensor4<T>,
    inverse: bool,
    mut load: impl FnMut(usize, usize) -> Complex<T>,
    mut store: impl FnMut(usize, usize, Complex<T>),
) {
    let [n, c, h, w] = x.shape();
    let mut planner = FftPlanner::<T>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    let mut buf = vec![Complex::new(T::zero(), T::zero()); h * w];
    let mut col = vec![Complex::new(T::zero(), T::zero()); h];
    for p in 0..n * c {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = load(p, i);
        }
        for row in buf.chunks_mut(w) {
            row_fft.process(row);
        }
        for xi in 0..w {
            for y in 0..h {
                col[y] = buf[y * w + xi];
            }
            col_fft.process(&mut col);
            for y in 0..h {
                buf[y * w + xi] = col[y];
            }
        }
        for (i, &b) in buf.iter().enumerate() {
            store(p, i, b);
        }
    }
}

/// Unnormalized forward 2-D DFT of every plane.
pub fn fft2<T: Real>(x: &Tensor4<T>) -> ComplexSpectrum<T> {
    let hw = x.h() * x.w();
    let mut real = Tensor4::zeros(x.shape());
    let mut imag = Tensor4::zeros(x.shape());
    {
        let (re, im) = (real.data_mut(), imag.data_mut());
        fft_planes(
            x,
            false,
            |p, i| Complex::new(x.data()[p * hw + i], T::zero()),
            |p, i, v| {
                re[p * hw + i] = v.re;
                im[p * hw + i] = v.im;
            },
        );
    }
    ComplexSpectrum { real, imag }
}

/// [`fft2`] packed as `(n, 2c, h, w)`: real planes first, then imaginary.
pub(crate) fn fft2_stacked<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let mut out = Tensor4::zeros([n, 2 * c, h, w]);
    {
        let od = out.data_mut();
        fft_planes(
            x,
            false,
            |p, i| Complex::new(x.data()[p * hw + i], T::zero()),
            |p, i, v| {
                let (ni, ci) = (p / c, p % c);
                od[(ni * 2 * c + ci) * hw + i] = v.re;
                od[(ni * 2 * c + c + ci) * hw + i] = v.im;
            },
        );
    }
    out
}

/// Adjoint of [`fft2_stacked`] for a real input: the real part of the
/// unnormalized inverse DFT of `g_re + i g_im`.
pub(crate) fn fft2_stacked_adjoint<T: Real>(g: &Tensor4<T>) -> Tensor4<T> {
    let [n, c2, h, w] = g.shape();
    let c = c2 / 2;
    let hw = h * w;
    let mut out = Tensor4::zeros([n, c, h, w]);
    {
        let od = out.data_mut();
        let gd = g.data();
        let shape_probe = Tensor4::<T>::zeros([n, c, h, w]);
        fft_planes(
            &shape_probe,
            true,
            |p, i| {
                let (ni, ci) = (p / c, p % c);
                Complex::new(gd[(ni * c2 + ci) * hw + i], gd[(ni * c2 + c + ci) * hw + i])
            },
            |p, i, v| od[p * hw + i] = v.re,
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed;
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    /// Quadruple-sum DCT-II straight from the definition.
    fn naive_dct(x: &Tensor4<f64>) -> Tensor4<f64> {
        let [n, c, h, w] = x.shape();
        let a = |k: usize, len: usize| if k == 0 { (1.0 / len as f64).sqrt() } else { (2.0 / len as f64).sqrt() };
        Tensor4::from_fn([n, c, h, w], |ni, ci, u, v| {
            let mut acc = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    acc += x.at(ni, ci, y, xx)
                        * (PI * (2 * y + 1) as f64 * u as f64 / (2 * h) as f64).cos()
                        * (PI * (2 * xx + 1) as f64 * v as f64 / (2 * w) as f64).cos();
                }
            }
            a(u, h) * a(v, w) * acc
        })
    }

    fn naive_dft(x: &Tensor4<f64>) -> (Tensor4<f64>, Tensor4<f64>) {
        let [n, c, h, w] = x.shape();
        let mut re = Tensor4::zeros([n, c, h, w]);
        let mut im = Tensor4::zeros([n, c, h, w]);
        for ni in 0..n {
            for ci in 0..c {
                for u in 0..h {
                    for v in 0..w {
                        let (mut a, mut b) = (0.0, 0.0);
                        for y in 0..h {
                            for xx in 0..w {
                                let th = -2.0 * PI * (u as f64 * y as f64 / h as f64 + v as f64 * xx as f64 / w as f64);
                                a += x.at(ni, ci, y, xx) * th.cos();
                                b += x.at(ni, ci, y, xx) * th.sin();
                            }
                        }
                        re.set(ni, ci, u, v, a);
                        im.set(ni, ci, u, v, b);
                    }
                }
            }
        }
        (re, im)
    }

    #[test]
    fn dct_matches_definition() {
        let mut r = lcg(4);
        for &(h, w) in &[(1usize, 1usize), (3, 5), (8, 8), (7, 4)] {
            let x = Tensor4::from_fn([2, 2, h, w], |_, _, _, _| r());
            let got = dct2(&x);
            assert!(got.coefficients().max_abs_diff(&naive_dct(&x)) < 1e-12);
        }
    }

    #[test]
    fn constant_image_has_single_dc_coefficient() {
        let x = Tensor4::full([1, 1, 6, 10], 0.7f64);
        let s = dct2(&x);
        let c = s.coefficients();
        assert!((c.at(0, 0, 0, 0) - 0.7 * 60f64.sqrt()).abs() < 1e-12);
        let rest: f64 = c.data()[1..].iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(rest < 1e-12);
    }

    #[test]
    fn idct_examples() {
        let zero = Spectrum::from_coefficients(Tensor4::<f64>::zeros([1, 1, 4, 5]));
        assert_eq!(idct2(&zero).max_abs(), 0.0);
        let mut dc = Tensor4::<f64>::zeros([1, 1, 4, 5]);
        dc.set(0, 0, 0, 0, 20f64.sqrt());
        let ones = idct2(&Spectrum::from_coefficients(dc));
        assert!(ones.max_abs_diff(&Tensor4::full([1, 1, 4, 5], 1.0)) < 1e-12);
    }

    #[test]
    fn mask_extremes() {
        let mut r = lcg(9);
        let x = Tensor4::from_fn([1, 3, 8, 6], |_, _, _, _| r());
        let (hf, lf) = split_hf_lf(&x, &FrequencyMask::new(8, 6, 2.0).unwrap()).unwrap();
        assert!(lf.max_abs_diff(&x) < 1e-12);
        assert!(hf.max_abs() < 1e-12);
        let (_, lf0) = split_hf_lf(&x, &FrequencyMask::new(8, 6, 0.0).unwrap()).unwrap();
        for c in 0..3 {
            let plane = x.slice_channels(c, 1).unwrap();
            let mean = plane.mean();
            assert!(lf0.plane(0, c).iter().all(|&v| (v - mean).abs() < 1e-12));
        }
        assert!(split_hf_lf(&x, &FrequencyMask::new(8, 8, 0.1).unwrap()).is_err());
        assert!(FrequencyMask::new(4, 4, 2.5).is_err());
    }

    #[test]
    fn fft_matches_naive_dft() {
        let mut r = lcg(13);
        for &(h, w) in &[(1usize, 4usize), (5, 3), (8, 8), (6, 10)] {
            let x = Tensor4::from_fn([1, 2, h, w], |_, _, _, _| r());
            let s = fft2(&x);
            let (re, im) = naive_dft(&x);
            let scale = re.max_abs().max(im.max_abs());
            assert!(s.real.max_abs_diff(&re) / scale < 1e-8);
            assert!(s.imag.max_abs_diff(&im) / scale < 1e-8);
        }
    }

    #[test]
    fn fft_examples() {
        let s = fft2(&Tensor4::full([1, 1, 4, 3], 2.0f64));
        assert!((s.real.at(0, 0, 0, 0) - 24.0).abs() < 1e-12);
        assert!(s.real.data()[1..].iter().all(|v| v.abs() < 1e-12));
        assert!(s.imag.max_abs() < 1e-12);
        let mut imp = Tensor4::<f64>::zeros([1, 1, 4, 4]);
        imp.set(0, 0, 0, 0, 1.0);
        let s = fft2(&imp);
        assert!(s.real.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(s.imag.max_abs() < 1e-12);
    }

    #[test]
    fn stacked_adjoint_matches_inner_products() {
        let mut r = lcg(21);
        let x = Tensor4::from_fn([2, 2, 4, 6], |_, _, _, _| r());
        let g = Tensor4::from_fn([2, 4, 4, 6], |_, _, _, _| r());
        let fx = fft2_stacked(&x);
        let lhs: f64 = fx.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let at = fft2_stacked_adjoint(&g);
        let rhs: f64 = x.data().iter().zip(at.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn dct_round_trip_and_parseval(h in 1usize..40, w in 1usize..40, seed in 0u64..10_000) {
            let mut r = lcg(seed);
            let x = Tensor4::from_fn([1, 2, h, w], |_, _, _, _| r());
            let s = dct2(&x);
            prop_assert!(idct2(&s).max_abs_diff(&x) < 1e-9);
            let ex: f64 = x.data().iter().map(|v| v * v).sum();
            prop_assert!((s.energy() - ex).abs() <= 1e-9 * ex.max(1e-300));
            prop_assert!(dct2(&idct2(&s)).coefficients().max_abs_diff(s.coefficients()) < 1e-9);
        }

        #[test]
        fn split_partitions_and_is_idempotent(h in 2usize..24, w in 2usize..24, tau in 0.0f64..2.0, seed in 0u64..10_000) {
            let mut r = lcg(seed);
            let x = Tensor4::from_fn([1, 3, h, w], |_, _, _, _| r());
            let mask = FrequencyMask::new(h, w, tau).unwrap();
            let (hf, lf) = split_hf_lf(&x, &mask).unwrap();
            prop_assert!(hf.add(&lf).unwrap().max_abs_diff(&x) < 1e-9);
            let (hf2, lf2) = split_hf_lf(&lf, &mask).unwrap();
            prop_assert!(hf2.max_abs() < 1e-9);
            prop_assert!(lf2.max_abs_diff(&lf) < 1e-9);
            let dot: f64 = dct2(&hf).coefficients().data().iter()
                .zip(dct2(&lf).coefficients().data()).map(|(a, b)| a * b).sum();
            prop_assert!(dot.abs() < 1e-9);
        }

        #[test]
        fn fft_is_linear(seed in 0u64..10_000) {
            let mut r = lcg(seed);
            let x = Tensor4::from_fn([1, 1, 6, 5], |_, _, _, _| r());
            let y = Tensor4::from_fn([1, 1, 6, 5], |_, _, _, _| r());
            let sum = fft2(&x.add(&y).unwrap());
            let (fx, fy) = (fft2(&x), fft2(&y));
            prop_assert!(sum.real.max_abs_diff(&fx.real.add(&fy.real).unwrap()) < 1e-9);
            prop_assert!(sum.imag.max_abs_diff(&fx.imag.add(&fy.imag).unwrap()) < 1e-9);
        }
    }
}
