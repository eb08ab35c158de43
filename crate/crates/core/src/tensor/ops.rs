//! Value-level operators. The tape in [`super::GradTape`] records the same
//! kernels with their adjoints.

use super::kernels::{self, ConvGeom};
use super::{Matrix, Real, Tensor4};
use crate::error::{McmsError, Result};

pub use super::kernels::Padding;

/// Cross-correlation of `x` with `weight` `(out_c, in_c / groups, kh, kw)`
/// plus a per-output-channel bias.
pub fn conv2d<T: Real>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: Option<&[T]>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor4<T>> {
    conv2d_grouped(x, weight, bias, stride, padding, 1)
}

pub fn conv2d_grouped<T: Real>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: Option<&[T]>,
    stride: usize,
    padding: Padding,
    groups: usize,
) -> Result<Tensor4<T>> {
    let geom = ConvGeom::new(x.shape(), weight.shape(), stride, padding, groups)?;
    if let Some(b) = bias {
        if b.len() != geom.cout {
            return Err(McmsError::shape(
                "conv2d",
                format!("bias has {} entries for {} outputs", b.len(), geom.cout),
            ));
        }
    }
    let data = geom.forward(x.data(), weight.data(), bias);
    Tensor4::new([geom.n, geom.cout, geom.oh, geom.ow], data)
}

pub fn avgpool2d<T: Real>(x: &Tensor4<T>, k: usize) -> Result<Tensor4<T>> {
    kernels::pool_check(x.shape(), k)?;
    Ok(kernels::avgpool_forward(x, k))
}

/// Bilinear 2x upsampling; output sample `j` reads source coordinate `j / 2`.
pub fn upsample2x<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    kernels::upsample_forward(x)
}

pub fn activation<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(kernels::act)
}

/// Row-normalized softmax.
pub fn softmax_rows<T: Real>(m: &Matrix<T>) -> Result<Matrix<T>> {
    if m.data().iter().any(|v| !v.is_finite()) {
        return Err(McmsError::NonFinite("softmax"));
    }
    let mut data = m.data().to_vec();
    kernels::softmax_rows_inplace(&mut data, m.cols());
    Matrix::new(m.rows(), m.cols(), data)
}

pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols() != b.rows() {
        return Err(McmsError::shape(
            "matmul",
            format!("({}x{}) x ({}x{})", a.rows(), a.cols(), b.rows(), b.cols()),
        ));
    }
    let mut out = vec![T::zero(); a.rows() * b.cols()];
    kernels::gemm(a.rows(), a.cols(), b.cols(), a.data(), false, b.data(), false, &mut out, false);
    Matrix::new(a.rows(), b.cols(), out)
}

/// Stack along channels; all other dimensions must agree.
pub fn concat_channels<T: Real>(parts: &[&Tensor4<T>]) -> Result<Tensor4<T>> {
    let first = parts
        .first()
        .ok_or_else(|| McmsError::shape("concat", "no inputs"))?;
    let [n, _, h, w] = first.shape();
    if let Some(bad) = parts.iter().find(|p| p.n() != n || p.h() != h || p.w() != w) {
        return Err(McmsError::shape(
            "concat",
            format!("{:?} vs {:?}", bad.shape(), first.shape()),
        ));
    }
    let c: usize = parts.iter().map(|p| p.c()).sum();
    let hw = h * w;
    let mut data = Vec::with_capacity(n * c * hw);
    for ni in 0..n {
        for p in parts {
            let len = p.c() * hw;
            data.extend_from_slice(&p.data()[ni * len..(ni + 1) * len]);
        }
    }
    Tensor4::new([n, c, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn direct_conv(x: &Tensor4<f64>, wt: &Tensor4<f64>, bias: &[f64]) -> Tensor4<f64> {
        // reference: stride 1, same-reflect, groups 1
        let [n, cin, h, w] = x.shape();
        let [cout, _, kh, kw] = wt.shape();
        let refl = |i: isize, len: usize| -> usize {
            let mut i = i;
            if i < 0 {
                i = -i;
            }
            if i >= len as isize {
                i = 2 * (len as isize - 1) - i;
            }
            i as usize
        };
        Tensor4::from_fn([n, cout, h, w], |ni, co, y, xx| {
            let mut acc = bias[co];
            for ci in 0..cin {
                for ki in 0..kh {
                    for kj in 0..kw {
                        let sy = refl(y as isize + ki as isize - (kh / 2) as isize, h);
                        let sx = refl(xx as isize + kj as isize - (kw / 2) as isize, w);
                        acc += wt.at(co, ci, ki, kj) * x.at(ni, ci, sy, sx);
                    }
                }
            }
            acc
        })
    }

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed;
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    #[test]
    fn dirac_kernel_is_identity() {
        let x = Tensor4::full([1, 1, 3, 3], 1.0f64);
        let mut k = Tensor4::zeros([1, 1, 3, 3]);
        k.set(0, 0, 1, 1, 1.0);
        let y = conv2d(&x, &k, Some(&[0.0]), 1, Padding::SameReflect).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn valid_all_ones_sums_window() {
        let x = Tensor4::full([1, 1, 3, 3], 1.0f64);
        let k = Tensor4::full([1, 1, 3, 3], 1.0f64);
        let y = conv2d(&x, &k, Some(&[0.0]), 1, Padding::Valid).unwrap();
        assert_eq!(y.shape(), [1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut r = lcg(3);
        let x = Tensor4::<f64>::zeros([2, 3, 5, 5]);
        let k = Tensor4::from_fn([4, 3, 3, 3], |_, _, _, _| r());
        let y = conv2d(&x, &k, None, 1, Padding::SameReflect).unwrap();
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut r = lcg(11);
        for &(k, c) in &[(1usize, 2usize), (3, 3), (5, 2), (7, 1)] {
            let x = Tensor4::from_fn([2, c, 9, 8], |_, _, _, _| r());
            let wt = Tensor4::from_fn([3, c, k, k], |_, _, _, _| r());
            let b: Vec<f64> = (0..3).map(|_| r()).collect();
            let got = conv2d(&x, &wt, Some(&b), 1, Padding::SameReflect).unwrap();
            let want = direct_conv(&x, &wt, &b);
            assert!(got.max_abs_diff(&want) < 1e-10, "k={k}");
        }
    }

    #[test]
    fn strided_conv_samples_every_other_output() {
        let mut r = lcg(5);
        let x = Tensor4::from_fn([1, 2, 8, 8], |_, _, _, _| r());
        let wt = Tensor4::from_fn([3, 2, 3, 3], |_, _, _, _| r());
        let full = conv2d(&x, &wt, None, 1, Padding::SameReflect).unwrap();
        let half = conv2d(&x, &wt, None, 2, Padding::SameReflect).unwrap();
        assert_eq!(half.shape(), [1, 3, 4, 4]);
        for co in 0..3 {
            for y in 0..4 {
                for xx in 0..4 {
                    assert!((half.at(0, co, y, xx) - full.at(0, co, 2 * y, 2 * xx)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn depthwise_conv_acts_per_channel() {
        let mut r = lcg(8);
        let x = Tensor4::from_fn([1, 3, 6, 6], |_, _, _, _| r());
        let wt = Tensor4::from_fn([3, 1, 3, 3], |_, _, _, _| r());
        let y = conv2d_grouped(&x, &wt, None, 1, Padding::SameReflect, 3).unwrap();
        for c in 0..3 {
            let xc = x.slice_channels(c, 1).unwrap();
            let wc = wt.select_batch(c).unwrap();
            let yc = conv2d(&xc, &wc, None, 1, Padding::SameReflect).unwrap();
            assert!(yc.max_abs_diff(&y.slice_channels(c, 1).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn conv_contract_errors() {
        let x = Tensor4::<f64>::zeros([1, 2, 4, 4]);
        assert!(conv2d(&x, &Tensor4::zeros([1, 3, 3, 3]), None, 1, Padding::SameReflect).is_err());
        assert!(conv2d(&x, &Tensor4::zeros([1, 2, 2, 2]), None, 1, Padding::SameReflect).is_err());
        assert!(conv2d(&x, &Tensor4::zeros([1, 2, 3, 3]), None, 3, Padding::SameReflect).is_err());
    }

    #[test]
    fn avgpool_examples() {
        let x = Tensor4::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avgpool2d(&x, 2).unwrap().data(), &[2.5]);
        let c = Tensor4::full([1, 2, 8, 8], 0.3f64);
        let p = avgpool2d(&c, 4).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        assert!(avgpool2d(&Tensor4::<f64>::zeros([1, 1, 6, 6]), 4).is_err());
    }

    #[test]
    fn softmax_examples() {
        let m = Matrix::from_rows(&[&[0.0f64, 0.0], &[0.0, 3f64.ln()]]).unwrap();
        let s = softmax_rows(&m).unwrap();
        assert!((s.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((s.get(1, 0) - 0.25).abs() < 1e-15);
        assert!((s.get(1, 1) - 0.75).abs() < 1e-15);
        let bad = Matrix::from_rows(&[&[f64::NAN, 0.0]]).unwrap();
        assert!(softmax_rows(&bad).is_err());
    }

    #[test]
    fn matmul_examples() {
        let a = Matrix::from_rows(&[&[1.0f64, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[&[5.0f64], &[6.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
        assert_eq!(matmul(&a, &Matrix::identity(2)).unwrap(), a);
        assert!(matmul(&Matrix::<f64>::zeros(2, 3), &Matrix::zeros(4, 2)).is_err());
    }

    #[test]
    fn layout_examples() {
        let mut r = lcg(2);
        let x = Tensor4::from_fn([1, 8, 4, 4], |_, _, _, _| r());
        let parts = x.chunk(4).unwrap();
        let refs: Vec<_> = parts.iter().collect();
        assert_eq!(concat_channels(&refs).unwrap(), x);
        let y = Tensor4::from_fn([1, 2, 2, 2], |_, _, _, _| r());
        let m = Matrix::from_tensor(&y.reshape([1, 1, 2, 4]).unwrap()).unwrap();
        assert_eq!(m.as_tensor().reshape([1, 2, 2, 2]).unwrap(), y);
        assert!(Tensor4::<f64>::zeros([1, 6, 2, 2]).chunk(4).is_err());
        assert!(y.reshape([1, 1, 3, 3]).is_err());
    }

    #[test]
    fn upsample_examples() {
        let c = Tensor4::full([1, 2, 3, 4], 5.0f64);
        let u = upsample2x(&c);
        assert_eq!(u.shape(), [1, 2, 6, 8]);
        assert!(u.data().iter().all(|&v| v == 5.0));
        assert_eq!(avgpool2d(&u, 2).unwrap(), c);
        let x = Tensor4::new([1, 1, 1, 2], vec![1.0f64, 3.0]).unwrap();
        let u = upsample2x(&x);
        assert_eq!(u.at(0, 0, 0, 0), 1.0);
        assert_eq!(u.at(0, 0, 0, 1), 2.0);
        assert_eq!(u.at(0, 0, 0, 2), 3.0);
    }

    #[test]
    fn activation_examples() {
        let f = |v: f64| activation(&Tensor4::scalar(v)).data()[0];
        assert_eq!(f(0.0), 0.0);
        assert!((f(100.0) - 100.0).abs() / 100.0 < 1e-2);
        let eps = 1e-5;
        let fd = (f(eps) - f(-eps)) / (2.0 * eps);
        assert!((fd - kernels::act_grad(0.0)).abs() < 1e-6);
        for w in [-3.0, -1.0, -0.5, 0.2, 2.0].windows(2) {
            assert!(f(w[0]) < f(w[1]));
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift(vals in prop::collection::vec(-15.0f64..15.0, 12), shift in -50.0f64..50.0) {
            let m = Matrix::new(3, 4, vals.clone()).unwrap();
            let s = softmax_rows(&m).unwrap();
            for r in s.row_sums() {
                prop_assert!((r - 1.0).abs() < 1e-9);
            }
            prop_assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
            let shifted = Matrix::new(3, 4, vals.iter().map(|v| v + shift).collect()).unwrap();
            let s2 = softmax_rows(&shifted).unwrap();
            for (a, b) in s.data().iter().zip(s2.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn concat_inverts_chunk(groups in 1usize..5, per in 1usize..4, seed in 0u64..1000) {
            let mut r = lcg(seed);
            let x = Tensor4::from_fn([2, groups * per, 3, 2], |_, _, _, _| r());
            let parts = x.chunk(groups).unwrap();
            let refs: Vec<_> = parts.iter().collect();
            prop_assert_eq!(concat_channels(&refs).unwrap(), x);
        }

        #[test]
        fn conv_is_linear_without_bias(alpha in -2.0f64..2.0, beta in -2.0f64..2.0, seed in 0u64..1000) {
            let mut r = lcg(seed);
            let x = Tensor4::from_fn([1, 2, 6, 5], |_, _, _, _| r());
            let y = Tensor4::from_fn([1, 2, 6, 5], |_, _, _, _| r());
            let wt = Tensor4::from_fn([3, 2, 3, 3], |_, _, _, _| r());
            let mix = x.scale(alpha).add(&y.scale(beta)).unwrap();
            let lhs = conv2d(&mix, &wt, None, 1, Padding::SameReflect).unwrap();
            let cx = conv2d(&x, &wt, None, 1, Padding::SameReflect).unwrap();
            let cy = conv2d(&y, &wt, None, 1, Padding::SameReflect).unwrap();
            let rhs = cx.scale(alpha).add(&cy.scale(beta)).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
        }

        #[test]
        fn avgpool_preserves_mean(k in prop::sample::select(vec![1usize, 2, 4]), seed in 0u64..1000) {
            let mut r = lcg(seed);
            let x = Tensor4::from_fn([2, 3, 8, 16], |_, _, _, _| r());
            let p = avgpool2d(&x, k).unwrap();
            prop_assert!((p.mean() - x.mean()).abs() < 1e-12);
        }
    }
}
