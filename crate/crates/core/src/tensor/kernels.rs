//! Slice-level forward and backward kernels shared by the value API and the tape.

use super::{Real, Tensor4};
use crate::error::{McmsError, Result};

/// [`gemm`] with every product and sum carried out in f64.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_wide<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    let wide = |s: &[T]| s.iter().map(|v| v.to_f64_lossy()).collect::<Vec<f64>>();
    let (aw, bw) = (wide(&a[..m * k]), wide(&b[..k * n]));
    let mut cw = if accumulate { wide(&c[..m * n]) } else { vec![0.0; m * n] };
    gemm(m, k, n, &aw, trans_a, &bw, trans_b, &mut cw, accumulate);
    for (dst, v) in c.iter_mut().zip(cw) {
        *dst = T::of(v);
    }
}

/// `c = op(a) * op(b)`, or `c += ...` when `accumulate`. All buffers row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the assert above bounds every access implied by the strides.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Mirror an out-of-range index back into `0..n` without repeating the edge.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Border handling for [`super::conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Reflect-pad by `k / 2`; output is `h / stride` by `w / stride`.
    SameReflect,
    /// No padding.
    Valid,
}

#[derive(Clone, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
    /// `row_src[ki * oh + oy]` is the input row sampled by kernel row `ki` at output row `oy`.
    pub row_src: Vec<usize>,
    pub col_src: Vec<usize>,
    pub pointwise: bool,
}

impl ConvGeom {
    pub fn new(
        x: [usize; 4],
        weight: [usize; 4],
        stride: usize,
        padding: Padding,
        groups: usize,
    ) -> Result<Self> {
        let [n, cin, h, w] = x;
        let [cout, cin_g, kh, kw] = weight;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin_g * groups != cin {
            return Err(McmsError::shape(
                "conv2d",
                format!("input has {cin} channels, weight expects {cin_g} x {groups} groups"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(McmsError::shape("conv2d", format!("even kernel size {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(McmsError::shape("conv2d", "stride 0"));
        }
        let (oh, ow, pad_h, pad_w) = match padding {
            Padding::SameReflect => {
                if h % stride != 0 || w % stride != 0 {
                    return Err(McmsError::shape(
                        "conv2d",
                        format!("stride {stride} does not divide {h}x{w}"),
                    ));
                }
                (h / stride, w / stride, kh / 2, kw / 2)
            }
            Padding::Valid => {
                if h < kh || w < kw || (h - kh) % stride != 0 || (w - kw) % stride != 0 {
                    return Err(McmsError::shape(
                        "conv2d",
                        format!("valid {kh}x{kw} stride {stride} does not tile {h}x{w}"),
                    ));
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
        };
        let table = |k: usize, o: usize, pad: usize, dim: usize| {
            let mut t = Vec::with_capacity(k * o);
            for ki in 0..k {
                for oi in 0..o {
                    t.push(reflect((oi * stride + ki) as isize - pad as isize, dim));
                }
            }
            t
        };
        Ok(ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            groups,
            oh,
            ow,
            row_src: table(kh, oh, pad_h, h),
            col_src: table(kw, ow, pad_w, w),
            pointwise: kh == 1 && kw == 1 && stride == 1,
        })
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn k_len(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn p_len(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfold the group-`g` channels of sample `n` into a `K x P` buffer.
    fn im2col<T: Real>(&self, x: &[T], n: usize, g: usize, cols: &mut [T]) {
        let (hw, p) = (self.h * self.w, self.p_len());
        let mut row = 0;
        for ci in 0..self.cin_g() {
            let base = (n * self.cin + g * self.cin_g() + ci) * hw;
            let plane = &x[base..base + hw];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let rs = &self.row_src[ki * self.oh..(ki + 1) * self.oh];
                    let cs = &self.col_src[kj * self.ow..(kj + 1) * self.ow];
                    for (oy, &sy) in rs.iter().enumerate() {
                        let src_row = &plane[sy * self.w..(sy + 1) * self.w];
                        let out_row = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        for (o, &sx) in out_row.iter_mut().zip(cs) {
                            *o = src_row[sx];
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], n: usize, g: usize, gx: &mut [T]) {
        let (hw, p) = (self.h * self.w, self.p_len());
        let mut row = 0;
        for ci in 0..self.cin_g() {
            let base = (n * self.cin + g * self.cin_g() + ci) * hw;
            let plane = &mut gx[base..base + hw];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let src = &cols[row * p..(row + 1) * p];
                    let rs = &self.row_src[ki * self.oh..(ki + 1) * self.oh];
                    let cs = &self.col_src[kj * self.ow..(kj + 1) * self.ow];
                    for (oy, &sy) in rs.iter().enumerate() {
                        let in_row = &src[oy * self.ow..(oy + 1) * self.ow];
                        for (&v, &sx) in in_row.iter().zip(cs) {
                            plane[sy * self.w + sx] = plane[sy * self.w + sx] + v;
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Input block of group `g`, sample `n`, as a `K x P` matrix for pointwise convs.
    fn group_input<'a, T: Real>(&self, x: &'a [T], n: usize, g: usize) -> &'a [T] {
        let hw = self.h * self.w;
        let base = (n * self.cin + g * self.cin_g()) * hw;
        &x[base..base + self.cin_g() * hw]
    }

    pub fn forward<T: Real>(&self, x: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
        let (k, p, cout_g) = (self.k_len(), self.p_len(), self.cout_g());
        let mut out = vec![T::zero(); self.n * self.cout * p];
        let mut cols = if self.pointwise { Vec::new() } else { vec![T::zero(); k * p] };
        for n in 0..self.n {
            for g in 0..self.groups {
                let wg = &weight[g * cout_g * k..(g + 1) * cout_g * k];
                let base = (n * self.cout + g * cout_g) * p;
                let dst = &mut out[base..base + cout_g * p];
                if self.pointwise {
                    gemm(cout_g, k, p, wg, false, self.group_input(x, n, g), false, dst, false);
                } else {
                    self.im2col(x, n, g, &mut cols);
                    gemm(cout_g, k, p, wg, false, &cols, false, dst, false);
                }
            }
            if let Some(b) = bias {
                for co in 0..self.cout {
                    let base = (n * self.cout + co) * p;
                    out[base..base + p].iter_mut().for_each(|v| *v = *v + b[co]);
                }
            }
        }
        out
    }

    /// Returns `(grad_x, grad_weight, grad_bias)` for an upstream gradient.
    pub fn backward<T: Real>(&self, x: &[T], weight: &[T], gout: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (k, p, cout_g) = (self.k_len(), self.p_len(), self.cout_g());
        let mut gx = vec![T::zero(); x.len()];
        let mut gw = vec![T::zero(); weight.len()];
        let mut gb = vec![T::zero(); self.cout];
        let mut cols = vec![T::zero(); k * p];
        for n in 0..self.n {
            for co in 0..self.cout {
                let base = (n * self.cout + co) * p;
                gb[co] = gb[co] + gout[base..base + p].iter().copied().sum::<T>();
            }
            for g in 0..self.groups {
                let wg = &weight[g * cout_g * k..(g + 1) * cout_g * k];
                let gwg = &mut gw[g * cout_g * k..(g + 1) * cout_g * k];
                let base = (n * self.cout + g * cout_g) * p;
                let go = &gout[base..base + cout_g * p];
                if self.pointwise {
                    gemm(cout_g, p, k, go, false, self.group_input(x, n, g), true, gwg, true);
                    let hw = self.h * self.w;
                    let xb = (n * self.cin + g * self.cin_g()) * hw;
                    gemm(k, cout_g, p, wg, true, go, false, &mut gx[xb..xb + k * hw], true);
                } else {
                    self.im2col(x, n, g, &mut cols);
                    gemm(cout_g, p, k, go, false, &cols, true, gwg, true);
                    gemm(k, cout_g, p, wg, true, go, false, &mut cols, false);
                    self.col2im(&cols, n, g, &mut gx);
                }
            }
        }
        (gx, gw, gb)
    }
}

pub(crate) fn pool_check(shape: [usize; 4], k: usize) -> Result<()> {
    let [_, _, h, w] = shape;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(McmsError::shape(
            "avgpool2d",
            format!("window {k} does not divide {h}x{w}"),
        ));
    }
    Ok(())
}

pub(crate) fn avgpool_forward<T: Real>(x: &Tensor4<T>, k: usize) -> Tensor4<T> {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / k, w / k);
    let inv = T::one() / T::of((k * k) as f64);
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            let drow = &mut dst[(y / k) * ow..(y / k + 1) * ow];
            for (x, &v) in row.iter().enumerate() {
                drow[x / k] = drow[x / k] + v;
            }
        }
        dst.iter_mut().for_each(|v| *v = *v * inv);
    }
    out
}

pub(crate) fn avgpool_backward<T: Real>(shape: [usize; 4], k: usize, g: &Tensor4<T>) -> Tensor4<T> {
    let [_, _, h, w] = shape;
    let ow = w / k;
    let inv = T::one() / T::of((k * k) as f64);
    let mut gx = Tensor4::zeros(shape);
    let planes = shape[0] * shape[1];
    for p in 0..planes {
        let src = &g.data()[p * (h / k) * ow..(p + 1) * (h / k) * ow];
        let dst = &mut gx.data_mut()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[(y / k) * ow + x / k] * inv;
            }
        }
    }
    gx
}

/// Interpolation taps for output index `j` when doubling a length-`n` axis.
/// Samples sit at source coordinate `j / 2`, clamped at the far edge.
fn upsample_taps(j: usize, n: usize) -> [(usize, f64); 2] {
    let i = j / 2;
    if j % 2 == 0 {
        [(i, 1.0), (i, 0.0)]
    } else {
        [(i, 0.5), ((i + 1).min(n - 1), 0.5)]
    }
}

pub(crate) fn upsample_forward<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let ty = upsample_taps(oy, h);
            for ox in 0..ow {
                let tx = upsample_taps(ox, w);
                let mut acc = 0.0;
                for &(sy, wy) in &ty {
                    for &(sx, wx) in &tx {
                        acc += wy * wx * src[sy * w + sx].to_f64_lossy();
                    }
                }
                dst[oy * ow + ox] = T::of(acc);
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<T: Real>(shape: [usize; 4], g: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = shape;
    let (oh, ow) = (2 * h, 2 * w);
    let mut gx = Tensor4::zeros(shape);
    for p in 0..n * c {
        let src = &g.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx.data_mut()[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let ty = upsample_taps(oy, h);
            for ox in 0..ow {
                let tx = upsample_taps(ox, w);
                let gv = src[oy * ow + ox];
                for &(sy, wy) in &ty {
                    for &(sx, wx) in &tx {
                        let wt = wy * wx;
                        if wt != 0.0 {
                            dst[sy * w + sx] = dst[sy * w + sx] + T::of(wt) * gv;
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Softmax over the last axis of every row, with max subtraction.
pub(crate) fn softmax_rows_inplace<T: Real>(data: &mut [T], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        let inv = T::one() / sum;
        row.iter_mut().for_each(|v| *v = *v * inv);
    }
}

/// Gradient through a row softmax given its output `y`.
pub(crate) fn softmax_rows_backward<T: Real>(y: &[T], g: &[T], cols: usize) -> Vec<T> {
    let mut gx = vec![T::zero(); y.len()];
    for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(gx.chunks_mut(cols)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - dot);
        }
    }
    gx
}

/// Shifted softplus `ln(1 + e^x) - ln 2`: smooth, monotone, zero at zero,
/// slope 1/2 at the origin and asymptotically the identity.
pub(crate) fn act<T: Real>(x: T) -> T {
    let softplus = x.max(T::zero()) + (-x.abs()).exp().ln_1p();
    softplus - T::LN_2()
}

pub(crate) fn act_grad<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-6;

/// Per-pixel normalization over channels. Returns `(y, mean, rstd)`; the
/// statistics are indexed by `n * h * w + pixel`.
pub(crate) fn layer_norm_forward<T: Real>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
) -> (Tensor4<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let inv_c = T::one() / T::of(c as f64);
    let eps = T::of(LAYER_NORM_EPS);
    let mut mean = vec![T::zero(); n * hw];
    let mut rstd = vec![T::zero(); n * hw];
    let mut y = Tensor4::zeros(x.shape());
    let xd = x.data();
    for ni in 0..n {
        for p in 0..hw {
            let at = |ci: usize| (ni * c + ci) * hw + p;
            let mu = (0..c).map(|ci| xd[at(ci)]).sum::<T>() * inv_c;
            let var = (0..c)
                .map(|ci| {
                    let d = xd[at(ci)] - mu;
                    d * d
                })
                .sum::<T>()
                * inv_c;
            let r = T::one() / (var + eps).sqrt();
            mean[ni * hw + p] = mu;
            rstd[ni * hw + p] = r;
            let yd = y.data_mut();
            for ci in 0..c {
                yd[at(ci)] = (xd[at(ci)] - mu) * r * gamma[ci] + beta[ci];
            }
        }
    }
    (y, mean, rstd)
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub(crate) fn layer_norm_backward<T: Real>(
    x: &Tensor4<T>,
    gamma: &[T],
    mean: &[T],
    rstd: &[T],
    g: &Tensor4<T>,
) -> (Tensor4<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let inv_c = T::one() / T::of(c as f64);
    let mut gx = Tensor4::zeros(x.shape());
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    let (xd, gd) = (x.data(), g.data());
    for ni in 0..n {
        for p in 0..hw {
            let at = |ci: usize| (ni * c + ci) * hw + p;
            let (mu, r) = (mean[ni * hw + p], rstd[ni * hw + p]);
            let mut sum_gh = T::zero();
            let mut sum_gh_xh = T::zero();
            for ci in 0..c {
                let xh = (xd[at(ci)] - mu) * r;
                let gh = gd[at(ci)] * gamma[ci];
                gg[ci] = gg[ci] + gd[at(ci)] * xh;
                gb[ci] = gb[ci] + gd[at(ci)];
                sum_gh = sum_gh + gh;
                sum_gh_xh = sum_gh_xh + gh * xh;
            }
            let (m_gh, m_ghxh) = (sum_gh * inv_c, sum_gh_xh * inv_c);
            let gxd = gx.data_mut();
            for ci in 0..c {
                let xh = (xd[at(ci)] - mu) * r;
                let gh = gd[at(ci)] * gamma[ci];
                gxd[at(ci)] = r * (gh - m_gh - xh * m_ghxh);
            }
        }
    }
    (gx, gg, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_mirrors_without_edge_repeat() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect(-5, 1), 0);
    }

    #[test]
    fn gemm_transposes_match_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, &a, false, &b, false, &mut c, false);
        let mut naive = vec![0.0; 8];
        for i in 0..2 {
            for j in 0..4 {
                for k in 0..3 {
                    naive[i * 4 + j] += a[i * 3 + k] * b[k * 4 + j];
                }
            }
        }
        assert_eq!(c, naive);
        // a^T stored as 3x2, b^T stored as 4x3.
        let at: Vec<f64> = (0..6).map(|i| a[(i % 2) * 3 + i / 2]).collect();
        let bt: Vec<f64> = (0..12).map(|i| b[(i % 3) * 4 + i / 3]).collect();
        let mut c2 = vec![1.0; 8];
        gemm(2, 3, 4, &at, true, &bt, true, &mut c2, true);
        for (x, y) in c2.iter().zip(&naive) {
            assert!((x - (y + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_taps_clamp_at_edge() {
        assert_eq!(upsample_taps(3, 2), [(1, 0.5), (1, 0.5)]);
        assert_eq!(upsample_taps(1, 2), [(0, 0.5), (1, 0.5)]);
    }
}
