//! Multi-scale stripe attention.
//!
//! A 1x1 projection reduces `C` channels to `C/8`. The projected map is read
//! as `A` (`C/8 x HW`) and pooled at scales 2, 4 and 8 into `P_s`
//! (`C/8 x HW/s^2`). Each scale yields a pair of row-softmaxed stripe
//! matrices `sx = softmax(A^T P)` and `sy = softmax(P^T A)`; their products
//! are summed and softmaxed into the `HW x HW` map `F`. The output is
//! `reshape(R F) + I` with `R` the input read as `C x HW`.

use rand_chacha::ChaCha8Rng;

use crate::error::{McmsError, Result};
use crate::layers::{Bound, Conv, ParamSet};
use crate::tensor::{GradTape, Matrix, Real, Tensor4, Var};

pub const SCALES: [usize; 3] = [2, 4, 8];
pub const REDUCTION: usize = 8;

#[derive(Clone, Debug)]
pub struct MssaParams {
    pub channels: usize,
    pub proj: Conv,
}

/// Horizontal and vertical stripe matrices for one pooling scale.
#[derive(Clone, Debug, PartialEq)]
pub struct StripeWeights<T> {
    pub sx: Matrix<T>,
    pub sy: Matrix<T>,
    pub scale: usize,
}

/// Scalar count held by the attention intermediates of one batch entry: the
/// `C x HW` input read as `R`, the dense `F`, and both stripe matrices at
/// every scale.
pub fn footprint_elements(c: usize, h: usize, w: usize) -> usize {
    let hw = h * w;
    c * hw + hw * hw + SCALES.iter().map(|s| 2 * hw * (hw / (s * s))).sum::<usize>()
}

fn check_input(c: usize, h: usize, w: usize, channels: usize) -> Result<()> {
    if c != channels {
        return Err(McmsError::shape("mssa", format!("{c} channels, expected {channels}")));
    }
    if h % 8 != 0 || w % 8 != 0 {
        return Err(McmsError::shape("mssa", format!("{h}x{w} not divisible by 8")));
    }
    Ok(())
}

impl MssaParams {
    pub fn new<T: Real>(params: &mut ParamSet<T>, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Result<Self> {
        if channels == 0 || channels % REDUCTION != 0 {
            return Err(McmsError::InvalidArgument(format!(
                "stripe attention needs channels divisible by {REDUCTION}, got {channels}"
            )));
        }
        let proj = Conv::new(params, rng, &format!("{name}.proj"), channels, channels / REDUCTION, 1, 1, 1);
        Ok(MssaParams { channels, proj })
    }

    /// `A, B, C, D` for a single-entry batch, each as a `(1, 1, C/8, cols)` var.
    pub fn descriptors_var<T: Real>(&self, tape: &mut GradTape<T>, bound: &Bound, x: Var) -> Result<[Var; 4]> {
        let [n, c, h, w] = tape.shape(x);
        check_input(c, h, w, self.channels)?;
        if n != 1 {
            return Err(McmsError::shape("mssa", format!("descriptors take one entry, got {n}")));
        }
        let r = c / REDUCTION;
        let hat = self.proj.forward(tape, bound, x)?;
        let a = tape.reshape(hat, [1, 1, r, h * w])?;
        let mut out = [a; 4];
        for (slot, &s) in out[1..].iter_mut().zip(&SCALES) {
            let pooled = tape.avgpool2d(hat, s)?;
            *slot = tape.reshape(pooled, [1, 1, r, h * w / (s * s)])?;
        }
        Ok(out)
    }

    fn stripes_var<T: Real>(tape: &mut GradTape<T>, a: Var, p: Var) -> Result<(Var, Var)> {
        let at = tape.transpose(a)?;
        let xs = tape.matmul(at, p)?;
        let sx = tape.softmax_rows(xs)?;
        let pt = tape.transpose(p)?;
        let ys = tape.matmul(pt, a)?;
        let sy = tape.softmax_rows(ys)?;
        Ok((sx, sy))
    }

    /// The fused `HW x HW` map `F` for a single-entry batch.
    pub fn attention_var<T: Real>(&self, tape: &mut GradTape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let [a, b, c, d] = self.descriptors_var(tape, bound, x)?;
        let mut acc: Option<Var> = None;
        for p in [b, c, d] {
            let (sx, sy) = Self::stripes_var(tape, a, p)?;
            let prod = tape.matmul(sx, sy)?;
            acc = Some(match acc {
                Some(s) => tape.add(s, prod)?,
                None => prod,
            });
        }
        tape.softmax_rows(acc.expect("three scales"))
    }

    pub fn forward<T: Real>(&self, tape: &mut GradTape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let [n, c, h, w] = tape.shape(x);
        check_input(c, h, w, self.channels)?;
        let mut outs = Vec::with_capacity(n);
        for b in 0..n {
            let xb = if n == 1 { x } else { tape.select_batch(x, b)? };
            let f = self.attention_var(tape, bound, xb)?;
            let r = tape.reshape(xb, [1, 1, c, h * w])?;
            let att = tape.matmul_wide(r, f)?;
            let att = tape.reshape(att, [1, c, h, w])?;
            outs.push(tape.add(att, xb)?);
        }
        if n == 1 {
            Ok(outs[0])
        } else {
            tape.stack_batch(&outs)
        }
    }

    /// Value-level descriptors `A, B, C, D` of a single-entry input.
    pub fn descriptors<T: Real>(&self, params: &ParamSet<T>, x: &Tensor4<T>) -> Result<[Matrix<T>; 4]> {
        let mut tape = GradTape::new();
        let bound = params.bind_frozen(&mut tape)?;
        let xv = tape.constant(x.clone())?;
        let vars = self.descriptors_var(&mut tape, &bound, xv)?;
        let mut out = Vec::with_capacity(4);
        for v in vars {
            out.push(Matrix::from_tensor(tape.value(v))?);
        }
        Ok(out.try_into().expect("four descriptors"))
    }

    /// Value-level `F` of a single-entry input.
    pub fn attention_map<T: Real>(&self, params: &ParamSet<T>, x: &Tensor4<T>) -> Result<Matrix<T>> {
        let mut tape = GradTape::new();
        let bound = params.bind_frozen(&mut tape)?;
        let xv = tape.constant(x.clone())?;
        let f = self.attention_var(&mut tape, &bound, xv)?;
        Matrix::from_tensor(tape.value(f))
    }

    pub fn apply<T: Real>(&self, params: &ParamSet<T>, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut tape = GradTape::new();
        let bound = params.bind_frozen(&mut tape)?;
        let xv = tape.constant(x.clone())?;
        let out = self.forward(&mut tape, &bound, xv)?;
        Ok(tape.value(out).clone())
    }
}

/// `sx = softmax(A^T P)` and `sy = softmax(P^T A)` for descriptors `A` and `P`.
pub fn stripe_weights<T: Real>(a: &Matrix<T>, p: &Matrix<T>, scale: usize) -> Result<StripeWeights<T>> {
    if a.rows() != p.rows() {
        return Err(McmsError::shape(
            "stripe_weights",
            format!("{} descriptor rows vs {}", a.rows(), p.rows()),
        ));
    }
    let mut tape = GradTape::new();
    let av = tape.constant(a.as_tensor())?;
    let pv = tape.constant(p.as_tensor())?;
    let (sx, sy) = MssaParams::stripes_var(&mut tape, av, pv)?;
    Ok(StripeWeights {
        sx: Matrix::from_tensor(tape.value(sx))?,
        sy: Matrix::from_tensor(tape.value(sy))?,
        scale,
    })
}
