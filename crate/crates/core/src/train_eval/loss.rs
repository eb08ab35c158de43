//! Composite training loss: L1 on each frequency branch, and L1 plus a
//! weighted Fourier-domain L1 on the final output.

use crate::error::{McmsError, Result};
use crate::freq::{split_hf_lf, FrequencyMask};
use crate::net::{ForwardVars, Restoration};
use crate::tensor::{GradTape, Real, Tensor4, Var};

/// Weight of the Fourier term inside the output loss.
pub const MSFR_WEIGHT: f64 = 0.1;

/// Loss components. `l_o` already includes `MSFR_WEIGHT * l_msfr`;
/// `l_total = l_hf + l_lf + l_o`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_hf: f64,
    pub l_lf: f64,
    pub l_o: f64,
    pub l_msfr: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    /// Component-wise mean.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        LossBreakdown {
            l_hf: sum(|l| l.l_hf),
            l_lf: sum(|l| l.l_lf),
            l_o: sum(|l| l.l_o),
            l_msfr: sum(|l| l.l_msfr),
            l_total: sum(|l| l.l_total),
        }
    }
}

/// Tape handles of each component.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_hf: Var,
    pub l_lf: Var,
    pub l_o: Var,
    pub l_msfr: Var,
    pub l_total: Var,
}

impl LossVars {
    pub fn read<T: Real>(&self, tape: &GradTape<T>) -> LossBreakdown {
        let v = |x: Var| tape.value(x).data()[0].to_f64_lossy();
        LossBreakdown {
            l_hf: v(self.l_hf),
            l_lf: v(self.l_lf),
            l_o: v(self.l_o),
            l_msfr: v(self.l_msfr),
            l_total: v(self.l_total),
        }
    }
}

fn same_shape<T: Real>(op: &'static str, x: &Tensor4<T>, y: &Tensor4<T>) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(McmsError::shape(op, format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_loss<T: Real>(x: &Tensor4<T>, y: &Tensor4<T>) -> Result<f64> {
    same_shape("l1_loss", x, y)?;
    let s: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).abs())
        .sum();
    Ok(s / x.len() as f64)
}

/// Tape version of [`msfr_loss`].
pub fn msfr_var<T: Real>(tape: &mut GradTape<T>, x: Var, y: Var) -> Result<Var> {
    let fx = tape.fft2(x)?;
    let fy = tape.fft2(y)?;
    tape.l1(fx, fy)
}

/// Mean absolute difference between the 2-D DFTs of `x` and `y`, taken over
/// real and imaginary planes together.
pub fn msfr_loss<T: Real>(x: &Tensor4<T>, y: &Tensor4<T>) -> Result<f64> {
    same_shape("msfr_loss", x, y)?;
    let mut tape = GradTape::new();
    let xv = tape.constant(x.clone())?;
    let yv = tape.constant(y.clone())?;
    let l = msfr_var(&mut tape, xv, yv)?;
    Ok(tape.value(l).data()[0].to_f64_lossy())
}

/// Record the composite loss of a forward pass against `target`.
pub fn total_loss_var<T: Real>(tape: &mut GradTape<T>, out: &ForwardVars, target: &Tensor4<T>, mask: &FrequencyMask) -> Result<LossVars> {
    same_shape("total_loss", tape.value(out.restored), target)?;
    let (y_hf, y_lf) = split_hf_lf(target, mask)?;
    let y = tape.constant(target.clone())?;
    let y_hf = tape.constant(y_hf)?;
    let y_lf = tape.constant(y_lf)?;
    let l_hf = tape.l1(out.restored_hf, y_hf)?;
    let l_lf = tape.l1(out.restored_lf, y_lf)?;
    let l_pix = tape.l1(out.restored, y)?;
    let l_msfr = msfr_var(tape, out.restored, y)?;
    let weighted = tape.scale(l_msfr, T::of(MSFR_WEIGHT))?;
    let l_o = tape.add(l_pix, weighted)?;
    let branches = tape.add(l_hf, l_lf)?;
    let l_total = tape.add(branches, l_o)?;
    Ok(LossVars {
        l_hf,
        l_lf,
        l_o,
        l_msfr,
        l_total,
    })
}

/// Value-level composite loss.
pub fn total_loss<T: Real>(out: &Restoration<T>, target: &Tensor4<T>, mask: &FrequencyMask) -> Result<LossBreakdown> {
    same_shape("total_loss", &out.restored_hf, target)?;
    same_shape("total_loss", &out.restored_lf, target)?;
    let mut tape = GradTape::new();
    let vars = ForwardVars {
        restored: tape.constant(out.restored.clone())?,
        restored_hf: tape.constant(out.restored_hf.clone())?,
        restored_lf: tape.constant(out.restored_lf.clone())?,
        f_e: tape.constant(Tensor4::scalar(T::zero()))?,
    };
    let l = total_loss_var(&mut tape, &vars, target, mask)?;
    Ok(l.read(&tape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], seed: u64) -> Tensor4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn(shape, |_, _, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn l1_examples() {
        let x = random([1, 3, 4, 4], 1);
        assert_eq!(l1_loss(&x, &x).unwrap(), 0.0);
        assert_eq!(l1_loss(&Tensor4::<f64>::full([1, 1, 2, 2], 1.0), &Tensor4::zeros([1, 1, 2, 2])).unwrap(), 1.0);
        let a = Tensor4::new([1, 1, 1, 2], vec![0.0, 2.0]).unwrap();
        let b = Tensor4::new([1, 1, 1, 2], vec![1.0, 1.0]).unwrap();
        assert_eq!(l1_loss(&a, &b).unwrap(), 1.0);
        assert!(l1_loss(&a, &Tensor4::zeros([1, 1, 2, 1])).is_err());
    }

    #[test]
    fn msfr_examples() {
        let mut imp = Tensor4::<f64>::zeros([1, 1, 2, 2]);
        imp.set(0, 0, 0, 0, 1.0);
        let z = Tensor4::zeros([1, 1, 2, 2]);
        assert!((msfr_loss(&imp, &z).unwrap() - 0.5).abs() < 1e-15);
        assert!((msfr_loss(&imp.scale(3.0), &z).unwrap() - 1.5).abs() < 1e-15);
        assert_eq!(msfr_loss(&imp, &imp).unwrap(), 0.0);
    }

    fn perfect(target: &Tensor4<f64>, mask: &FrequencyMask) -> Restoration<f64> {
        let (hf, lf) = split_hf_lf(target, mask).unwrap();
        Restoration {
            restored: target.clone(),
            restored_hf: hf,
            restored_lf: lf,
        }
    }

    #[test]
    fn perfect_restoration_is_zero() {
        let y = random([1, 3, 16, 16], 2);
        let mask = FrequencyMask::new(16, 16, 0.1).unwrap();
        let l = total_loss(&perfect(&y, &mask), &y, &mask).unwrap();
        assert_eq!(l, LossBreakdown::default());
    }

    #[test]
    fn fourier_term_weight() {
        // A DC offset d on an h x w plane moves the pixel L1 by d. Its DFT is
        // one real bin of d * h * w out of 2hw stacked values, so d / 2.
        let y = random([1, 1, 8, 8], 3);
        let mask = FrequencyMask::new(8, 8, 0.1).unwrap();
        let mut out = perfect(&y, &mask);
        let base = out.clone();
        for d in [0.01, 0.02] {
            out.restored = base.restored.map(|v| v + d);
            let l = total_loss(&out, &y, &mask).unwrap();
            assert!((l.l_msfr - d / 2.0).abs() < 1e-12);
            assert!((l.l_o - (d + 0.1 * d / 2.0)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn total_is_sum_of_parts(seed in 0u64..10_000) {
            let y = random([2, 3, 8, 8], seed);
            let out = Restoration {
                restored: random([2, 3, 8, 8], seed + 1),
                restored_hf: random([2, 3, 8, 8], seed + 2),
                restored_lf: random([2, 3, 8, 8], seed + 3),
            };
            let mask = FrequencyMask::new(8, 8, 0.3).unwrap();
            let l = total_loss(&out, &y, &mask).unwrap();
            prop_assert!((l.l_total - (l.l_hf + l.l_lf + l.l_o)).abs() < 1e-9);
            prop_assert!(l.l_hf >= 0.0 && l.l_lf >= 0.0 && l.l_o >= 0.0 && l.l_msfr >= 0.0);
        }

        #[test]
        fn fourier_and_pixel_zero_together(seed in 0u64..10_000, same in any::<bool>()) {
            let x = random([1, 3, 4, 4], seed);
            let y = if same { x.clone() } else { random([1, 3, 4, 4], seed + 7) };
            prop_assert_eq!(msfr_loss(&x, &y).unwrap() == 0.0, l1_loss(&x, &y).unwrap() == 0.0);
        }
    }
}
