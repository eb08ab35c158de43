//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{GradTape, Tensor4, Var};
use crate::error::{McmsError, Result};

/// Which coordinates of each input to probe.
#[derive(Clone, Copy, Debug)]
pub enum CoordSelection {
    All,
    /// Up to `per_input` coordinates drawn without replacement from each input.
    Sample { per_input: usize, seed: u64 },
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

fn evaluate<F>(f: &F, inputs: &[Tensor4<f64>]) -> Result<f64>
where
    F: Fn(&mut GradTape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = GradTape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(McmsError::shape("grad_check", "function output is not a scalar"));
    }
    let v = value.data()[0];
    if !v.is_finite() {
        return Err(McmsError::NonFinite("grad_check"));
    }
    Ok(v)
}

/// Denominator floor of [`grad_check`].
pub const DEFAULT_FLOOR: f64 = 1e-8;

/// Compare tape gradients of the scalar `f` against central differences
/// `(f(x + eps e) - f(x - eps e)) / (2 eps)`. Relative error uses the
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor4<f64>], eps: f64, coords: CoordSelection) -> Result<GradCheckReport>
where
    F: Fn(&mut GradTape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with_floor(f, inputs, eps, coords, DEFAULT_FLOOR)
}

/// [`grad_check`] with a caller-chosen denominator floor. Gradients much
/// smaller than the floor are effectively compared in absolute terms, which
/// matters when `f` is large enough that rounding in the difference
/// quotient, roughly `1e-16 |f| / eps`, rivals them.
pub fn grad_check_with_floor<F>(
    f: F,
    inputs: &[Tensor4<f64>],
    eps: f64,
    coords: CoordSelection,
    floor: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut GradTape<f64>, &[Var]) -> Result<Var>,
{
    if !(floor > 0.0) {
        return Err(McmsError::InvalidArgument(format!("grad_check floor {floor} must be positive")));
    }
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(McmsError::InvalidArgument(format!(
            "grad_check eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    let mut tape = GradTape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).data()[0].is_finite() {
        return Err(McmsError::NonFinite("grad_check"));
    }
    let grads = tape.backward(out)?;
    drop(tape);

    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let n = inputs[i].len();
        let picks: Vec<usize> = match coords {
            CoordSelection::All => (0..n).collect(),
            CoordSelection::Sample { per_input, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut idx = sample(&mut rng, n, per_input.min(n)).into_vec();
                idx.sort_unstable();
                idx
            }
        };
        for j in picks {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let plus = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let minus = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((i, j));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor4::scalar(3.0);
        let r = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &[x],
            1e-5,
            CoordSelection::All,
        )
        .unwrap();
        assert!((r.analytic_at_worst - 6.0).abs() < 1e-12);
        assert!((r.numeric_at_worst - 6.0).abs() < 1e-9);
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn linear_map_is_exact() {
        let x = Tensor4::from_fn([1, 2, 3, 3], |_, c, y, x| (c * 9 + y * 3 + x) as f64 * 0.1);
        let r = grad_check(
            |t, v| {
                let s = t.scale(v[0], 3.5)?;
                t.sum(s)
            },
            &[x],
            1e-5,
            CoordSelection::All,
        )
        .unwrap();
        assert_eq!(r.checked, 18);
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
    }

    #[test]
    fn floor_bounds_tiny_gradients() {
        // d/dx of 1e-9 x + 1 is 1e-9, below the rounding noise of f near 1.
        let x = Tensor4::scalar(0.3);
        let f = |t: &mut GradTape<f64>, v: &[Var]| {
            let s = t.scale(v[0], 1e-9)?;
            let one = t.constant(Tensor4::scalar(1.0))?;
            t.add(s, one)
        };
        let loose = grad_check_with_floor(f, &[x.clone()], 1e-5, CoordSelection::All, 1e-6).unwrap();
        assert!(loose.max_rel_error < 1e-3, "{loose:?}");
        assert!(grad_check_with_floor(f, &[x], 1e-5, CoordSelection::All, 0.0).is_err());
    }

    #[test]
    fn rejects_bad_eps() {
        let x = Tensor4::scalar(1.0);
        assert!(grad_check(|t, v| t.sum(v[0]), &[x], 1e-2, CoordSelection::All).is_err());
    }
}
