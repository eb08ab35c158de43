//! Built-in invariant checks, run by `mcms selftest` and `mcms gradcheck`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::freq::{dct2, idct2, split_hf_lf, FrequencyMask};
use crate::gff::GffParams;
use crate::layers::{Bound, ParamSet};
use crate::mssa::{stripe_weights, MssaParams, SCALES};
use crate::net::{McmsModel, ModelConfig};
use crate::tensor::ops::Padding;
use crate::tensor::{concat_channels, grad_check, grad_check_with_floor, softmax_rows, CoordSelection, GradCheckReport, GradTape, Matrix, Tensor4, Var};
use crate::train_eval::loss::total_loss_var;

/// Finite-difference step used by every check here.
pub const GRADCHECK_EPS: f64 = 1e-5;
pub const OPERATOR_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Denominator floor for the whole-model check. Attention projection
/// gradients there sit near 1e-9, where difference quotients of an O(1)
/// loss carry about 1e-10 of rounding noise.
pub const MODEL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn from_error(name: &str, measured: Result<f64>, tol: f64) -> Self {
        match measured {
            Ok(err) => CheckResult {
                name: name.into(),
                passed: err < tol,
                detail: format!("max error {err:.3e} (tolerance {tol:.0e})"),
            },
            Err(e) => CheckResult {
                name: name.into(),
                passed: false,
                detail: format!("error: {e}"),
            },
        }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn random(shape: [usize; 4], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
}

fn dct_round_trip(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (h, w) in [(8, 8), (17, 31), (64, 48)] {
        let x = random([1, 3, h, w], 0.0, 1.0, rng);
        worst = worst.max(idct2(&dct2(&x)).max_abs_diff(&x));
        for tau in [0.05, 0.1, 0.3] {
            let (hf, lf) = split_hf_lf(&x, &FrequencyMask::new(h, w, tau)?)?;
            worst = worst.max(hf.add(&lf)?.max_abs_diff(&x));
        }
    }
    Ok(worst)
}

fn softmax_rows_sum(rng: &mut ChaCha8Rng) -> Result<f64> {
    let m = random([1, 1, 12, 40], -20.0, 20.0, rng);
    let s = softmax_rows(&Matrix::from_tensor(&m)?)?;
    let mut worst: f64 = 0.0;
    for r in s.row_sums() {
        worst = worst.max((r - 1.0).abs());
    }
    let a = Matrix::from_tensor(&random([1, 1, 4, 64], -1.0, 1.0, rng))?;
    let p = Matrix::from_tensor(&random([1, 1, 4, 16], -1.0, 1.0, rng))?;
    let sw = stripe_weights(&a, &p, SCALES[0])?;
    for r in sw.sx.row_sums().into_iter().chain(sw.sy.row_sums()) {
        worst = worst.max((r - 1.0).abs());
    }
    Ok(worst)
}

fn gff_dirac(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut ps = ParamSet::<f64>::new();
    let gff = GffParams::new(&mut ps, rng, "gff", 8)?;
    gff.set_dirac(&mut ps);
    let i1 = random([2, 8, 8, 8], -1.0, 1.0, rng);
    let i2 = random([2, 8, 8, 8], -1.0, 1.0, rng);
    let s = i1.add(&i2)?;
    let c = s.chunk(4)?;
    let p2 = c[0].add(&c[1])?;
    let p3 = p2.add(&c[2])?;
    let p4 = p3.add(&c[3])?;
    let want = concat_channels(&[&c[0], &p2, &p3, &p4])?.add(&s)?;
    Ok(gff.apply(&ps, &i1, &i2)?.max_abs_diff(&want))
}

fn mssa_zero(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut ps = ParamSet::<f64>::new();
    let m = MssaParams::new(&mut ps, rng, "mssa", 16)?;
    for v in ps.values_mut() {
        *v = v.map(|x| x + 0.3);
    }
    let y = m.apply(&ps, &Tensor4::zeros([1, 16, 16, 16]))?;
    Ok(y.max_abs())
}

/// The invariant groups, in a fixed order.
pub fn run_selftest(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![
        CheckResult::from_error("dct round trip", dct_round_trip(&mut rng), 1e-9),
        CheckResult::from_error("softmax rows", softmax_rows_sum(&mut rng), 1e-8),
        CheckResult::from_error("gff dirac oracle", gff_dirac(&mut rng), 1e-12),
        CheckResult::from_error("mssa zero fixed point", mssa_zero(&mut rng), 1e-12),
    ];
    let grad = operator_gradchecks(seed).map(|rs| rs.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max));
    out.push(CheckResult::from_error("gradcheck", grad, OPERATOR_TOLERANCE));
    out
}

type Objective = Box<dyn Fn(&mut GradTape<f64>, &[Var]) -> Result<Var>>;

/// Reduce `y` to a scalar with a fixed random weighting, so every output
/// coordinate contributes a distinct gradient.
fn probe_sum(t: &mut GradTape<f64>, y: Var, probe: &Tensor4<f64>) -> Result<Var> {
    let p = t.constant(probe.clone())?;
    let m = t.mul(y, p)?;
    t.sum(m)
}

fn unary(out_shape: [usize; 4], seed: u64, f: fn(&mut GradTape<f64>, Var) -> Result<Var>) -> Objective {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = random(out_shape, -1.0, 1.0, &mut rng);
    Box::new(move |t, v| {
        let y = f(t, v[0])?;
        probe_sum(t, y, &probe)
    })
}

fn binary(out_shape: [usize; 4], seed: u64, f: fn(&mut GradTape<f64>, Var, Var) -> Result<Var>) -> Objective {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = random(out_shape, -1.0, 1.0, &mut rng);
    Box::new(move |t, v| {
        let y = f(t, v[0], v[1])?;
        probe_sum(t, y, &probe)
    })
}

/// Per-operator gradient checks in f64: every tape operator, then GFF and
/// MSSA as composite modules. Returns the report of each.
pub fn operator_gradchecks(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = [2, 3, 6, 6];
    let mut cases: Vec<(&'static str, Vec<Tensor4<f64>>, Objective)> = Vec::new();
    let mut r = |shape, lo, hi| random(shape, lo, hi, &mut rng);
    let x = r(s, -1.0, 1.0);
    let y = r(s, -1.0, 1.0);
    cases.push(("add", vec![x.clone(), y.clone()], binary(s, 1, |t, a, b| t.add(a, b))));
    cases.push(("sub", vec![x.clone(), y.clone()], binary(s, 2, |t, a, b| t.sub(a, b))));
    cases.push(("mul", vec![x.clone(), y.clone()], binary(s, 3, |t, a, b| t.mul(a, b))));
    cases.push(("scale", vec![x.clone()], unary(s, 4, |t, a| t.scale(a, -1.7))));
    let conv_probe = r([2, 4, 6, 6], -1.0, 1.0);
    cases.push((
        "conv2d 3x3 reflect",
        vec![x.clone(), r([4, 3, 3, 3], -0.5, 0.5), r([1, 4, 1, 1], -0.5, 0.5)],
        Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 1, Padding::SameReflect, 1)?;
            probe_sum(t, y, &conv_probe)
        }),
    ));
    let grouped_probe = r([2, 6, 3, 3], -1.0, 1.0);
    let gx = r([2, 6, 6, 6], -1.0, 1.0);
    cases.push((
        "conv2d stride 2 grouped",
        vec![gx.clone(), r([6, 2, 3, 3], -0.5, 0.5)],
        Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], None, 2, Padding::SameReflect, 3)?;
            probe_sum(t, y, &grouped_probe)
        }),
    ));
    let valid_probe = r([2, 2, 2, 2], -1.0, 1.0);
    cases.push((
        "conv2d 5x5 valid",
        vec![x.clone(), r([2, 3, 5, 5], -0.5, 0.5)],
        Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], None, 1, Padding::Valid, 1)?;
            probe_sum(t, y, &valid_probe)
        }),
    ));
    cases.push(("avgpool2d", vec![x.clone()], unary([2, 3, 3, 3], 6, |t, a| t.avgpool2d(a, 2))));
    cases.push(("upsample2x", vec![x.clone()], unary([2, 3, 12, 12], 7, |t, a| t.upsample2x(a))));
    cases.push(("activation", vec![x.scale(3.0)], unary(s, 8, |t, a| t.activation(a))));
    let ln_probe = r(s, -1.0, 1.0);
    cases.push((
        "layer_norm",
        vec![x.clone(), r([1, 3, 1, 1], 0.5, 1.5), r([1, 3, 1, 1], -0.5, 0.5)],
        Box::new(move |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            probe_sum(t, y, &ln_probe)
        }),
    ));
    cases.push(("reshape", vec![x.clone()], unary([1, 1, 6, 36], 9, |t, a| t.reshape(a, [1, 1, 6, 36]))));
    cases.push((
        "chunk and concat",
        vec![r([2, 4, 3, 3], -1.0, 1.0)],
        unary([2, 5, 3, 3], 10, |t, a| {
            let parts = t.chunk(a, 2)?;
            let s1 = t.slice_channels(a, 1, 1)?;
            t.concat_channels(&[parts[1], s1, parts[0]])
        }),
    ));
    cases.push((
        "select and stack batch",
        vec![x.clone()],
        unary(s, 11, |t, a| {
            let b0 = t.select_batch(a, 0)?;
            let b1 = t.select_batch(a, 1)?;
            t.stack_batch(&[b1, b0])
        }),
    ));
    let m1 = r([1, 1, 5, 7], -1.0, 1.0);
    cases.push(("transpose", vec![m1.clone()], unary([1, 1, 7, 5], 12, |t, a| t.transpose(a))));
    let m2 = r([1, 1, 7, 4], -1.0, 1.0);
    cases.push(("matmul", vec![m1.clone(), m2.clone()], binary([1, 1, 5, 4], 13, |t, a, b| t.matmul(a, b))));
    cases.push(("matmul_wide", vec![m1.clone(), m2], binary([1, 1, 5, 4], 14, |t, a, b| t.matmul_wide(a, b))));
    cases.push(("softmax_rows", vec![m1.scale(3.0)], unary([1, 1, 5, 7], 15, |t, a| t.softmax_rows(a))));
    cases.push((
        "sum and mean",
        vec![x.clone()],
        Box::new(|t, v| {
            let sq = t.mul(v[0], v[0])?;
            let a = t.sum(sq)?;
            let b = t.mean(v[0])?;
            let b = t.scale(b, 5.0)?;
            t.add(a, b)
        }),
    ));
    // Keep values away from zero so |x| stays smooth under the probe step.
    let away = x.map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 });
    cases.push(("abs", vec![away], unary(s, 16, |t, a| t.abs(a))));
    cases.push(("fft2", vec![x.clone()], unary([2, 6, 6, 6], 17, |t, a| t.fft2(a))));
    cases.push((
        "l1",
        vec![x.clone(), x.map(|v| v + 0.5)],
        Box::new(|t, v| t.l1(v[0], v[1])),
    ));

    let mut gps = ParamSet::<f64>::new();
    let gff = GffParams::new(&mut gps, &mut rng, "gff", 4)?;
    let (g1, g2, gprobe) = (
        random([1, 4, 8, 8], -1.0, 1.0, &mut rng),
        random([1, 4, 8, 8], -1.0, 1.0, &mut rng),
        random([1, 4, 8, 8], -1.0, 1.0, &mut rng),
    );
    let gn = gps.len();
    let mut ginputs = gps.values().to_vec();
    ginputs.extend([g1, g2]);
    cases.push((
        "gff",
        ginputs,
        Box::new(move |t, v| {
            let bound = Bound::from_vars(v[..gn].to_vec());
            let y = gff.forward(t, &bound, v[gn], v[gn + 1])?;
            probe_sum(t, y, &gprobe)
        }),
    ));

    let mut mps = ParamSet::<f64>::new();
    let mssa = MssaParams::new(&mut mps, &mut rng, "mssa", 8)?;
    let (mx, mprobe) = (random([1, 8, 8, 8], -2.0, 2.0, &mut rng), random([1, 8, 8, 8], -1.0, 1.0, &mut rng));
    let mn = mps.len();
    let mut minputs = mps.values().to_vec();
    minputs.push(mx);
    cases.push((
        "mssa",
        minputs,
        Box::new(move |t, v| {
            let bound = Bound::from_vars(v[..mn].to_vec());
            let y = mssa.forward(t, &bound, v[mn])?;
            probe_sum(t, y, &mprobe)
        }),
    ));

    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, inputs, f))| {
            let coords = CoordSelection::Sample { per_input: 24, seed: seed ^ i as u64 };
            Ok((name, grad_check(f, &inputs, GRADCHECK_EPS, coords)?))
        })
        .collect()
}

/// Gradient check of the composite training loss through a whole model,
/// with respect to its parameters. The output heads are perturbed so no
/// parameter sits behind a zero layer, and the target is far from the
/// output so the L1 terms stay away from their kinks. Relative errors use
/// [`MODEL_FLOOR`] as the denominator floor.
pub fn model_gradcheck(config: &ModelConfig, size: usize, per_input: usize, seed: u64) -> Result<GradCheckReport> {
    let mut model = McmsModel::<f64>::init(config, seed)?;
    model.perturb_heads(seed.wrapping_add(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let b = random([1, 3, size, size], 0.0, 1.0, &mut rng);
    let target = b.add(&random([1, 3, size, size], 0.5, 1.0, &mut rng))?;
    let mask = model.mask(size, size)?;
    let n = model.params.len();
    let f = |t: &mut GradTape<f64>, v: &[Var]| {
        let bound = Bound::from_vars(v[..n].to_vec());
        let bv = t.constant(b.clone())?;
        let out = model.forward_var(t, &bound, bv, &mask)?;
        Ok(total_loss_var(t, &out, &target, &mask)?.l_total)
    };
    let coords = CoordSelection::Sample { per_input, seed };
    grad_check_with_floor(f, model.params.values(), GRADCHECK_EPS, coords, MODEL_FLOOR)
}
