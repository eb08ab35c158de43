//! Seeded mini-batch training over image pairs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blur_synth::ImagePair;
use crate::error::{McmsError, Result};
use crate::net::{McmsModel, SIZE_MULTIPLE};
use crate::tensor::{GradTape, Real, Tensor4};
use crate::train_eval::adam::{adam_step, TrainState};
use crate::train_eval::loss::{total_loss_var, LossBreakdown};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub crop: usize,
    pub seed: u64,
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch: 8,
            steps: 1000,
            crop: 256,
            seed: 0,
            hflip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| Err(McmsError::Config { key: key.into(), reason });
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("{} must be positive", self.lr));
        }
        if self.batch == 0 {
            return bad("batch", "must be at least 1".into());
        }
        if self.steps == 0 {
            return bad("steps", "must be at least 1".into());
        }
        if self.crop == 0 || self.crop % SIZE_MULTIPLE != 0 {
            return bad("crop", format!("{} is not a positive multiple of {SIZE_MULTIPLE}", self.crop));
        }
        Ok(())
    }
}

/// Square window at `(y0, x0)`, optionally mirrored left-right.
pub fn crop_flip<T: Real>(x: &Tensor4<T>, y0: usize, x0: usize, size: usize, flip: bool) -> Result<Tensor4<T>> {
    if y0 + size > x.h() || x0 + size > x.w() {
        return Err(McmsError::shape(
            "crop",
            format!("{size}x{size} at ({y0}, {x0}) exceeds {}x{}", x.h(), x.w()),
        ));
    }
    Ok(Tensor4::from_fn([x.n(), x.c(), size, size], |n, c, y, xx| {
        let sx = if flip { size - 1 - xx } else { xx };
        x.at(n, c, y0 + y, x0 + sx)
    }))
}

/// One forward/backward/update on a batch. Returns the batch loss before the
/// update.
pub fn train_step<T: Real>(model: &mut McmsModel<T>, state: &mut TrainState<T>, blurry: &Tensor4<T>, sharp: &Tensor4<T>) -> Result<LossBreakdown> {
    let mask = model.mask(blurry.h(), blurry.w())?;
    let mut tape = GradTape::new();
    let bound = model.params.bind(&mut tape)?;
    let b = tape.constant(blurry.clone())?;
    let out = model.forward_var(&mut tape, &bound, b, &mask)?;
    let loss = total_loss_var(&mut tape, &out, sharp, &mask)?;
    let breakdown = loss.read(&tape);
    let grads = tape.backward(loss.l_total)?;
    let grads: Vec<_> = bound.vars().iter().map(|&v| grads.wrt(v)).collect();
    drop(tape);
    adam_step(state, &mut model.params, &grads)?;
    state.loss_history.push(breakdown);
    Ok(breakdown)
}

/// One shuffled pass over `pairs`, stopping early once `cfg.steps` updates
/// have been made in total. Returns the mean loss of the steps taken.
pub fn train_epoch<T: Real>(model: &mut McmsModel<T>, pairs: &[ImagePair<T>], state: &mut TrainState<T>, cfg: &TrainConfig) -> Result<LossBreakdown> {
    if pairs.is_empty() {
        return Err(McmsError::Dataset("no training pairs".into()));
    }
    cfg.validate()?;
    for p in pairs {
        if p.blurry.h() < cfg.crop || p.blurry.w() < cfg.crop {
            return Err(McmsError::Dataset(format!(
                "{}: {}x{} is smaller than crop {}",
                p.id,
                p.blurry.h(),
                p.blurry.w(),
                cfg.crop
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(state.epoch as u64);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    let mut losses = Vec::new();
    for chunk in order.chunks(cfg.batch) {
        if state.step >= cfg.steps {
            break;
        }
        let mut blurry = Vec::with_capacity(chunk.len());
        let mut sharp = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let p = &pairs[i];
            let y0 = rng.random_range(0..=p.blurry.h() - cfg.crop);
            let x0 = rng.random_range(0..=p.blurry.w() - cfg.crop);
            let flip = cfg.hflip && rng.random_bool(0.5);
            blurry.push(crop_flip(&p.blurry, y0, x0, cfg.crop, flip)?);
            sharp.push(crop_flip(&p.sharp, y0, x0, cfg.crop, flip)?);
        }
        let b = Tensor4::stack_batch(&blurry.iter().collect::<Vec<_>>())?;
        let s = Tensor4::stack_batch(&sharp.iter().collect::<Vec<_>>())?;
        losses.push(train_step(model, state, &b, &s)?);
    }
    state.epoch += 1;
    Ok(LossBreakdown::mean(&losses))
}

/// Epoch means of a full run.
#[derive(Clone, Debug)]
pub struct TrainReport<T = f32> {
    pub epochs: Vec<LossBreakdown>,
    pub state: TrainState<T>,
}

/// Train until `cfg.steps` updates, calling `on_epoch` after every epoch.
pub fn train<T: Real>(
    model: &mut McmsModel<T>,
    pairs: &[ImagePair<T>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainState<T>, &LossBreakdown),
) -> Result<TrainReport<T>> {
    cfg.validate()?;
    let mut state = TrainState::new(&model.params, cfg.lr);
    let mut epochs = Vec::new();
    while state.step < cfg.steps {
        let l = train_epoch(model, pairs, &mut state, cfg)?;
        on_epoch(&state, &l);
        epochs.push(l);
    }
    Ok(TrainReport { epochs, state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blur_synth::{motion_kernel, procedural_scene, synthesize_blur};
    use crate::net::ModelConfig;
    use crate::train_eval::loss::total_loss;

    fn pairs(n: usize, size: usize) -> Vec<ImagePair> {
        let k = motion_kernel(5, 0.0).unwrap();
        (0..n)
            .map(|i| {
                let sharp = procedural_scene(size, size, i as u64);
                ImagePair {
                    id: format!("p{i}"),
                    blurry: synthesize_blur(&sharp, &k, 0.01, i as u64).unwrap(),
                    sharp,
                }
            })
            .collect()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            batch: 2,
            steps: 3,
            crop: 32,
            seed: 4,
            hflip: true,
        }
    }

    #[test]
    fn crop_and_flip() {
        let x = Tensor4::<f32>::from_fn([1, 1, 4, 4], |_, _, y, x| (y * 4 + x) as f32);
        let c = crop_flip(&x, 1, 2, 2, false).unwrap();
        assert_eq!(c.data(), &[6.0, 7.0, 10.0, 11.0]);
        let f = crop_flip(&x, 1, 2, 2, true).unwrap();
        assert_eq!(f.data(), &[7.0, 6.0, 11.0, 10.0]);
        assert!(crop_flip(&x, 3, 0, 2, false).is_err());
    }

    #[test]
    fn validation() {
        let mut c = small_cfg();
        c.crop = 48;
        assert!(matches!(c.validate(), Err(McmsError::Config { key, .. }) if key == "crop"));
        let model = McmsModel::<f32>::init(&ModelConfig::toy(), 0).unwrap();
        let mut m = model.clone();
        let mut st = TrainState::new(&model.params, 1e-3);
        assert!(train_epoch(&mut m, &[], &mut st, &small_cfg()).is_err());
        let big = TrainConfig { crop: 64, ..small_cfg() };
        assert!(train_epoch(&mut m, &pairs(1, 32), &mut st, &big).is_err());
    }

    #[test]
    fn first_epoch_loss_is_the_blurry_input_loss() {
        let ps = pairs(1, 32);
        let mut model = McmsModel::<f32>::init(&ModelConfig::toy(), 1).unwrap();
        let mask = model.mask(32, 32).unwrap();
        let want = total_loss(&model.forward(&ps[0].blurry).unwrap(), &ps[0].sharp, &mask).unwrap();
        let cfg = TrainConfig { batch: 1, steps: 1, hflip: false, ..small_cfg() };
        let mut st = TrainState::new(&model.params, cfg.lr);
        let got = train_epoch(&mut model, &ps, &mut st, &cfg).unwrap();
        assert!((got.l_total - want.l_total).abs() < 1e-6 * want.l_total.max(1.0));
    }

    #[test]
    fn small_step_decreases_loss() {
        // f64 keeps the sign-like first Adam step inside the linear regime.
        let p = &pairs(1, 32)[0];
        let (blurry, sharp) = (p.blurry.cast::<f64>(), p.sharp.cast::<f64>());
        let mut model = McmsModel::<f64>::init(&ModelConfig::toy(), 2).unwrap();
        let mut st = TrainState::new(&model.params, 1e-6);
        let mask = model.mask(32, 32).unwrap();
        let before = total_loss(&model.forward(&blurry).unwrap(), &sharp, &mask).unwrap();
        let reported = train_step(&mut model, &mut st, &blurry, &sharp).unwrap();
        let after = total_loss(&model.forward(&blurry).unwrap(), &sharp, &mask).unwrap();
        assert_eq!(reported, before);
        assert!(after.l_total < before.l_total, "{before:?} -> {after:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let ps = pairs(3, 32);
        let run = || {
            let mut model = McmsModel::<f32>::init(&ModelConfig::toy(), 3).unwrap();
            let report = train(&mut model, &ps, &small_cfg(), |_, _| {}).unwrap();
            (model.checksum(), report.state.loss_history)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(la.len(), 3);
    }

    #[test]
    fn shuffle_order_is_seeded() {
        let order = |seed: u64, epoch: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(epoch);
            let mut o: Vec<usize> = (0..16).collect();
            o.shuffle(&mut rng);
            o
        };
        assert_eq!(order(5, 0), order(5, 0));
        assert_ne!(order(5, 0), order(5, 1));
        assert_ne!(order(5, 0), order(6, 0));
    }
}
