//! The three-stage network: HF branch, LF branch, and a fusing encoder-decoder
//! over the blurry input.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{McmsError, Result};
use crate::freq::{split_hf_lf, FrequencyMask, DEFAULT_TAU};
use crate::gff::GffParams;
use crate::layers::{Bound, Conv, LayerNorm, ParamSet};
use crate::mssa::MssaParams;
use crate::tensor::{GradTape, Real, Tensor4, Var};

/// Inputs must have height and width divisible by this.
pub const SIZE_MULTIPLE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub base_width: usize,
    pub hf_blocks: usize,
    pub lf_blocks: usize,
    pub stage3_blocks: usize,
    pub use_mssa: bool,
    pub use_gff: bool,
    /// Add the E1 and E2 outputs to the decoder input at matching resolution.
    pub stage3_skips: bool,
    /// Set from the `freq.tau` key of a run config, not the model section.
    #[serde(skip)]
    pub freq_tau: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_width: 32,
            hf_blocks: 3,
            lf_blocks: 3,
            stage3_blocks: 28,
            use_mssa: true,
            use_gff: true,
            stage3_skips: true,
            freq_tau: DEFAULT_TAU,
        }
    }
}

impl ModelConfig {
    /// Small configuration used for CPU training runs and tests.
    pub fn toy() -> Self {
        ModelConfig {
            base_width: 8,
            stage3_blocks: 4,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &'static str, reason: String| Err(McmsError::Config { key: key.into(), reason });
        if self.base_width == 0 || self.base_width % 8 != 0 {
            return bad("base_width", format!("{} is not a positive multiple of 8", self.base_width));
        }
        for (key, v) in [
            ("hf_blocks", self.hf_blocks),
            ("lf_blocks", self.lf_blocks),
            ("stage3_blocks", self.stage3_blocks),
        ] {
            if v == 0 {
                return bad(key, "must be at least 1".into());
            }
        }
        if !(0.0..=2.0).contains(&self.freq_tau) {
            return bad("freq_tau", format!("{} outside [0, 2]", self.freq_tau));
        }
        Ok(())
    }

    /// Blocks in the three stage-3 encoder levels; the remainder goes last.
    pub fn stage3_split(&self) -> [usize; 3] {
        let q = self.stage3_blocks / 3;
        [q, q, self.stage3_blocks - 2 * q]
    }
}

/// Norm, pointwise expand to 2C, depthwise 3x3, gate `a * act(b)`, pointwise
/// back to C, plus the input.
#[derive(Clone, Debug)]
pub struct Block {
    pub channels: usize,
    pub norm: LayerNorm,
    pub expand: Conv,
    pub depthwise: Conv,
    pub contract: Conv,
}

impl Block {
    pub fn new<T: Real>(params: &mut ParamSet<T>, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Self {
        let c = channels;
        Block {
            channels,
            norm: LayerNorm::new(params, &format!("{name}.norm"), c),
            expand: Conv::new(params, rng, &format!("{name}.expand"), c, 2 * c, 1, 1, 1),
            depthwise: Conv::new(params, rng, &format!("{name}.depthwise"), 2 * c, 2 * c, 3, 1, 2 * c),
            contract: Conv::new(params, rng, &format!("{name}.contract"), c, c, 1, 1, 1),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut GradTape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let c = tape.shape(x)[1];
        if c != self.channels {
            return Err(McmsError::shape("block", format!("{c} channels, expected {}", self.channels)));
        }
        let h = self.norm.forward(tape, bound, x)?;
        let h = self.expand.forward(tape, bound, h)?;
        let h = self.depthwise.forward(tape, bound, h)?;
        let halves = tape.chunk(h, 2)?;
        let gate = tape.activation(halves[1])?;
        let h = tape.mul(halves[0], gate)?;
        let h = self.contract.forward(tape, bound, h)?;
        tape.add(x, h)
    }
}

fn run_blocks<T: Real>(blocks: &[Block], tape: &mut GradTape<T>, bound: &Bound, mut x: Var) -> Result<Var> {
    for b in blocks {
        x = b.forward(tape, bound, x)?;
    }
    Ok(x)
}

fn make_blocks<T: Real>(params: &mut ParamSet<T>, rng: &mut ChaCha8Rng, name: &str, c: usize, n: usize) -> Vec<Block> {
    (0..n).map(|i| Block::new(params, rng, &format!("{name}.{i}"), c)).collect()
}

/// One frequency branch at full resolution.
#[derive(Clone, Debug)]
pub struct Branch {
    pub embed: Conv,
    pub encoder: Vec<Block>,
    pub attention: Option<MssaParams>,
    pub decoder: Vec<Block>,
    pub head: Conv,
}

/// Tape values produced by a branch.
#[derive(Clone, Copy, Debug)]
pub struct BranchVars {
    pub restored: Var,
    pub f_e: Var,
    pub f_d: Var,
}

impl Branch {
    fn new<T: Real>(params: &mut ParamSet<T>, rng: &mut ChaCha8Rng, name: &str, width: usize, blocks: usize, mssa: bool) -> Result<Self> {
        let embed = Conv::new(params, rng, &format!("{name}.embed"), 3, width, 3, 1, 1);
        let encoder = make_blocks(params, rng, &format!("{name}.enc"), width, blocks);
        let attention = if mssa {
            Some(MssaParams::new(params, rng, &format!("{name}.mssa"), width)?)
        } else {
            None
        };
        let decoder = make_blocks(params, rng, &format!("{name}.dec"), width, blocks);
        let head = Conv::zeroed(params, &format!("{name}.head"), width, 3, 3);
        Ok(Branch {
            embed,
            encoder,
            attention,
            decoder,
            head,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut GradTape<T>, bound: &Bound, comp: Var) -> Result<BranchVars> {
        let c = tape.shape(comp)[1];
        if c != 3 {
            return Err(McmsError::shape("branch", format!("{c} input channels, expected 3")));
        }
        let x = self.embed.forward(tape, bound, comp)?;
        let mut f_e = run_blocks(&self.encoder, tape, bound, x)?;
        if let Some(att) = &self.attention {
            f_e = att.forward(tape, bound, f_e)?;
        }
        let f_d = run_blocks(&self.decoder, tape, bound, f_e)?;
        let residual = self.head.forward(tape, bound, f_d)?;
        let restored = tape.add(comp, residual)?;
        Ok(BranchVars { restored, f_e, f_d })
    }
}

/// The fusing encoder-decoder.
#[derive(Clone, Debug)]
pub struct Stage3 {
    pub embed_in: Conv,
    pub proj_fo: Conv,
    pub fusion: Option<GffParams>,
    pub e1: Vec<Block>,
    pub down1: Conv,
    pub e2: Vec<Block>,
    pub down2: Conv,
    pub e3: Vec<Block>,
    pub attention: Option<MssaParams>,
    pub reduce1: Conv,
    pub d1: Vec<Block>,
    pub reduce2: Conv,
    pub d2: Vec<Block>,
    pub head: Conv,
    pub skips: bool,
}

/// Encoder output of stage 3: `F_E` plus the E1 and E2 features.
#[derive(Clone, Copy, Debug)]
pub struct Stage3Encoded {
    pub f_e: Var,
    pub e1: Var,
    pub e2: Var,
}

impl Stage3 {
    fn new<T: Real>(params: &mut ParamSet<T>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Self> {
        let w = cfg.base_width;
        let [n1, n2, n3] = cfg.stage3_split();
        let embed_in = Conv::new(params, rng, "s3.embed_in", 3, w, 3, 1, 1);
        let proj_fo = Conv::new(params, rng, "s3.proj_fo", w, w, 3, 1, 1);
        let fusion = if cfg.use_gff {
            Some(GffParams::new(params, rng, "s3.gff", w)?)
        } else {
            None
        };
        let e1 = make_blocks(params, rng, "s3.e1", w, n1);
        let down1 = Conv::new(params, rng, "s3.down1", w, 2 * w, 3, 2, 1);
        let e2 = make_blocks(params, rng, "s3.e2", 2 * w, n2);
        let down2 = Conv::new(params, rng, "s3.down2", 2 * w, 4 * w, 3, 2, 1);
        let e3 = make_blocks(params, rng, "s3.e3", 4 * w, n3);
        let attention = if cfg.use_mssa {
            Some(MssaParams::new(params, rng, "s3.mssa", 5 * w)?)
        } else {
            None
        };
        let reduce1 = Conv::new(params, rng, "s3.reduce1", 5 * w, 2 * w, 1, 1, 1);
        let d1 = make_blocks(params, rng, "s3.d1", 2 * w, 1);
        let reduce2 = Conv::new(params, rng, "s3.reduce2", 2 * w, w, 1, 1, 1);
        let d2 = make_blocks(params, rng, "s3.d2", w, 1);
        let head = Conv::zeroed(params, "s3.head", w, 3, 3);
        Ok(Stage3 {
            embed_in,
            proj_fo,
            fusion,
            e1,
            down1,
            e2,
            down2,
            e3,
            attention,
            reduce1,
            d1,
            reduce2,
            d2,
            head,
            skips: cfg.stage3_skips,
        })
    }

    /// `F_E = [E3(E2(E1(I0))), avgpool4(f_lf_e + f_hf_e)]` with
    /// `I0 = G(embed(b), proj(f_hf_d + f_lf_d))`.
    pub fn fuse<T: Real>(&self, tape: &mut GradTape<T>, bound: &Bound, b: Var, branches: [&BranchVars; 2]) -> Result<Stage3Encoded> {
        let [hf, lf] = branches;
        let f_o = tape.add(hf.f_d, lf.f_d)?;
        let lifted_in = self.embed_in.forward(tape, bound, b)?;
        let lifted_fo = self.proj_fo.forward(tape, bound, f_o)?;
        let i0 = match &self.fusion {
            Some(g) => g.forward(tape, bound, lifted_in, lifted_fo)?,
            None => tape.add(lifted_in, lifted_fo)?,
        };
        let e1 = run_blocks(&self.e1, tape, bound, i0)?;
        let x = self.down1.forward(tape, bound, e1)?;
        let e2 = run_blocks(&self.e2, tape, bound, x)?;
        let x = self.down2.forward(tape, bound, e2)?;
        let x = run_blocks(&self.e3, tape, bound, x)?;
        let branch_sum = tape.add(lf.f_e, hf.f_e)?;
        let pooled = tape.avgpool2d(branch_sum, 4)?;
        let (sx, sp) = (tape.shape(x), tape.shape(pooled));
        if sx[2..] != sp[2..] {
            return Err(McmsError::shape("fuse_stage3", format!("{sx:?} vs {sp:?}")));
        }
        let f_e = tape.concat_channels(&[x, pooled])?;
        Ok(Stage3Encoded { f_e, e1, e2 })
    }

    pub fn decode<T: Real>(&self, tape: &mut GradTape<T>, bound: &Bound, b: Var, enc: &Stage3Encoded) -> Result<Var> {
        let mut x = enc.f_e;
        if let Some(att) = &self.attention {
            x = att.forward(tape, bound, x)?;
        }
        let x = self.reduce1.forward(tape, bound, x)?;
        let mut x = tape.upsample2x(x)?;
        if self.skips {
            x = tape.add(x, enc.e2)?;
        }
        let x = run_blocks(&self.d1, tape, bound, x)?;
        let x = self.reduce2.forward(tape, bound, x)?;
        let mut x = tape.upsample2x(x)?;
        if self.skips {
            x = tape.add(x, enc.e1)?;
        }
        let x = run_blocks(&self.d2, tape, bound, x)?;
        let residual = self.head.forward(tape, bound, x)?;
        tape.add(b, residual)
    }
}

/// Parameter layout of the whole network.
#[derive(Clone, Debug)]
pub struct McmsNet {
    pub hf_branch: Branch,
    pub lf_branch: Branch,
    pub stage3: Stage3,
}

/// Tape values of one forward pass. `target_hf` / `target_lf` are not set
/// here; see the loss module.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub restored: Var,
    pub restored_hf: Var,
    pub restored_lf: Var,
    pub f_e: Var,
}

/// Value-level restoration outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Restoration<T> {
    pub restored: Tensor4<T>,
    pub restored_hf: Tensor4<T>,
    pub restored_lf: Tensor4<T>,
}

#[derive(Clone, Debug)]
pub struct McmsModel<T = f32> {
    pub config: ModelConfig,
    pub net: McmsNet,
    pub params: ParamSet<T>,
}

/// Fresh model: fan-in uniform convs, zero biases, zero heads.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<McmsModel<f32>> {
    McmsModel::init(config, seed)
}

impl<T: Real> McmsModel<T> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let hf_branch = Branch::new(&mut params, &mut rng, "hf", config.base_width, config.hf_blocks, config.use_mssa)?;
        let lf_branch = Branch::new(&mut params, &mut rng, "lf", config.base_width, config.lf_blocks, config.use_mssa)?;
        let stage3 = Stage3::new(&mut params, &mut rng, config)?;
        Ok(McmsModel {
            config: config.clone(),
            net: McmsNet {
                hf_branch,
                lf_branch,
                stage3,
            },
            params,
        })
    }

    /// Replace the zero output heads with uniform values in `[-0.1, 0.1]`,
    /// so the network is no longer the identity. Used by gradient checks.
    pub fn perturb_heads(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = [&self.net.hf_branch.head, &self.net.lf_branch.head, &self.net.stage3.head];
        let ids: Vec<_> = heads.iter().flat_map(|h| [h.weight, h.bias]).collect();
        for id in ids {
            let t = self.params.get_mut(id);
            *t = Tensor4::from_fn(t.shape(), |_, _, _, _| T::of(rng.random_range(-0.1..0.1)));
        }
    }

    pub fn mask(&self, h: usize, w: usize) -> Result<FrequencyMask> {
        FrequencyMask::new(h, w, self.config.freq_tau)
    }

    pub fn cast<U: Real>(&self) -> McmsModel<U> {
        McmsModel {
            config: self.config.clone(),
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Record the full network. `b` is treated as data: the HF/LF split is
    /// computed from its value and carries no gradient back to it.
    pub fn forward_var(&self, tape: &mut GradTape<T>, bound: &Bound, b: Var, mask: &FrequencyMask) -> Result<ForwardVars> {
        let [_, c, h, w] = tape.shape(b);
        if c != 3 {
            return Err(McmsError::shape("mcms_forward", format!("{c} channels, expected 3")));
        }
        if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            return Err(McmsError::shape(
                "mcms_forward",
                format!("{h}x{w} not divisible by {SIZE_MULTIPLE}"),
            ));
        }
        let (hf, lf) = split_hf_lf(tape.value(b), mask)?;
        let hf = tape.constant(hf)?;
        let lf = tape.constant(lf)?;
        let hf_out = self.net.hf_branch.forward(tape, bound, hf)?;
        let lf_out = self.net.lf_branch.forward(tape, bound, lf)?;
        let enc = self.net.stage3.fuse(tape, bound, b, [&hf_out, &lf_out])?;
        let restored = self.net.stage3.decode(tape, bound, b, &enc)?;
        Ok(ForwardVars {
            restored,
            restored_hf: hf_out.restored,
            restored_lf: lf_out.restored,
            f_e: enc.f_e,
        })
    }

    /// Unclamped forward pass.
    pub fn forward(&self, b: &Tensor4<T>) -> Result<Restoration<T>> {
        let mask = self.mask(b.h(), b.w())?;
        let mut tape = GradTape::new();
        let bound = self.params.bind_frozen(&mut tape)?;
        let bv = tape.constant(b.clone())?;
        let out = self.forward_var(&mut tape, &bound, bv, &mask)?;
        Ok(Restoration {
            restored: tape.value(out.restored).clone(),
            restored_hf: tape.value(out.restored_hf).clone(),
            restored_lf: tape.value(out.restored_lf).clone(),
        })
    }

    /// Forward pass with the final image clamped to `[0, 1]`.
    pub fn restore(&self, b: &Tensor4<T>) -> Result<Tensor4<T>> {
        let out = self.forward(b)?.restored;
        Ok(out.map(|v| v.max(T::zero()).min(T::one())))
    }
}

/// Stage-3 fusion given branch features, value level.
pub fn fuse_stage3<T: Real>(
    model: &McmsModel<T>,
    i_in: &Tensor4<T>,
    f_hf_e: &Tensor4<T>,
    f_lf_e: &Tensor4<T>,
    f_hf_d: &Tensor4<T>,
    f_lf_d: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let mut tape = GradTape::new();
    let bound = model.params.bind_frozen(&mut tape)?;
    let b = tape.constant(i_in.clone())?;
    let mut c = |t: &Tensor4<T>| tape.constant(t.clone());
    let hf = BranchVars {
        restored: b,
        f_e: c(f_hf_e)?,
        f_d: c(f_hf_d)?,
    };
    let lf = BranchVars {
        restored: b,
        f_e: c(f_lf_e)?,
        f_d: c(f_lf_d)?,
    };
    let out = model.net.stage3.fuse(&mut tape, &bound, b, [&hf, &lf])?;
    Ok(tape.value(out.f_e).clone())
}

const MAGIC: &[u8; 4] = b"MCMS";
const FORMAT_VERSION: u32 = 1;

/// Serialize parameters: magic, version, then one record per tensor
/// (name length, name, rank, dims, little-endian f32 payload).
pub fn weights_to_bytes<T: Real>(params: &ParamSet<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + params.element_count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (name, v) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&4u32.to_le_bytes());
        for d in v.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in v.data() {
            out.extend_from_slice(&(x.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(McmsError::WeightFormat(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parse a weight file into a model built for `config`. Every tensor the
/// config expects must be present with the expected shape.
pub fn weights_from_bytes(bytes: &[u8], config: &ModelConfig) -> Result<McmsModel<f32>> {
    let mut model = McmsModel::<f32>::init(config, 0)?;
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(McmsError::WeightFormat("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(McmsError::WeightFormat(format!("unsupported version {version}")));
    }
    let mut seen = vec![false; model.params.len()];
    while r.pos < bytes.len() {
        let len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(len, "name")?.to_vec())
            .map_err(|_| McmsError::WeightFormat("tensor name is not UTF-8".into()))?;
        let rank = r.u32("rank")? as usize;
        if rank != 4 {
            return Err(McmsError::WeightFormat(format!("{name}: rank {rank}, expected 4")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32("dims")? as usize;
        }
        let id = model
            .params
            .find(&name)
            .ok_or_else(|| McmsError::WeightFormat(format!("unexpected tensor {name}")))?;
        let expected = model.params.get(id).shape();
        if dims != expected {
            return Err(McmsError::ShapeMismatch {
                name,
                expected: expected.to_vec(),
                found: dims.to_vec(),
            });
        }
        let count: usize = dims.iter().product();
        let payload = r.take(count * 4, &name)?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor4::new(dims, data)?;
        if !t.is_finite() {
            return Err(McmsError::WeightFormat(format!("{name} holds non-finite values")));
        }
        *model.params.get_mut(id) = t;
        seen[id.index()] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let id = model.params.ids().nth(i).expect("index in range");
        return Err(McmsError::WeightFormat(format!("missing tensor {}", model.params.name(id))));
    }
    Ok(model)
}

pub fn save_weights<T: Real>(model: &McmsModel<T>, path: &Path) -> Result<()> {
    let bytes = weights_to_bytes(&model.params);
    let mut f = fs::File::create(path).map_err(|e| McmsError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| McmsError::io(path, e))
}

pub fn load_weights(path: &Path, config: &ModelConfig) -> Result<McmsModel<f32>> {
    let bytes = fs::read(path).map_err(|e| McmsError::io(path, e))?;
    weights_from_bytes(&bytes, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, CoordSelection};

    fn random(shape: [usize; 4], seed: u64) -> Tensor4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn(shape, |_, _, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn stage3_split_examples() {
        let mut c = ModelConfig::default();
        assert_eq!(c.stage3_split(), [9, 9, 10]);
        c.stage3_blocks = 4;
        assert_eq!(c.stage3_split(), [1, 1, 2]);
    }

    #[test]
    fn config_validation_names_key() {
        let c = ModelConfig {
            base_width: 12,
            ..ModelConfig::toy()
        };
        match c.validate() {
            Err(McmsError::Config { key, .. }) => assert_eq!(key, "base_width"),
            other => panic!("{other:?}"),
        }
        assert!(ModelConfig {
            stage3_blocks: 0,
            ..ModelConfig::toy()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn zero_block_is_identity() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = Block::new(&mut ps, &mut rng, "b", 8);
        for v in ps.values_mut() {
            *v = Tensor4::zeros(v.shape());
        }
        let x = random([1, 8, 16, 16], 2);
        let mut tape = GradTape::new();
        let bound = ps.bind_frozen(&mut tape).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let y = block.forward(&mut tape, &bound, xv).unwrap();
        assert_eq!(tape.value(y), &x);
        let narrow = tape.constant(Tensor4::zeros([1, 4, 4, 4])).unwrap();
        assert!(block.forward(&mut tape, &bound, narrow).is_err());
    }

    #[test]
    fn block_gradients() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = Block::new(&mut ps, &mut rng, "b", 8);
        let x = random([1, 8, 6, 6], 4).scale(3.0);
        let probe = random([1, 8, 6, 6], 5);
        let n = ps.len();
        let mut inputs = ps.values().to_vec();
        inputs.push(x);
        let r = grad_check(
            |t, v| {
                let bound = Bound::from_vars(v[..n].to_vec());
                let y = block.forward(t, &bound, v[n])?;
                let p = t.constant(probe.clone())?;
                let m = t.mul(y, p)?;
                t.sum(m)
            },
            &inputs,
            1e-5,
            CoordSelection::Sample { per_input: 10, seed: 6 },
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn identity_at_init() {
        let model = McmsModel::<f64>::init(&ModelConfig::toy(), 7).unwrap();
        let b = random([1, 3, 32, 32], 8);
        let out = model.forward(&b).unwrap();
        let (hf, lf) = split_hf_lf(&b, &model.mask(32, 32).unwrap()).unwrap();
        assert_eq!(out.restored, b);
        assert_eq!(out.restored_hf, hf);
        assert_eq!(out.restored_lf, lf);
    }

    #[test]
    fn branch_shapes_and_fusion() {
        let cfg = ModelConfig::toy();
        let mut model = McmsModel::<f64>::init(&cfg, 9).unwrap();
        model.perturb_heads(1);
        let b = random([2, 3, 64, 64], 10);
        let mask = model.mask(64, 64).unwrap();
        let mut tape = GradTape::new();
        let bound = model.params.bind_frozen(&mut tape).unwrap();
        let bv = tape.constant(b.clone()).unwrap();
        let out = model.forward_var(&mut tape, &bound, bv, &mask).unwrap();
        assert_eq!(tape.shape(out.f_e), [2, 5 * 8, 16, 16]);
        for v in [out.restored, out.restored_hf, out.restored_lf] {
            assert_eq!(tape.shape(v), [2, 3, 64, 64]);
        }

        let feat = |s| random([2, 8, 64, 64], s);
        let (a, c, d, e) = (feat(11), feat(12), feat(13), feat(14));
        let f1 = fuse_stage3(&model, &b, &a, &c, &d, &e).unwrap();
        let f2 = fuse_stage3(&model, &b, &a, &c, &e, &d).unwrap();
        assert_eq!(f1.shape(), [2, 40, 16, 16]);
        assert!(f1.max_abs_diff(&f2) < 1e-12);
        assert!(fuse_stage3(&model, &b, &feat(1), &random([2, 8, 32, 32], 2), &d, &e).is_err());
    }

    #[test]
    fn fusion_of_zeros_is_zero() {
        let model = McmsModel::<f64>::init(&ModelConfig::toy(), 15).unwrap();
        let z3 = Tensor4::zeros([1, 3, 32, 32]);
        let z = Tensor4::zeros([1, 8, 32, 32]);
        assert_eq!(fuse_stage3(&model, &z3, &z, &z, &z, &z).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn rejects_bad_sizes() {
        let model = McmsModel::<f32>::init(&ModelConfig::toy(), 0).unwrap();
        assert!(model.forward(&Tensor4::zeros([1, 3, 48, 32])).is_err());
        assert!(model.forward(&Tensor4::zeros([1, 1, 32, 32])).is_err());
    }

    #[test]
    fn every_branch_parameter_gets_gradient() {
        let cfg = ModelConfig::toy();
        let mut model = McmsModel::<f64>::init(&cfg, 16).unwrap();
        model.perturb_heads(2);
        let b = random([1, 3, 32, 32], 17);
        let target = random([1, 3, 32, 32], 18);
        let mask = model.mask(32, 32).unwrap();
        let mut tape = GradTape::new();
        let bound = model.params.bind(&mut tape).unwrap();
        let bv = tape.constant(b).unwrap();
        let out = model.forward_var(&mut tape, &bound, bv, &mask).unwrap();
        let t = tape.constant(target).unwrap();
        let l1 = tape.l1(out.restored_hf, t).unwrap();
        let l2 = tape.l1(out.restored_lf, t).unwrap();
        let loss = tape.add(l1, l2).unwrap();
        let grads = tape.backward(loss).unwrap();
        for id in model.params.ids() {
            let name = model.params.name(id);
            if name.starts_with("hf.") || name.starts_with("lf.") {
                assert!(grads.wrt(bound.var(id)).max_abs() > 0.0, "{name} has zero gradient");
            }
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::toy();
        let a = init_params(&cfg, 5).unwrap();
        let b = init_params(&cfg, 5).unwrap();
        let c = init_params(&cfg, 6).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn parameter_counts_are_pinned() {
        let count = |cfg: &ModelConfig| init_params(cfg, 0).unwrap().params.element_count();
        let toy = ModelConfig::toy();
        // Hand tallies: a block at width c holds 3c^2 + 25c scalars.
        assert_eq!(count(&toy), 25_232);
        assert_eq!(count(&ModelConfig { use_gff: false, ..toy.clone() }), 24_304);
        assert_eq!(count(&ModelConfig { use_mssa: false, ..toy.clone() }), 25_009);
        assert_eq!(count(&ModelConfig::default()), 884_997);
        assert_eq!(count(&ModelConfig { stage3_skips: false, ..toy }), 25_232);
    }

    #[test]
    fn skips_change_the_trained_output_only() {
        let plain = ModelConfig {
            stage3_skips: false,
            ..ModelConfig::toy()
        };
        let x = Tensor4::<f32>::from_fn([1, 3, 32, 32], |_, c, y, x| ((c + y * x) % 7) as f32 / 7.0);
        let mut a = init_params(&ModelConfig::toy(), 4).unwrap();
        let mut b = init_params(&plain, 4).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.forward(&x).unwrap().restored, b.forward(&x).unwrap().restored);
        a.perturb_heads(1);
        b.perturb_heads(1);
        assert!(a.forward(&x).unwrap().restored.max_abs_diff(&b.forward(&x).unwrap().restored) > 1e-6);
    }

    #[test]
    fn weight_round_trip() {
        let cfg = ModelConfig::toy();
        let mut model = init_params(&cfg, 21).unwrap();
        model.perturb_heads(3);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        save_weights(&model, &p1).unwrap();
        let loaded = load_weights(&p1, &cfg).unwrap();
        assert_eq!(loaded.params, model.params);
        save_weights(&loaded, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());

        let bytes = fs::read(&p1).unwrap();
        assert!(matches!(
            weights_from_bytes(&bytes[..bytes.len() - 3], &cfg),
            Err(McmsError::WeightFormat(_))
        ));
        assert!(weights_from_bytes(b"MCMX\x01\0\0\0", &cfg).is_err());
        let wide = ModelConfig { base_width: 16, ..cfg };
        match weights_from_bytes(&bytes, &wide) {
            Err(McmsError::ShapeMismatch { name, .. }) => assert_eq!(name, "hf.embed.weight"),
            other => panic!("{other:?}"),
        }
    }
}
