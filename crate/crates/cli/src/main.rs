use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mcms_core::blur_synth::{build_manifest, write_procedural_scenes, BlurParams, DatasetManifest, DEFAULT_NOISE_SIGMA};
use mcms_core::config::{load_config, RunConfig, RESOLVED_CONFIG_FILE};
use mcms_core::freq::FrequencyMask;
use mcms_core::image_io::{load_png, save_png, save_split_pngs};
use mcms_core::net::{load_weights, save_weights, McmsModel, ModelConfig};
use mcms_core::selftest::{model_gradcheck, operator_gradchecks, run_selftest, MODEL_TOLERANCE, OPERATOR_TOLERANCE};
use mcms_core::train_eval::{deblur, evaluate, train};

const WEIGHTS_FILE: &str = "weights.bin";
const METRICS_FILE: &str = "metrics.csv";
const TRAIN_LOG_FILE: &str = "train_log.csv";

/// Blind motion deblurring with frequency-split branches and stripe attention.
#[derive(Parser, Debug)]
#[command(name = "mcms", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a blurred/sharp dataset with a manifest.
    Synth(SynthArgs),
    /// Split an image into high- and low-frequency PNGs.
    ///
    /// Writes `<stem>_hf.png` and `<stem>_lf.png`. The components are signed,
    /// so both files store `value * 0.5 + 0.5`; decode with `2 * pixel - 1`.
    /// LF is quantized first and HF holds the rest, so the two decoded
    /// images sum to the input within 1/255 per pixel.
    Decompose(DecomposeArgs),
    /// Train a model on a dataset built by `synth`.
    Train(TrainArgs),
    /// Restore one image with trained weights.
    Deblur(DeblurArgs),
    /// Score a model on a dataset and write a metrics CSV.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Run the built-in invariant checks.
    Selftest(SeedArg),
}

#[derive(Args, Debug)]
struct SeedArg {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Directory of sharp PNGs. Without it, procedural scenes are generated.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of procedural scenes.
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Side of procedural scenes in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Motion length in pixels.
    #[arg(long, default_value_t = 7)]
    length: usize,
    /// Motion angle in degrees; random per image when omitted.
    #[arg(long)]
    angle: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_NOISE_SIGMA)]
    sigma: f64,
}

#[derive(Args, Debug)]
struct DecomposeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = mcms_core::freq::DEFAULT_TAU)]
    tau: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Flags that override keys of the JSON config.
#[derive(Args, Debug)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    crop: Option<usize>,
    /// Drop the stripe attention modules.
    #[arg(long)]
    no_mssa: bool,
    /// Replace grouped feature fusion with a plain sum.
    #[arg(long)]
    no_gff: bool,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(t) = self.tau {
            cfg.freq.tau = t;
        }
        if let Some(s) = self.steps {
            cfg.train.steps = s;
        }
        if let Some(lr) = self.lr {
            cfg.train.lr = lr;
        }
        if let Some(b) = self.batch {
            cfg.train.batch = b;
        }
        if let Some(c) = self.crop {
            cfg.train.crop = c;
        }
        if self.no_mssa {
            cfg.model.use_mssa = false;
        }
        if self.no_gff {
            cfg.model.use_gff = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory (overrides `paths.data`).
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Output directory (overrides `paths.out_dir`).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Weights written by `train`. Without it a freshly initialized model
    /// is used, which returns its input unchanged.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Run config of the weights; defaults to the `resolved_config.json`
    /// next to them.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ModelArgs {
    fn load(&self) -> Result<McmsModel> {
        let sibling = self
            .weights
            .as_ref()
            .and_then(|w| w.parent().map(|d| d.join(RESOLVED_CONFIG_FILE)))
            .filter(|p| p.is_file());
        let cfg = match self.config.as_ref().or(sibling.as_ref()) {
            Some(p) => load_config(p)?,
            None => RunConfig::default(),
        };
        let model_cfg = cfg.model_config();
        Ok(match &self.weights {
            Some(w) => load_weights(w, &model_cfg)?,
            None => McmsModel::init(&model_cfg, self.seed)?,
        })
    }
}

#[derive(Args, Debug)]
struct DeblurArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Dataset directory or manifest file.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also check the whole toy model (takes a few minutes).
    #[arg(long)]
    full: bool,
}

fn stem(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .with_context(|| format!("{}: no file name", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn synth(a: &SynthArgs) -> Result<()> {
    let sharp_dir = match &a.input {
        Some(d) => d.clone(),
        None => {
            let d = a.out_dir.join("source");
            write_procedural_scenes(&d, a.count, a.size, a.size, a.seed)?;
            d
        }
    };
    let params = BlurParams {
        length: a.length,
        angle_deg: a.angle,
        noise_sigma: a.sigma,
    };
    let m = build_manifest(&sharp_dir, &a.out_dir, &params, a.seed)?;
    println!("wrote {} pairs to {}", m.entries.len(), a.out_dir.display());
    Ok(())
}

fn decompose(a: &DecomposeArgs) -> Result<()> {
    let x = load_png::<f64>(&a.input)?;
    let mask = FrequencyMask::new(x.h(), x.w(), a.tau)?;
    create_dir(&a.out_dir)?;
    let s = stem(&a.input)?;
    let hf = a.out_dir.join(format!("{s}_hf.png"));
    let lf = a.out_dir.join(format!("{s}_lf.png"));
    save_split_pngs(&x, &mask, &hf, &lf)?;
    println!("{}\n{}", hf.display(), lf.display());
    Ok(())
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = a.overrides.resolve()?;
    if let Some(d) = &a.input {
        cfg.paths.data = d.clone();
    }
    if let Some(o) = &a.out_dir {
        cfg.paths.out_dir = o.clone();
    }
    let out = cfg.paths.out_dir.clone();
    cfg.write_resolved(&out)?;
    let (manifest, root) = DatasetManifest::load(&cfg.paths.data)?;
    let pairs = manifest.load_pairs(&root)?;
    let mut model = McmsModel::init(&cfg.model_config(), cfg.train.seed)?;
    let mut log = String::from("epoch,step,l_total,l_hf,l_lf,l_o,l_msfr\n");
    train(&mut model, &pairs, &cfg.train, |st, l| {
        let line = format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            st.epoch, st.step, l.l_total, l.l_hf, l.l_lf, l.l_o, l.l_msfr
        );
        println!("{line}");
        log.push_str(&line);
        log.push('\n');
    })?;
    let log_path = out.join(TRAIN_LOG_FILE);
    fs::write(&log_path, log).with_context(|| format!("writing {}", log_path.display()))?;
    save_weights(&model, &out.join(WEIGHTS_FILE))?;
    println!("checksum {}", model.checksum());
    Ok(())
}

fn run_deblur(a: &DeblurArgs) -> Result<()> {
    let model = a.model.load()?;
    let x = load_png::<f32>(&a.input)?;
    let y = deblur(&model, &x)?;
    create_dir(&a.out_dir)?;
    let path = a.out_dir.join(format!("{}_deblurred.png", stem(&a.input)?));
    save_png(&path, &y)?;
    println!("{}", path.display());
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let model = a.model.load()?;
    let (manifest, root) = DatasetManifest::load(&a.input)?;
    let pairs = manifest.load_pairs(&root)?;
    let report = evaluate(&model, &pairs)?;
    create_dir(&a.out_dir)?;
    let path = a.out_dir.join(METRICS_FILE);
    let csv = report.to_csv();
    fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
    print!("{csv}");
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let mut ok = true;
    for (name, r) in operator_gradchecks(a.seed)? {
        let pass = r.max_rel_error < OPERATOR_TOLERANCE;
        ok &= pass;
        println!("{} {name}: {:.3e} over {} coordinates", if pass { "PASS" } else { "FAIL" }, r.max_rel_error, r.checked);
    }
    if a.full {
        let r = model_gradcheck(&ModelConfig::toy(), 32, 3, a.seed)?;
        let pass = r.max_rel_error < MODEL_TOLERANCE;
        ok &= pass;
        println!("{} toy model: {:.3e} over {} coordinates", if pass { "PASS" } else { "FAIL" }, r.max_rel_error, r.checked);
    }
    Ok(ok)
}

fn selftest(a: &SeedArg) -> bool {
    let results = run_selftest(a.seed);
    for r in &results {
        println!("{}", r.line());
    }
    results.iter().all(|r| r.passed)
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("MCMS_THREADS") else { return Ok(()) };
    let n: usize = v.parse().with_context(|| format!("MCMS_THREADS={v} is not a count"))?;
    if n == 0 {
        bail!("MCMS_THREADS must be at least 1");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    init_threads()?;
    match &cli.command {
        Command::Synth(a) => synth(a)?,
        Command::Decompose(a) => decompose(a)?,
        Command::Train(a) => run_train(a)?,
        Command::Deblur(a) => run_deblur(a)?,
        Command::Eval(a) => run_eval(a)?,
        Command::Gradcheck(a) => return gradcheck(a),
        Command::Selftest(a) => return Ok(selftest(a)),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
