//! Synthetic blurry/sharp pairs: `b = I (*) k + n` with linear motion kernels
//! and Gaussian noise, plus the on-disk manifest of a generated dataset.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{McmsError, Result};
use crate::image_io::{load_png, save_png};
use crate::tensor::ops::{conv2d_grouped, Padding};
use crate::tensor::{Real, Tensor4};

pub const DEFAULT_NOISE_SIGMA: f64 = 0.01;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Square, odd-sized, nonnegative kernel summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    size: usize,
    taps: Vec<f64>,
}

impl BlurKernel {
    pub fn size(&self) -> usize {
        self.size
    }

    /// Row-major taps.
    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.taps[y * self.size + x]
    }
}

/// Rasterize a centred segment of `length` pixels at `angle_deg` by dense
/// sampling; each pixel's tap is the fraction of the segment inside its cell.
pub fn motion_kernel(length: usize, angle_deg: f64) -> Result<BlurKernel> {
    if length == 0 {
        return Err(McmsError::InvalidArgument("motion kernel length must be at least 1".into()));
    }
    if !angle_deg.is_finite() {
        return Err(McmsError::InvalidArgument("motion kernel angle must be finite".into()));
    }
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let half = length as f64 / 2.0;
    let samples = 64 * length;
    let points: Vec<(i64, i64)> = (0..samples)
        .map(|i| {
            let t = -half + (i as f64 + 0.5) * length as f64 / samples as f64;
            // Image rows grow downwards; positive angles tilt up.
            ((t * cos).round() as i64, (-t * sin).round() as i64)
        })
        .collect();
    let radius = points.iter().map(|&(x, y)| x.abs().max(y.abs())).max().unwrap_or(0) as usize;
    let size = 2 * radius + 1;
    let mut counts = vec![0usize; size * size];
    for (x, y) in points {
        let (cx, cy) = ((x + radius as i64) as usize, (y + radius as i64) as usize);
        counts[cy * size + cx] += 1;
    }
    let taps = counts.iter().map(|&c| c as f64 / samples as f64).collect();
    Ok(BlurKernel { size, taps })
}

/// Blur each channel with `k` (reflect padding), add `N(0, sigma^2)` noise from
/// a stream seeded by `seed`, then clamp to `[0, 1]`.
pub fn synthesize_blur<T: Real>(sharp: &Tensor4<T>, k: &BlurKernel, noise_sigma: f64, seed: u64) -> Result<Tensor4<T>> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(McmsError::InvalidArgument(format!("noise sigma {noise_sigma} must be >= 0")));
    }
    let c = sharp.c();
    let s = k.size();
    // Convolution flips the kernel; the value API computes correlation.
    let weight = Tensor4::from_fn([c, 1, s, s], |_, _, y, x| T::of(k.at(s - 1 - y, s - 1 - x)));
    let mut out = conv2d_grouped(sharp, &weight, None, 1, Padding::SameReflect, c)?;
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).expect("sigma validated");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in out.data_mut() {
            *v = *v + T::of(normal.sample(&mut rng));
        }
    }
    Ok(out.map(|v| v.max(T::zero()).min(T::one())))
}

/// Random piecewise-smooth RGB scene: a colour gradient with rectangles,
/// discs and a stripe patch, values in `[0, 1]`.
pub fn procedural_scene(h: usize, w: usize, seed: u64) -> Tensor4<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let colour = |rng: &mut ChaCha8Rng| [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
    let (c0, c1) = (colour(&mut rng), colour(&mut rng));
    let mut img = Tensor4::from_fn([1, 3, h, w], |_, c, y, x| {
        let t = (x + y) as f32 / (h + w) as f32;
        0.2 + 0.6 * (c0[c] * (1.0 - t) + c1[c] * t)
    });
    let (hf, wf) = (h as f32, w as f32);
    for _ in 0..rng.random_range(3..7) {
        let col = colour(&mut rng);
        let (x0, y0) = (rng.random_range(0.0..wf), rng.random_range(0.0..hf));
        let (rw, rh) = (rng.random_range(0.1..0.5) * wf, rng.random_range(0.1..0.5) * hf);
        if rng.random_bool(0.5) {
            paint(&mut img, col, |x, y| x >= x0 && x < x0 + rw && y >= y0 && y < y0 + rh);
        } else {
            let r = rw.min(rh) / 2.0;
            paint(&mut img, col, |x, y| (x - x0).powi(2) + (y - y0).powi(2) <= r * r);
        }
    }
    let col = colour(&mut rng);
    let period = rng.random_range(3.0..8.0f32);
    let (sx, sy) = (rng.random_range(0.0..wf / 2.0), rng.random_range(0.0..hf / 2.0));
    let vertical = rng.random_bool(0.5);
    paint(&mut img, col, |x, y| {
        let inside = x >= sx && x < sx + wf / 3.0 && y >= sy && y < sy + hf / 3.0;
        let phase = if vertical { x } else { y };
        inside && (phase / period).floor() as i64 % 2 == 0
    });
    img
}

fn paint(img: &mut Tensor4<f32>, colour: [f32; 3], inside: impl Fn(f32, f32) -> bool) {
    let (h, w) = (img.h(), img.w());
    for y in 0..h {
        for x in 0..w {
            if inside(x as f32 + 0.5, y as f32 + 0.5) {
                for (c, &v) in colour.iter().enumerate() {
                    img.set(0, c, y, x, v);
                }
            }
        }
    }
}

/// Write `count` procedural scenes as `scene_XXX.png`.
pub fn write_procedural_scenes(dir: &Path, count: usize, h: usize, w: usize, seed: u64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| McmsError::io(dir, e))?;
    (0..count)
        .map(|i| {
            let path = dir.join(format!("scene_{i:03}.png"));
            save_png(&path, &procedural_scene(h, w, seed ^ i as u64))?;
            Ok(path)
        })
        .collect()
}

/// Kernel and noise settings for a generated dataset. `angle_deg = None`
/// draws a uniform angle per image from that image's seed.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurParams {
    pub length: usize,
    pub angle_deg: Option<f64>,
    pub noise_sigma: f64,
}

impl Default for BlurParams {
    fn default() -> Self {
        BlurParams {
            length: 7,
            angle_deg: None,
            noise_sigma: DEFAULT_NOISE_SIGMA,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub blurry: String,
    pub sharp: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    pub noise_sigma: f64,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair<T = f32> {
    pub id: String,
    pub blurry: Tensor4<T>,
    pub sharp: Tensor4<T>,
}

impl DatasetManifest {
    /// Read `manifest.json` (or the given file) and check ids are unique.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).map_err(|e| McmsError::io(&file, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|source| McmsError::Json {
            path: file.clone(),
            source,
        })?;
        let mut ids: Vec<&str> = manifest.entries.iter().map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(McmsError::Dataset(format!("{}: duplicate ids", file.display())));
        }
        if manifest.entries.is_empty() {
            return Err(McmsError::Dataset(format!("{}: no entries", file.display())));
        }
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((manifest, root))
    }

    pub fn load_pairs(&self, root: &Path) -> Result<Vec<ImagePair>> {
        self.entries
            .par_iter()
            .map(|e| {
                let blurry = load_png(&root.join(&e.blurry))?;
                let sharp = load_png(&root.join(&e.sharp))?;
                if blurry.shape() != sharp.shape() {
                    return Err(McmsError::Dataset(format!("{}: blurry and sharp sizes differ", e.id)));
                }
                Ok(ImagePair {
                    id: e.id.clone(),
                    blurry,
                    sharp,
                })
            })
            .collect()
    }
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| McmsError::io(dir, e))? {
        let path = entry.map_err(|e| McmsError::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Blur every PNG in `sharp_dir` into `out_dir/blurry`, copy the sharp images
/// to `out_dir/sharp`, and write `out_dir/manifest.json`. Image `i` uses the
/// seed `seed ^ i`.
pub fn build_manifest(sharp_dir: &Path, out_dir: &Path, params: &BlurParams, seed: u64) -> Result<DatasetManifest> {
    let sources = list_pngs(sharp_dir)?;
    if sources.is_empty() {
        return Err(McmsError::Dataset(format!("{}: no PNG images", sharp_dir.display())));
    }
    for sub in ["blurry", "sharp"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| McmsError::io(&d, e))?;
    }
    let fixed = params.angle_deg.map(|a| motion_kernel(params.length, a)).transpose()?;
    let entries = sources
        .par_iter()
        .enumerate()
        .map(|(i, src)| {
            let id = src.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
            let image_seed = seed ^ i as u64;
            let sharp: Tensor4<f32> = load_png(src)?;
            let kernel = match &fixed {
                Some(k) => k.clone(),
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(image_seed);
                    motion_kernel(params.length, rng.random_range(0.0..180.0))?
                }
            };
            // Offset the noise stream from the angle stream.
            let blurry = synthesize_blur(&sharp, &kernel, params.noise_sigma, image_seed.wrapping_add(1 << 32))?;
            let entry = ManifestEntry {
                blurry: format!("blurry/{id}.png"),
                sharp: format!("sharp/{id}.png"),
                id,
            };
            save_png(&out_dir.join(&entry.blurry), &blurry)?;
            save_png(&out_dir.join(&entry.sharp), &sharp)?;
            Ok(entry)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        seed,
        noise_sigma: params.noise_sigma,
        entries,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| McmsError::io(&path, e))?;
    Ok(manifest)
}
