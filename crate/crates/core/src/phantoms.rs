//! Synthetic four-class head phantoms, noise corruption, resizing and the
//! on-disk dataset format.
//!
//! A dataset directory holds one headerless little-endian `f32` file per image
//! (row-major) and a `manifest.toml` describing every entry.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::rng::rng_from;

pub type Image = Array2<f64>;

pub const MIN_SIZE: usize = 32;
pub const MAX_SIZE: usize = 512;
pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    #[serde(rename = "FSE_AX")]
    FseAx,
    #[serde(rename = "FSE_COR")]
    FseCor,
    #[serde(rename = "FSE_SAG")]
    FseSag,
    #[serde(rename = "SE_AX")]
    SeAx,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 4] = [ClassLabel::FseAx, ClassLabel::FseCor, ClassLabel::FseSag, ClassLabel::SeAx];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::invalid(format!("class index {i} out of range")))
    }

    pub fn one_hot(self) -> [f64; 4] {
        let mut v = [0.0; 4];
        v[self.index()] = 1.0;
        v
    }

    /// Inverse of [`ClassLabel::one_hot`]; anything other than a single 1 among zeros is rejected.
    pub fn from_one_hot(v: &[f64]) -> Result<Self> {
        if v.len() != 4 {
            return Err(Error::invalid(format!("one-hot vector must have 4 entries, got {}", v.len())));
        }
        let ones: Vec<usize> = v.iter().enumerate().filter(|(_, &x)| x == 1.0).map(|(i, _)| i).collect();
        let zeros = v.iter().filter(|&&x| x == 0.0).count();
        if ones.len() != 1 || zeros != 3 {
            return Err(Error::invalid(format!("{v:?} is not a one-hot vector")));
        }
        Self::from_index(ones[0])
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::FseAx => "FSE_AX",
            ClassLabel::FseCor => "FSE_COR",
            ClassLabel::FseSag => "FSE_SAG",
            ClassLabel::SeAx => "SE_AX",
        }
    }

    /// Fast-spin-echo classes acquire several lines per echo train.
    pub fn is_fse(self) -> bool {
        !matches!(self, ClassLabel::SeAx)
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|c| c.name() == norm)
            .ok_or_else(|| Error::invalid(format!("unknown class '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub pixels: Image,
    pub label: ClassLabel,
    pub native_size: (usize, usize),
    /// Known for synthetic data, `None` for measured data.
    pub noise_sigma_true: Option<f64>,
    pub split: Split,
}

impl ImageSample {
    pub fn shape(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.pixels.dim();
        if h < MIN_SIZE || w < MIN_SIZE {
            return Err(Error::invalid(format!("image {h}x{w} is smaller than {MIN_SIZE}x{MIN_SIZE}")));
        }
        if !self.pixels.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("image contains non-finite pixels"));
        }
        if self.noise_sigma_true.is_some_and(|s| !(s >= 0.0)) {
            return Err(Error::invalid("noise_sigma_true must be non-negative"));
        }
        Ok(())
    }
}

/// Random per-sample geometry shared by all phantom families.
struct Pose {
    cx: f64,
    cy: f64,
    rot: f64,
    scale: f64,
    folds: f64,
    fold_phase: f64,
    gain: [f64; 4],
}

fn ellipse(x: f64, y: f64, cx: f64, cy: f64, a: f64, b: f64, rot: f64) -> f64 {
    let (s, c) = rot.sin_cos();
    let (dx, dy) = (x - cx, y - cy);
    let xr = c * dx + s * dy;
    let yr = -s * dx + c * dy;
    ((xr / a).powi(2) + (yr / b).powi(2)).sqrt()
}

/// Cortex with gyral folding: brightness oscillates with the polar angle near the rim.
fn folds(x: f64, y: f64, rho: f64, p: &Pose) -> f64 {
    if rho < 0.78 {
        return 0.0;
    }
    let ang = y.atan2(x);
    0.5 + 0.5 * (p.folds * ang + p.fold_phase).sin()
}

/// Overall head size relative to the field of view. Small enough that on a
/// 64×64 grid the 20×20 corner patches contain only background.
const HEAD_SCALE: f64 = 0.72;

fn intensity(label: ClassLabel, u: f64, v: f64, p: &Pose) -> f64 {
    // Local, pose-normalised coordinates.
    let (s, c) = p.rot.sin_cos();
    let k = p.scale * HEAD_SCALE;
    let (du, dv) = ((u - p.cx) / k, (v - p.cy) / k);
    let x = c * du + s * dv;
    let y = -s * du + c * dv;
    let g = &p.gain;
    match label {
        ClassLabel::FseAx => {
            let scalp = ellipse(x, y, 0.0, 0.0, 0.60, 0.72, 0.0);
            if scalp > 1.0 {
                return 0.0;
            }
            let brain = ellipse(x, y, 0.0, 0.0, 0.52, 0.64, 0.0);
            if brain > 1.0 {
                return 0.35 * g[0];
            }
            let mut val = 0.45 * g[1] + 0.25 * g[2] * folds(x, y, brain, p);
            let vl = ellipse(x, y, -0.11, -0.02, 0.05, 0.20, 0.15);
            let vr = ellipse(x, y, 0.11, -0.02, 0.05, 0.20, -0.15);
            if vl <= 1.0 || vr <= 1.0 {
                val = 1.0 * g[3];
            } else if x.abs() < 0.018 && y < -0.25 {
                val = 0.9 * g[3];
            }
            val
        }
        ClassLabel::FseCor => {
            let scalp = ellipse(x, y, 0.0, -0.08, 0.68, 0.62, 0.0);
            let stem = ellipse(x, y, 0.0, 0.50, 0.11, 0.32, 0.0);
            if scalp > 1.0 {
                return if stem <= 1.0 { 0.5 * g[1] } else { 0.0 };
            }
            let brain = ellipse(x, y, 0.0, -0.08, 0.60, 0.54, 0.0);
            if brain > 1.0 {
                return if stem <= 1.0 { 0.5 * g[1] } else { 0.35 * g[0] };
            }
            let mut val = 0.45 * g[1] + 0.25 * g[2] * folds(x, y + 0.08, brain, p);
            let vl = ellipse(x, y, -0.08, -0.12, 0.04, 0.13, 0.6);
            let vr = ellipse(x, y, 0.08, -0.12, 0.04, 0.13, -0.6);
            if vl <= 1.0 || vr <= 1.0 {
                val = 1.0 * g[3];
            } else if stem <= 1.0 {
                val = 0.5 * g[1];
            }
            val
        }
        ClassLabel::FseSag => {
            let scalp = ellipse(x, y, 0.0, 0.0, 0.74, 0.56, 0.0);
            if scalp > 1.0 {
                return 0.0;
            }
            let brain = ellipse(x, y, 0.0, 0.0, 0.66, 0.48, 0.0);
            if brain > 1.0 {
                return 0.35 * g[0];
            }
            let cereb = ellipse(x, y, 0.40, 0.28, 0.17, 0.15, 0.0);
            if cereb <= 1.0 {
                return 0.5 * g[1] + 0.3 * g[2] * (0.5 + 0.5 * (28.0 * y + p.fold_phase).sin());
            }
            let stem = ellipse(x, y, 0.12, 0.36, 0.08, 0.2, 0.4);
            if stem <= 1.0 {
                return 0.5 * g[1];
            }
            let cc = ellipse(x, y, -0.02, 0.02, 0.32, 0.16, 0.0);
            if (0.78..=1.0).contains(&cc) && y < 0.02 {
                return 0.15 * g[1];
            }
            let vent = ellipse(x, y, -0.02, -0.02, 0.24, 0.06, 0.0);
            if vent <= 1.0 {
                return 0.95 * g[3];
            }
            0.45 * g[1] + 0.25 * g[2] * folds(x, y, brain, p)
        }
        ClassLabel::SeAx => {
            // T1-like: bright scalp fat and white matter, dark fluid.
            let scalp = ellipse(x, y, 0.0, 0.0, 0.62, 0.68, 0.0);
            if scalp > 1.0 {
                return 0.0;
            }
            let brain = ellipse(x, y, 0.0, 0.0, 0.53, 0.59, 0.0);
            if brain > 1.0 {
                return 0.9 * g[0];
            }
            let mut val = 0.7 * g[1] - 0.25 * g[2] * folds(x, y, brain, p);
            let vl = ellipse(x, y, -0.10, -0.02, 0.05, 0.18, 0.15);
            let vr = ellipse(x, y, 0.10, -0.02, 0.05, 0.18, -0.15);
            if vl <= 1.0 || vr <= 1.0 {
                val = 0.1 * g[3];
            } else if x.abs() < 0.018 && y < -0.25 {
                val = 0.15 * g[3];
            }
            val
        }
    }
}

fn check_size(h: usize, w: usize) -> Result<()> {
    if !(MIN_SIZE..=MAX_SIZE).contains(&h) || !(MIN_SIZE..=MAX_SIZE).contains(&w) {
        return Err(Error::invalid(format!(
            "phantom size {h}x{w} outside [{MIN_SIZE}, {MAX_SIZE}]"
        )));
    }
    Ok(())
}

/// Clean phantom of the given class, max-normalised to `[0, 1]`.
pub fn generate_phantom(label: ClassLabel, size: (usize, usize), seed: u64) -> Result<ImageSample> {
    let (h, w) = size;
    check_size(h, w)?;
    let mut rng = rng_from(seed, &[label.index() as u64]);
    let pose = Pose {
        cx: rng.random_range(-0.04..0.04),
        cy: rng.random_range(-0.04..0.04),
        rot: rng.random_range(-0.12..0.12),
        scale: rng.random_range(0.92..1.02),
        folds: rng.random_range(5..=9) as f64,
        fold_phase: rng.random_range(0.0..std::f64::consts::TAU),
        gain: std::array::from_fn(|_| rng.random_range(0.9..1.1)),
    };
    // 2x2 supersampling softens the ellipse edges.
    let mut img = Array2::from_shape_fn((h, w), |(r, c)| {
        let mut acc = 0.0;
        for sr in [0.25, 0.75] {
            for sc in [0.25, 0.75] {
                let u = (c as f64 + sc) / w as f64 * 2.0 - 1.0;
                let v = (r as f64 + sr) / h as f64 * 2.0 - 1.0;
                acc += intensity(label, u, v, &pose);
            }
        }
        acc / 4.0
    });
    let max = img.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        img.mapv_inplace(|v| v / max);
    }
    Ok(ImageSample {
        pixels: img,
        label,
        native_size: (h, w),
        noise_sigma_true: Some(0.0),
        split: Split::Train,
    })
}

/// Adds i.i.d. `N(0, sigma²)` noise. No clipping, so the result may leave `[0, 1]`.
pub fn corrupt_with_noise(sample: &ImageSample, sigma: f64, seed: u64) -> Result<ImageSample> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("noise sigma must be non-negative, got {sigma}")));
    }
    let mut out = sample.clone();
    if sigma > 0.0 {
        let mut rng = rng_from(seed, &[0x6e6f697365]);
        out.pixels.mapv_inplace(|v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v + sigma * z
        });
    }
    out.noise_sigma_true = Some(sigma);
    Ok(out)
}

/// Bilinear resize of the pixels; label, split, noise and native size carry over.
pub fn resize_to_training_grid(sample: &ImageSample, target: (usize, usize)) -> Result<ImageSample> {
    sample.validate()?;
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::invalid("target grid must be nonempty"));
    }
    let mut out = sample.clone();
    out.pixels = resize_image(&sample.pixels, target);
    Ok(out)
}

pub fn resize_image(img: &Image, target: (usize, usize)) -> Image {
    let (h, w) = img.dim();
    if (h, w) == target {
        return img.clone();
    }
    let src: Vec<f64> = img.iter().copied().collect();
    let data = dps_nn::resize_bilinear(&src, h, w, target.0, target.1);
    Array2::from_shape_vec(target, data).expect("resize output length")
}

/// Rounds every value to the nearest `f32`, the precision of the on-disk format.
pub fn quantize_f32(img: &mut Image) {
    img.mapv_inplace(|v| v as f32 as f64);
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    /// Samples per class and split.
    pub per_class: SplitCounts,
    /// Matrix sizes; height and width are drawn independently.
    pub sizes: Vec<usize>,
    pub noise_sigma_min: f64,
    pub noise_sigma_max: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            per_class: SplitCounts {
                train: 90,
                val: 10,
                test: 25,
            },
            sizes: vec![48, 56, 64],
            noise_sigma_min: 0.03,
            noise_sigma_max: 0.1,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() {
            return Err(Error::Config("dataset sizes list is empty".into()));
        }
        for &s in &self.sizes {
            check_size(s, s)?;
        }
        if !(0.0 <= self.noise_sigma_min && self.noise_sigma_min <= self.noise_sigma_max) {
            return Err(Error::Config(format!(
                "noise sigma range [{}, {}] is invalid",
                self.noise_sigma_min, self.noise_sigma_max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_path: Option<String>,
    pub label: ClassLabel,
    pub height: usize,
    pub width: usize,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_sigma_true: Option<f64>,
}

/// Where a derived dataset came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub denoised_from: String,
    pub checkpoint_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub generator_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn count(&self, label: ClassLabel, split: Split) -> usize {
        self.entries.iter().filter(|e| e.label == label && e.split == split).count()
    }
}

/// One loaded sample plus, for synthetic data, its clean ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetItem {
    pub id: String,
    pub sample: ImageSample,
    pub clean: Option<Image>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub items: Vec<DatasetItem>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetItem> {
        self.items.iter().filter(move |i| i.sample.split == split)
    }

    /// Writes every image and the manifest, regenerating entry paths from item ids.
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.items.len());
        for item in &self.items {
            let path = format!("samples/{}.f32", item.id);
            io::write_image(&dir.join(&path), &item.sample.pixels)?;
            let clean_path = match &item.clean {
                Some(c) => {
                    let p = format!("clean/{}.f32", item.id);
                    io::write_image(&dir.join(&p), c)?;
                    Some(p)
                }
                None => None,
            };
            let (height, width) = item.sample.shape();
            entries.push(ManifestEntry {
                id: item.id.clone(),
                path,
                clean_path,
                label: item.sample.label,
                height,
                width,
                split: item.sample.split,
                noise_sigma_true: item.sample.noise_sigma_true,
            });
        }
        let manifest = DatasetManifest {
            schema_version: SCHEMA_VERSION,
            generator_seed: self.manifest.generator_seed,
            provenance: self.manifest.provenance.clone(),
            entries,
        };
        io::write_toml(&dir.join(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }
}

fn generate_item(cfg: &DatasetConfig, index: usize, label: ClassLabel, split: Split, k: usize) -> Result<DatasetItem> {
    let g = index as u64;
    let mut rng = rng_from(cfg.seed, &[g, 1]);
    let h = cfg.sizes[rng.random_range(0..cfg.sizes.len())];
    let w = cfg.sizes[rng.random_range(0..cfg.sizes.len())];
    let sigma = if cfg.noise_sigma_max > cfg.noise_sigma_min {
        rng.random_range(cfg.noise_sigma_min..cfg.noise_sigma_max)
    } else {
        cfg.noise_sigma_min
    };
    let mut clean = generate_phantom(label, (h, w), crate::rng::derive_seed(cfg.seed, &[g, 0]))?;
    clean.split = split;
    let mut noisy = corrupt_with_noise(&clean, sigma, crate::rng::derive_seed(cfg.seed, &[g, 2]))?;
    quantize_f32(&mut noisy.pixels);
    let mut clean_px = clean.pixels;
    quantize_f32(&mut clean_px);
    Ok(DatasetItem {
        id: format!("{}_{}_{:04}", label.name().to_ascii_lowercase(), split.name(), k),
        sample: noisy,
        clean: Some(clean_px),
    })
}

/// Generates the in-memory dataset described by `cfg` (no I/O).
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for label in ClassLabel::ALL {
        for split in Split::ALL {
            for k in 0..cfg.per_class.get(split) {
                jobs.push((label, split, k));
            }
        }
    }
    let items = jobs
        .par_iter()
        .enumerate()
        .map(|(i, &(label, split, k))| generate_item(cfg, i, label, split, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        manifest: DatasetManifest {
            schema_version: SCHEMA_VERSION,
            generator_seed: cfg.seed,
            provenance: None,
            entries: Vec::new(),
        },
        items,
    })
}

/// Generates the dataset and writes it (samples, clean truth, manifest) under `dir`.
pub fn build_dataset(cfg: &DatasetConfig, dir: &Path) -> Result<DatasetManifest> {
    generate_dataset(cfg)?.write(dir)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let manifest: DatasetManifest = io::read_toml(&dir.join(MANIFEST_FILE))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Format {
            path: dir.join(MANIFEST_FILE),
            detail: format!("unsupported schema version {}", manifest.schema_version),
        });
    }
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    let on_disk = count_files(&dir.join("samples"))?;
    if on_disk != manifest.entries.len() {
        return Err(Error::Format {
            path: dir.to_path_buf(),
            detail: format!("manifest lists {} samples but {on_disk} files exist", manifest.entries.len()),
        });
    }
    let items = manifest
        .entries
        .iter()
        .map(|e| {
            let shape = (e.height, e.width);
            let pixels = io::read_image(&dir.join(&e.path), shape)?;
            let clean = e
                .clean_path
                .as_ref()
                .map(|p| io::read_image(&dir.join(p), shape))
                .transpose()?;
            Ok(DatasetItem {
                id: e.id.clone(),
                sample: ImageSample {
                    pixels,
                    label: e.label,
                    native_size: shape,
                    noise_sigma_true: e.noise_sigma_true,
                    split: e.split,
                },
                clean,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, items })
}

fn count_files(dir: &Path) -> Result<usize> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut n = 0;
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().is_file() {
            n += 1;
        }
    }
    Ok(n)
}
