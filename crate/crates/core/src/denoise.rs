//! Self-supervised (Noisier2Noise-style) denoising of the training set.
//!
//! The noise level of every sample is estimated from a background corner patch,
//! extra noise at 1.5× that level is added, and a network is trained to map the
//! noisier image back to the original noisy one. The trained network is then
//! applied to the original samples.

use std::path::Path;

use dps_nn::{Graph, Tensor};
use ndarray::s;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::phantoms::{load_dataset, resize_image, Dataset, DatasetItem, DatasetManifest, Image, ImageSample, Provenance, Split};
use crate::rng::{derive_seed, rng_from};
use crate::scorenet::unet::UNet;
use crate::scorenet::{
    fit, hflip, images_to_tensor, read_blob_checked, read_loss_csv, tensor_to_images, with_suffix, write_loss_csv,
    ScoreModelConfig, TrainConfig, TrainingMeta,
};

pub const PATCH_SIZE: usize = 20;
const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseEstimate {
    pub sigma_hat: f64,
    pub patch_origin: (usize, usize),
    pub patch_size: (usize, usize),
}

/// Sample standard deviation of the corner patch with the lowest mean.
pub fn estimate_noise_sigma_image(img: &Image) -> Result<NoiseEstimate> {
    let (h, w) = img.dim();
    if h < PATCH_SIZE || w < PATCH_SIZE {
        return Err(Error::invalid(format!(
            "image {h}x{w} is smaller than the {PATCH_SIZE}x{PATCH_SIZE} background patch"
        )));
    }
    let origins = [(0, 0), (0, w - PATCH_SIZE), (h - PATCH_SIZE, 0), (h - PATCH_SIZE, w - PATCH_SIZE)];
    let n = (PATCH_SIZE * PATCH_SIZE) as f64;
    let mut best: Option<(f64, (usize, usize))> = None;
    for origin in origins {
        let mean = background_patch(img, origin).sum() / n;
        if best.is_none_or(|(m, _)| mean < m) {
            best = Some((mean, origin));
        }
    }
    let (mean, origin) = best.expect("four candidate patches");
    let ss: f64 = background_patch(img, origin).iter().map(|v| (v - mean) * (v - mean)).sum();
    Ok(NoiseEstimate {
        sigma_hat: (ss / (n - 1.0)).sqrt(),
        patch_origin: origin,
        patch_size: (PATCH_SIZE, PATCH_SIZE),
    })
}

pub(crate) fn background_patch(img: &Image, origin: (usize, usize)) -> ndarray::ArrayView2<'_, f64> {
    img.slice(s![origin.0..origin.0 + PATCH_SIZE, origin.1..origin.1 + PATCH_SIZE])
}

pub fn estimate_noise_sigma(sample: &ImageSample) -> Result<NoiseEstimate> {
    estimate_noise_sigma_image(&sample.pixels)
}

/// Adds `N(0, (multiplier·σ̂)²)` noise; returns `(noisier, target)`.
pub fn noisier2noise_target_with(img: &Image, sigma_hat: f64, multiplier: f64, seed: u64) -> Result<(Image, Image)> {
    if !(sigma_hat >= 0.0) || !(multiplier >= 0.0) {
        return Err(Error::invalid("noise level and multiplier must be non-negative"));
    }
    let std = multiplier * sigma_hat;
    let mut rng = rng_from(seed, &[0x6e326e]);
    let noisier = if std > 0.0 {
        img.mapv(|v| v + std * rng.sample::<f64, _>(StandardNormal))
    } else {
        img.clone()
    };
    Ok((noisier, img.clone()))
}

pub fn noisier2noise_target(sample: &ImageSample, sigma_hat: f64, seed: u64) -> Result<(Image, Image)> {
    noisier2noise_target_with(&sample.pixels, sigma_hat, 1.5, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Network architecture; the class embedding is always disabled. Level 0 of
    /// `per_level_resolutions` is the training crop size.
    pub arch: ScoreModelConfig,
    pub train: TrainConfig,
    /// Extra-noise multiplier α (1.5 by default).
    pub noise_multiplier: f64,
    /// Apply the Noisier2Noise correction `((1 + α²)·f(x) − x)/α²` at inference.
    pub n2n_correction: bool,
}

impl DenoiserConfig {
    pub fn desk() -> Self {
        let mut arch = ScoreModelConfig::desk((48, 48));
        arch.use_class_embedding = false;
        Self {
            arch,
            train: TrainConfig::default(),
            noise_multiplier: 1.5,
            n2n_correction: false,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    kind: String,
    schema_version: u32,
    noise_multiplier: f64,
    n2n_correction: bool,
    weights_sha256: String,
    training: TrainingMeta,
    arch: ScoreModelConfig,
    train: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct DenoiserCheckpoint {
    pub config: DenoiserConfig,
    pub meta: TrainingMeta,
    unet: UNet,
}

impl DenoiserCheckpoint {
    pub fn weights_blob(&self) -> Vec<u8> {
        self.unet.params.to_blob()
    }

    pub fn sha256(&self) -> String {
        io::sha256_hex(&self.weights_blob())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let blob = self.weights_blob();
        io::write_bytes(path, &blob)?;
        let sc = Sidecar {
            kind: "denoiser".into(),
            schema_version: SCHEMA_VERSION,
            noise_multiplier: self.config.noise_multiplier,
            n2n_correction: self.config.n2n_correction,
            weights_sha256: io::sha256_hex(&blob),
            training: self.meta.clone(),
            arch: self.config.arch.clone(),
            train: self.config.train.clone(),
        };
        io::write_toml(&with_suffix(path, ".toml"), &sc)?;
        write_loss_csv(&with_suffix(path, ".loss.csv"), &self.meta.loss_curve)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sidecar_path = with_suffix(path, ".toml");
        let sc: Sidecar = io::read_toml(&sidecar_path)?;
        if sc.kind != "denoiser" || sc.schema_version != SCHEMA_VERSION {
            return Err(Error::Format {
                path: sidecar_path,
                detail: format!("expected a denoiser checkpoint, found kind '{}'", sc.kind),
            });
        }
        let blob = read_blob_checked(path, &sc.weights_sha256)?;
        let mut unet = UNet::new(&sc.arch, 0)?;
        unet.params.load_blob(&blob)?;
        let mut meta = sc.training;
        meta.loss_curve = read_loss_csv(&with_suffix(path, ".loss.csv"))?;
        Ok(Self {
            config: DenoiserConfig {
                arch: sc.arch,
                train: sc.train,
                noise_multiplier: sc.noise_multiplier,
                n2n_correction: sc.n2n_correction,
            },
            meta,
            unet,
        })
    }

    /// Raw network output `x + F(x)` for a batch of equally-sized images.
    fn forward(unet: &UNet, g: &mut Graph, p: &[dps_nn::Var], xs: &[&Image]) -> Result<dps_nn::Var> {
        let x = g.leaf(images_to_tensor(xs)?, false);
        let f = unet.forward(g, p, x, &vec![0.0; xs.len()], None)?;
        Ok(g.add(x, f)?)
    }

    /// Denoises one image of any supported size.
    pub fn apply(&self, img: &Image) -> Result<Image> {
        let mut g = Graph::new();
        let p = self.unet.param_leaves(&mut g, false);
        let out = Self::forward(&self.unet, &mut g, &p, &[img])?;
        let mut out = tensor_to_images(g.value(out))?.pop().expect("single image");
        if self.config.n2n_correction {
            let a2 = self.config.noise_multiplier.powi(2);
            out.zip_mut_with(img, |o, &x| *o = ((1.0 + a2) * *o - x) / a2);
        }
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericalFailure {
                step: 0,
                detail: "denoiser produced non-finite pixels".into(),
            });
        }
        Ok(out)
    }
}

/// Crop of size `crop` at `origin`, or the whole image resized when it is smaller.
fn crop(img: &Image, origin: (usize, usize), crop: (usize, usize)) -> Image {
    let (h, w) = img.dim();
    if h < crop.0 || w < crop.1 {
        return resize_image(img, crop);
    }
    img.slice(s![origin.0..origin.0 + crop.0, origin.1..origin.1 + crop.1]).to_owned()
}

fn random_origin(rng: &mut impl Rng, shape: (usize, usize), crop: (usize, usize)) -> (usize, usize) {
    (
        rng.random_range(0..=shape.0.saturating_sub(crop.0)),
        rng.random_range(0..=shape.1.saturating_sub(crop.1)),
    )
}

/// Trains the denoiser on the train split of `data` (noisy samples only; clean
/// truth is never used).
pub fn train_denoiser(data: &Dataset, config: &DenoiserConfig) -> Result<DenoiserCheckpoint> {
    let mut arch = config.arch.clone();
    arch.use_class_embedding = false;
    arch.validate()?;
    let tc = &config.train;
    tc.validate()?;
    let train: Vec<(&Image, f64)> = data
        .split(Split::Train)
        .map(|it| Ok((&it.sample.pixels, estimate_noise_sigma(&it.sample)?.sigma_hat)))
        .collect::<Result<_>>()?;
    if train.is_empty() {
        return Err(Error::invalid("the training split is empty"));
    }
    let grid = arch.training_grid();
    // Fixed centre crops and noise draws make the validation loss comparable across steps.
    let val: Vec<(Image, Image)> = data
        .split(Split::Val)
        .take(tc.max_val_items)
        .enumerate()
        .map(|(i, it)| {
            let (h, w) = it.sample.shape();
            let c = crop(&it.sample.pixels, ((h.saturating_sub(grid.0)) / 2, (w.saturating_sub(grid.1)) / 2), grid);
            let sigma = estimate_noise_sigma(&it.sample)?.sigma_hat;
            noisier2noise_target_with(&c, sigma, config.noise_multiplier, derive_seed(tc.seed, &[3, i as u64]))
        })
        .collect::<Result<_>>()?;

    let mut unet = UNet::new(&arch, derive_seed(tc.seed, &[0]))?;
    let curve = fit(
        &mut unet,
        train.len(),
        tc,
        |unet, g, p, idx, step_seed| {
            let mut noisier = Vec::with_capacity(idx.len());
            let mut targets = Vec::with_capacity(idx.len());
            for (j, &i) in idx.iter().enumerate() {
                let (img, sigma) = train[i];
                let mut rng = rng_from(step_seed, &[j as u64]);
                let mut c = crop(img, random_origin(&mut rng, img.dim(), grid), grid);
                if tc.hflip && rng.random_bool(0.5) {
                    c = hflip(&c);
                }
                let (z, t) = noisier2noise_target_with(&c, sigma, config.noise_multiplier, rng.random())?;
                noisier.push(z);
                targets.push(t);
            }
            let refs: Vec<&Image> = noisier.iter().collect();
            let out = DenoiserCheckpoint::forward(unet, g, p, &refs)?;
            let od = g.value(out).data();
            let total = od.len() as f64;
            let mut loss = 0.0;
            let mut seed = Vec::with_capacity(od.len());
            for (o, t) in od.iter().zip(targets.iter().flat_map(|t| t.iter())) {
                let d = o - t;
                loss += d * d / total;
                seed.push(2.0 * d / total);
            }
            Ok((loss, vec![(out, Tensor::from_vec(g.value(out).shape(), seed)?)]))
        },
        |unet| {
            if val.is_empty() {
                return Ok(None);
            }
            let mut sse = 0.0;
            let mut count = 0usize;
            for (z, t) in &val {
                let mut g = Graph::new();
                let p = unet.param_leaves(&mut g, false);
                let out = DenoiserCheckpoint::forward(unet, &mut g, &p, &[z])?;
                sse += g.value(out).data().iter().zip(t.iter()).map(|(o, t)| (o - t) * (o - t)).sum::<f64>();
                count += t.len();
            }
            Ok(Some(sse / count as f64))
        },
    )?;
    Ok(DenoiserCheckpoint {
        config: DenoiserConfig {
            arch,
            ..config.clone()
        },
        meta: TrainingMeta {
            steps: tc.steps,
            seed: tc.seed,
            batch_size: tc.batch_size,
            learning_rate: tc.learning_rate,
            loss_curve: curve,
        },
        unet,
    })
}

/// Applies the denoiser to every original sample of `data` and returns the
/// denoised dataset (in memory) with provenance set.
pub fn denoise_items(data: &Dataset, ckpt: &DenoiserCheckpoint, source: &str) -> Result<Dataset> {
    let items = data
        .items
        .par_iter()
        .map(|it| {
            let mut sample = it.sample.clone();
            sample.pixels = ckpt.apply(&it.sample.pixels)?;
            crate::phantoms::quantize_f32(&mut sample.pixels);
            sample.noise_sigma_true = None;
            Ok(DatasetItem {
                id: it.id.clone(),
                sample,
                clean: it.clean.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = data.manifest.clone();
    manifest.provenance = Some(Provenance {
        denoised_from: source.to_string(),
        checkpoint_sha256: ckpt.sha256(),
    });
    Ok(Dataset { manifest, items })
}

/// Denoises the dataset in `src` and writes the result to `dst`.
pub fn denoise_dataset(src: &Path, ckpt: &DenoiserCheckpoint, dst: &Path) -> Result<DatasetManifest> {
    let data = load_dataset(src)?;
    let source = src.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    denoise_items(&data, ckpt, &source)?.write(dst)
}

/// Mean NRMSE of the samples to their clean truth, over items that have one.
pub fn mean_nrmse_to_clean<'a>(items: impl IntoIterator<Item = &'a DatasetItem>) -> Option<f64> {
    let vals: Vec<f64> = items
        .into_iter()
        .filter_map(|it| {
            let clean = it.clean.as_ref()?;
            let num = (&it.sample.pixels - clean).mapv(|v| v * v).sum().sqrt();
            let den = clean.mapv(|v| v * v).sum().sqrt();
            (den > 0.0).then_some(num / den)
        })
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantoms::{corrupt_with_noise, generate_phantom, ClassLabel};
    use ndarray::Array2;

    fn zero_sample(shape: (usize, usize)) -> ImageSample {
        ImageSample {
            pixels: Array2::zeros(shape),
            label: ClassLabel::FseAx,
            native_size: shape,
            noise_sigma_true: Some(0.0),
            split: Split::Train,
        }
    }

    #[test]
    fn zero_image_has_zero_sigma() {
        let est = estimate_noise_sigma(&zero_sample((48, 48))).unwrap();
        assert_eq!(est.sigma_hat, 0.0);
        assert_eq!(est.patch_size, (20, 20));
    }

    #[test]
    fn pure_noise_estimate() {
        let noisy = corrupt_with_noise(&zero_sample((64, 64)), 0.1, 5).unwrap();
        let est = estimate_noise_sigma(&noisy).unwrap();
        assert!((est.sigma_hat - 0.1).abs() < 0.015, "{}", est.sigma_hat);
    }

    #[test]
    fn phantom_background_estimate() {
        for (k, label) in ClassLabel::ALL.into_iter().enumerate() {
            let clean = generate_phantom(label, (64, 64), 11 + k as u64).unwrap();
            let noisy = corrupt_with_noise(&clean, 0.05, 3).unwrap();
            let est = estimate_noise_sigma(&noisy).unwrap();
            assert!((0.035..=0.065).contains(&est.sigma_hat), "{label}: {}", est.sigma_hat);
        }
    }

    #[test]
    fn too_small_is_rejected() {
        let img = Array2::zeros((19, 40));
        assert!(matches!(estimate_noise_sigma_image(&img), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn noisier_target_contract() {
        let s = zero_sample((64, 64));
        let (z, t) = noisier2noise_target(&s, 0.0, 1).unwrap();
        assert_eq!(z, t);
        let (z1, t1) = noisier2noise_target(&s, 0.08, 9).unwrap();
        let (z2, _) = noisier2noise_target(&s, 0.08, 9).unwrap();
        assert_eq!(z1, z2);
        let d = &z1 - &t1;
        let n = d.len() as f64;
        let mean = d.sum() / n;
        let std = (d.mapv(|v| (v - mean) * (v - mean)).sum() / (n - 1.0)).sqrt();
        assert!((std / 0.12 - 1.0).abs() < 0.05, "{std}");
    }
}
