//! Class-conditioned diffusion denoiser `D(x; σ, C)` with EDM preconditioning.
//!
//! The network is evaluated through [`ScoreNet`]. Checkpoints bundle a network
//! with the regime it was trained under, and [`train_score_model`] runs the
//! EDM training loop.

mod checkpoint;
mod train;
pub(crate) mod unet;

use dps_nn::{Graph, Tensor, Var};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use checkpoint::{LossRecord, ScoreCheckpoint, TrainingMeta};
pub use checkpoint::file_sha256;
pub(crate) use checkpoint::{read_blob_checked, read_loss_csv, with_suffix, write_loss_csv};
pub(crate) use train::{fit, hflip};
pub use train::{train_score_model, Regime, TrainConfig};

use crate::error::{Error, Result};
use crate::phantoms::{ClassLabel, Image};
use crate::rng::rng_from;
use unet::UNet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreModelConfig {
    pub base_channels: usize,
    /// Channel multiplier per U-level; its length is the depth.
    pub channel_mult: Vec<usize>,
    /// Resolution of every U-level. Entry 0 is the training grid; at inference
    /// level 0 follows the input size while deeper levels use these sizes.
    pub per_level_resolutions: Vec<[usize; 2]>,
    pub embed_dim: usize,
    pub norm_groups: usize,
    pub use_class_embedding: bool,
    pub sigma_data: f64,
    pub p_mean: f64,
    pub p_std: f64,
}

impl ScoreModelConfig {
    /// Desk-scale defaults for a given training grid: three levels, each half the
    /// size of the previous one.
    pub fn desk(grid: (usize, usize)) -> Self {
        let depth = 3;
        let per_level_resolutions = (0..depth)
            .map(|l| [(grid.0 >> l).max(1), (grid.1 >> l).max(1)])
            .collect();
        Self {
            base_channels: 16,
            channel_mult: vec![1, 2, 2],
            per_level_resolutions,
            embed_dim: 64,
            norm_groups: 4,
            use_class_embedding: true,
            sigma_data: 0.5,
            p_mean: -1.2,
            p_std: 1.2,
        }
    }

    pub fn depth(&self) -> usize {
        self.channel_mult.len()
    }

    pub fn training_grid(&self) -> (usize, usize) {
        let [h, w] = self.per_level_resolutions[0];
        (h, w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.channel_mult.is_empty() || self.channel_mult.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.per_level_resolutions.len() != self.depth() {
            return Err(Error::Config(format!(
                "{} per-level resolutions given for {} levels",
                self.per_level_resolutions.len(),
                self.depth()
            )));
        }
        let strictly_decreasing = self.per_level_resolutions.windows(2).all(|p| {
            p[1][0] <= p[0][0] && p[1][1] <= p[0][1] && (p[1][0] < p[0][0] || p[1][1] < p[0][1])
        });
        if !strictly_decreasing || self.per_level_resolutions.iter().any(|r| r[0] == 0 || r[1] == 0) {
            return Err(Error::Config("per-level resolutions must be positive and strictly decreasing".into()));
        }
        if self.embed_dim < 4 {
            return Err(Error::Config("embed_dim must be at least 4".into()));
        }
        if self.norm_groups == 0 {
            return Err(Error::Config("norm_groups must be positive".into()));
        }
        if !(self.sigma_data > 0.0 && self.sigma_data.is_finite()) || !(self.p_std >= 0.0) || !self.p_mean.is_finite() {
            return Err(Error::Config("sigma_data must be positive and P_std non-negative".into()));
        }
        Ok(())
    }
}

/// EDM preconditioning coefficients.
pub fn c_skip(sigma: f64, sigma_data: f64) -> f64 {
    sigma_data * sigma_data / (sigma * sigma + sigma_data * sigma_data)
}

pub fn c_out(sigma: f64, sigma_data: f64) -> f64 {
    sigma * sigma_data / (sigma * sigma + sigma_data * sigma_data).sqrt()
}

pub fn c_in(sigma: f64, sigma_data: f64) -> f64 {
    1.0 / (sigma * sigma + sigma_data * sigma_data).sqrt()
}

pub fn c_noise(sigma: f64) -> f64 {
    sigma.ln() / 4.0
}

/// EDM loss weight λ(σ) = (σ² + σ_data²) / (σ·σ_data)².
pub fn loss_weight(sigma: f64, sigma_data: f64) -> f64 {
    (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data).powi(2)
}

pub(crate) fn images_to_tensor(images: &[&Image]) -> Result<Tensor> {
    let (h, w) = images.first().ok_or_else(|| Error::invalid("empty image batch"))?.dim();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.dim() != (h, w) {
            return Err(Error::invalid("all images in a batch must share one shape"));
        }
        data.extend(img.iter().copied());
    }
    Ok(Tensor::from_vec(&[images.len(), 1, h, w], data)?)
}

pub(crate) fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    let (n, c, h, w) = t.dims4()?;
    debug_assert_eq!(c, 1);
    Ok(t.data()
        .chunks_exact(h * w)
        .take(n)
        .map(|chunk| Array2::from_shape_vec((h, w), chunk.to_vec()).expect("chunk length"))
        .collect())
}

/// Bilinear (align-corners-false) resampling of one feature map.
pub fn resample_feature_grid(features: &Array2<f64>, target: (usize, usize)) -> Result<Array2<f64>> {
    let (h, w) = features.dim();
    if h == 0 || w == 0 {
        return Err(Error::invalid("empty feature map"));
    }
    if target.0 < 1 || target.1 < 1 || target.0 > 4 * h || target.1 > 4 * w {
        return Err(Error::invalid(format!(
            "target {target:?} outside [1, 4x] of source ({h}, {w})"
        )));
    }
    Ok(crate::phantoms::resize_image(features, target))
}

/// Builds the preconditioned output
/// `D = c_skip·x + c_out·F(c_in·x, c_noise, C)` for a batch `x` of shape `[n, 1, h, w]`.
pub(crate) fn build_preconditioned(
    unet: &UNet,
    g: &mut Graph,
    p: &[Var],
    x: Var,
    sigmas: &[f64],
    classes: Option<&[ClassLabel]>,
) -> Result<Var> {
    let sd = unet.config.sigma_data;
    if let Some(&s) = sigmas.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(Error::invalid(format!("noise level must be positive and finite, got {s}")));
    }
    let cin: Vec<f64> = sigmas.iter().map(|&s| c_in(s, sd)).collect();
    let cskip: Vec<f64> = sigmas.iter().map(|&s| c_skip(s, sd)).collect();
    let cout: Vec<f64> = sigmas.iter().map(|&s| c_out(s, sd)).collect();
    let cnoise: Vec<f64> = sigmas.iter().map(|&s| c_noise(s)).collect();
    let xin = g.scale(x, &cin)?;
    let f = unet.forward(g, p, xin, &cnoise, classes)?;
    let skip = g.scale(x, &cskip)?;
    let out = g.scale(f, &cout)?;
    Ok(g.add(skip, out)?)
}

/// The trainable denoiser network together with its configuration.
#[derive(Clone, Debug)]
pub struct ScoreNet {
    pub(crate) unet: UNet,
}

impl ScoreNet {
    pub fn new(config: &ScoreModelConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            unet: UNet::new(config, seed)?,
        })
    }

    pub fn config(&self) -> &ScoreModelConfig {
        &self.unet.config
    }

    pub fn num_params(&self) -> usize {
        self.unet.params.num_scalars()
    }

    pub fn weights_blob(&self) -> Vec<u8> {
        self.unet.params.to_blob()
    }

    pub(crate) fn load_weights(&mut self, blob: &[u8]) -> Result<()> {
        Ok(self.unet.params.load_blob(blob)?)
    }

    fn check_class(&self, class: Option<ClassLabel>) -> Result<()> {
        if self.config().use_class_embedding && class.is_none() {
            return Err(Error::invalid("this model uses class embeddings; a class label is required"));
        }
        Ok(())
    }

    pub(crate) fn build(
        &self,
        g: &mut Graph,
        p: &[Var],
        x: Var,
        sigmas: &[f64],
        classes: Option<&[ClassLabel]>,
    ) -> Result<Var> {
        build_preconditioned(&self.unet, g, p, x, sigmas, classes)
    }

    /// `D(x; σ, C)` for a single image of any supported size.
    pub fn denoise_estimate(&self, x: &Image, sigma: f64, class: Option<ClassLabel>) -> Result<Image> {
        let classes = class.map(|c| vec![c]);
        Ok(self
            .denoise_batch(&[x], &[sigma], classes.as_deref())?
            .pop()
            .expect("one output per input"))
    }

    /// Batched `D`; images must share one shape. Each output depends only on its
    /// own input, bit for bit.
    pub fn denoise_batch(&self, xs: &[&Image], sigmas: &[f64], classes: Option<&[ClassLabel]>) -> Result<Vec<Image>> {
        if self.config().use_class_embedding && classes.is_none() {
            return Err(Error::invalid("this model uses class embeddings; class labels are required"));
        }
        if sigmas.len() != xs.len() {
            return Err(Error::invalid("one noise level per image is required"));
        }
        let mut g = Graph::new();
        let p = self.unet.param_leaves(&mut g, false);
        let x = g.leaf(images_to_tensor(xs)?, false);
        let d = self.build(&mut g, &p, x, sigmas, classes)?;
        tensor_to_images(g.value(d))
    }

    /// Evaluates `x̂ = D(x; σ, C)` and, if `cotangent(x̂)` returns a vector `v`,
    /// the vector-Jacobian product `(∂x̂/∂x)ᵀ v`.
    pub fn denoise_vjp(
        &self,
        x: &Image,
        sigma: f64,
        class: Option<ClassLabel>,
        cotangent: &mut dyn FnMut(&Image) -> Result<Option<Image>>,
    ) -> Result<(Image, Option<Image>)> {
        self.check_class(class)?;
        let classes = class.map(|c| vec![c]);
        let mut g = Graph::new();
        let p = self.unet.param_leaves(&mut g, false);
        let xv = g.leaf(images_to_tensor(&[x])?, true);
        let d = self.build(&mut g, &p, xv, &[sigma], classes.as_deref())?;
        let xhat = tensor_to_images(g.value(d))?.pop().expect("single image");
        let Some(v) = cotangent(&xhat)? else {
            return Ok((xhat, None));
        };
        if v.dim() != xhat.dim() {
            return Err(Error::invalid("cotangent shape differs from the denoiser output"));
        }
        let mut grads = g.backward(vec![(d, images_to_tensor(&[&v])?)])?;
        let gx = grads.take(xv).unwrap_or_else(|| Tensor::zeros(g.value(xv).shape()));
        Ok((xhat, tensor_to_images(&gx)?.pop()))
    }

    /// Applies the class-embedding network to a one-hot vector.
    pub fn embed_class(&self, one_hot: &[f64]) -> Result<Vec<f64>> {
        ClassLabel::from_one_hot(one_hot)?;
        let mut g = Graph::new();
        let p = self.unet.param_leaves(&mut g, false);
        let e = self.unet.class_embedding(&mut g, &p, Tensor::from_vec(&[1, 4], one_hot.to_vec())?)?;
        Ok(g.value(e).data().to_vec())
    }
}

/// One training example for the EDM loss: clean image and optional class.
pub type LossItem<'a> = (&'a Image, Option<ClassLabel>);

/// Noise level and noise realisation for item `i` of a loss evaluation.
pub(crate) fn draw_noise(cfg: &ScoreModelConfig, seed: u64, i: usize, shape: (usize, usize)) -> (f64, Image) {
    let mut rng = rng_from(seed, &[i as u64]);
    let z: f64 = rng.sample(StandardNormal);
    let sigma = (cfg.p_mean + cfg.p_std * z).exp();
    let n = Array2::from_shape_simple_fn(shape, || sigma * rng.sample::<f64, _>(StandardNormal));
    (sigma, n)
}

/// EDM loss with an arbitrary denoiser `d(noisy, σ, class)`: the mean over the
/// batch of `λ(σ)·‖d(x + n; σ) − x‖²`.
pub fn edm_loss_with(
    batch: &[LossItem<'_>],
    cfg: &ScoreModelConfig,
    seed: u64,
    mut d: impl FnMut(&Image, f64, Option<ClassLabel>) -> Result<Image>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("EDM loss needs a nonempty batch"));
    }
    let mut total = 0.0;
    for (i, (x, class)) in batch.iter().enumerate() {
        let (sigma, n) = draw_noise(cfg, seed, i, x.dim());
        let noisy = *x + &n;
        let out = d(&noisy, sigma, *class)?;
        let err: f64 = out.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        total += loss_weight(sigma, cfg.sigma_data) * err;
    }
    let loss = total / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NumericalFailure {
            step: 0,
            detail: "EDM loss is not finite".into(),
        });
    }
    Ok(loss)
}

/// EDM loss of the network itself.
pub fn edm_loss(batch: &[LossItem<'_>], net: &ScoreNet, seed: u64) -> Result<f64> {
    edm_loss_with(batch, net.config(), seed, |noisy, sigma, class| {
        net.denoise_estimate(noisy, sigma, class)
    })
}

/// `embed_class` against a checkpoint.
pub fn embed_class(one_hot: &[f64], ckpt: &ScoreCheckpoint) -> Result<Vec<f64>> {
    ckpt.net.embed_class(one_hot)
}

/// `denoise_estimate` against a checkpoint, with the class given as a one-hot vector.
pub fn denoise_estimate(x: &Image, sigma: f64, class: Option<&[f64]>, ckpt: &ScoreCheckpoint) -> Result<Image> {
    let class = class.map(ClassLabel::from_one_hot).transpose()?;
    ckpt.net.denoise_estimate(x, sigma, class)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny(embed: bool) -> ScoreNet {
        let mut cfg = ScoreModelConfig::desk((16, 16));
        cfg.base_channels = 4;
        cfg.channel_mult = vec![1, 2];
        cfg.per_level_resolutions = vec![[16, 16], [8, 8]];
        cfg.embed_dim = 8;
        cfg.norm_groups = 2;
        cfg.use_class_embedding = embed;
        ScoreNet::new(&cfg, 3).unwrap()
    }

    #[test]
    fn preconditioning_identities() {
        assert_abs_diff_eq!(c_skip(0.5, 0.5), 0.5, epsilon = 1e-15);
        for s in [0.002, 0.1, 1.0, 5.0] {
            assert_abs_diff_eq!(c_in(s, 0.5), 1.0 / (s * s + 0.25f64).sqrt(), epsilon = 1e-15);
            // The effective regression target (x − c_skip·(x+n))/c_out has unit variance.
            let var = (1.0 - c_skip(s, 0.5)).powi(2) * 0.25 + c_skip(s, 0.5).powi(2) * s * s;
            assert_abs_diff_eq!(var / c_out(s, 0.5).powi(2), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn resample_examples() {
        let src = Array2::from_shape_vec((2, 2), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let up = resample_feature_grid(&src, (4, 4)).unwrap();
        let expected = [
            [0.0, 0.25, 0.75, 1.0],
            [0.5, 0.75, 1.25, 1.5],
            [1.5, 1.75, 2.25, 2.5],
            [2.0, 2.25, 2.75, 3.0],
        ];
        for r in 0..4 {
            for c in 0..4 {
                assert_abs_diff_eq!(up[[r, c]], expected[r][c], epsilon = 1e-12);
            }
        }
        assert_eq!(resample_feature_grid(&src, (2, 2)).unwrap(), src);
        let constant = Array2::from_elem((5, 7), 0.3);
        let out = resample_feature_grid(&constant, (11, 3)).unwrap();
        assert!(out.iter().all(|v| (v - 0.3).abs() < 1e-12));
        assert!(resample_feature_grid(&src, (9, 2)).is_err());
        assert!(resample_feature_grid(&src, (0, 2)).is_err());
    }

    #[test]
    fn class_embedding_contract() {
        let net = tiny(true);
        let a = net.embed_class(&ClassLabel::FseAx.one_hot()).unwrap();
        let b = net.embed_class(&ClassLabel::SeAx.one_hot()).unwrap();
        assert_eq!(a.len(), 8);
        assert!(a.iter().zip(&b).any(|(x, y)| x != y));
        assert!(net.embed_class(&[1.0, 1.0, 0.0, 0.0]).is_err());
        assert!(tiny(false).embed_class(&ClassLabel::FseAx.one_hot()).is_err());
    }

    #[test]
    fn class_required_when_conditioned() {
        let net = tiny(true);
        let x = Array2::zeros((16, 16));
        assert!(matches!(net.denoise_estimate(&x, 1.0, None), Err(Error::InvalidArgument(_))));
        assert!(net.denoise_estimate(&x, 1.0, Some(ClassLabel::FseCor)).is_ok());
        assert!(tiny(false).denoise_estimate(&x, 1.0, None).is_ok());
    }

    #[test]
    fn output_shape_follows_input() {
        let net = tiny(true);
        for shape in [(16, 16), (20, 12), (33, 40)] {
            let x = Array2::from_shape_fn(shape, |(r, c)| ((r * 7 + c * 3) % 5) as f64 * 0.2);
            let d = net.denoise_estimate(&x, 0.3, Some(ClassLabel::FseSag)).unwrap();
            assert_eq!(d.dim(), shape);
            assert!(d.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn batch_matches_single() {
        let net = tiny(true);
        let a = Array2::from_shape_fn((16, 16), |(r, c)| (r as f64 - c as f64) * 0.05);
        let b = Array2::from_shape_fn((16, 16), |(r, c)| ((r * c) % 3) as f64 * 0.3);
        let batch = net
            .denoise_batch(&[&a, &b], &[0.2, 2.0], Some(&[ClassLabel::FseAx, ClassLabel::SeAx]))
            .unwrap();
        assert_eq!(batch[1], net.denoise_estimate(&b, 2.0, Some(ClassLabel::SeAx)).unwrap());
        assert_eq!(batch[0], net.denoise_estimate(&a, 0.2, Some(ClassLabel::FseAx)).unwrap());
    }

    #[test]
    fn edm_loss_oracles() {
        let cfg = ScoreModelConfig::desk((32, 32));
        let x = Array2::from_shape_fn((32, 32), |(r, c)| ((r + c) % 7) as f64 / 7.0);
        let batch: Vec<LossItem<'_>> = (0..200).map(|_| (&x, None)).collect();
        let zero = edm_loss_with(&batch, &cfg, 1, |_, _, _| Ok(x.clone())).unwrap();
        assert_eq!(zero, 0.0);
        // passthrough: loss = mean λ‖n‖²; compare with the analytic λσ²·pixels per draw
        let mut expected = 0.0;
        for i in 0..batch.len() {
            let (s, _) = draw_noise(&cfg, 1, i, (32, 32));
            expected += loss_weight(s, cfg.sigma_data) * s * s * 1024.0;
        }
        expected /= batch.len() as f64;
        let pass = edm_loss_with(&batch, &cfg, 1, |noisy, _, _| Ok(noisy.clone())).unwrap();
        assert!((pass / expected - 1.0).abs() < 0.05, "{pass} vs {expected}");
        assert!(edm_loss_with(&[], &cfg, 1, |n, _, _| Ok(n.clone())).is_err());
    }
}
