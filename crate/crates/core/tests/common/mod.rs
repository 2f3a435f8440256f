//! Shared fixtures for the integration tests and the acceptance run.
#![allow(dead_code)]

use dps_mri::operators::{adjoint, forward, make_echo_train_mask, residual, KSpaceMeasurement, MaskMode, SamplingMask};
use dps_mri::phantoms::{generate_dataset, ClassLabel, Dataset, DatasetConfig, Image, SplitCounts};
use dps_mri::rng::rng_from;
use dps_mri::sampler::GaussianPrior;
use dps_mri::scorenet::{train_score_model, Regime, ScoreCheckpoint, ScoreModelConfig, TrainConfig};
use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gaussian_image(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Image {
    Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

pub fn norm(x: &Image) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn rel_err(a: &Image, b: &Image) -> f64 {
    norm(&(a - b)) / norm(b)
}

/// A random FSE or SE mask for an `n`-line image, or full sampling.
pub fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> SamplingMask {
    if rng.random_bool(0.15) {
        return SamplingMask::full(n).unwrap();
    }
    let target = rng.random_range(1.2..3.0);
    let seed = rng.random();
    if rng.random_bool(0.5) {
        make_echo_train_mask(n, 1, target, seed, MaskMode::Se).unwrap()
    } else {
        let etl = rng.random_range(2..=(n / 4).max(2));
        make_echo_train_mask(n, etl, target, seed, MaskMode::Fse).unwrap()
    }
}

/// Relative mismatch `|⟨A x, y⟩ − ⟨x, Aᴴ y⟩| / (‖A x‖·‖y‖)` for random `x` and `y`.
pub fn adjoint_mismatch(shape: (usize, usize), mask: &SamplingMask, seed: u64) -> f64 {
    let mut rng = rng_from(seed, &[0]);
    let x = gaussian_image(&mut rng, shape);
    let ax = forward(&x, mask).unwrap();
    let values = Array2::from_shape_simple_fn(shape, || {
        Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
    });
    let y = KSpaceMeasurement::from_parts(values, mask.clone(), 0.0).unwrap();
    let lhs = dps_mri::operators::kspace_inner(&ax.values, &y.values);
    let rhs: f64 = x.iter().zip(adjoint(&y).iter()).map(|(a, b)| a * b).sum();
    let scale = dps_mri::operators::kspace_norm_sq(&ax.values).sqrt()
        * dps_mri::operators::kspace_norm_sq(&y.values).sqrt();
    (lhs - rhs).abs() / scale
}

/// The 16×16 linear-Gaussian test problem: a smooth prior mean around 2 with
/// per-pixel standard deviations between 0.2 and 0.27, and a truth drawn from
/// that prior.
pub fn oracle_problem(seed: u64) -> (GaussianPrior, Image) {
    scaled_oracle_problem(seed, 1.0)
}

/// [`oracle_problem`] with intensities (means and standard deviations) multiplied by `scale`.
pub fn scaled_oracle_problem(seed: u64, scale: f64) -> (GaussianPrior, Image) {
    let n = 16;
    let mu = Array2::from_shape_fn((n, n), |(r, c)| {
        scale * (2.0 + 0.8 * ((r as f64 / 3.0).sin() * (c as f64 / 4.0).cos()))
    });
    let var = Array2::from_shape_fn((n, n), |(r, c)| scale * scale * 0.04 * (1.0 + 0.5 * ((r * 7 + c * 3) % 5) as f64 / 4.0));
    let mut rng = rng_from(seed, &[0]);
    let truth = Array2::from_shape_fn((n, n), |(r, c)| {
        mu[[r, c]] + var[[r, c]].sqrt() * rng.sample::<f64, _>(StandardNormal)
    });
    (GaussianPrior { mu, var }, truth)
}

/// Closed-form posterior mean `(AᵀA/σ_d² + diag(1/var))⁻¹ (Aᵀy/σ_d² + mu/var)` by dense Cholesky solve.
pub fn dense_posterior_mean(prior: &GaussianPrior, y: &KSpaceMeasurement, sigma_d: f64) -> Image {
    let (h, w) = prior.mu.dim();
    let m = h * w;
    let s2 = sigma_d * sigma_d;
    let mut lhs = DMatrix::zeros(m, m);
    for k in 0..m {
        let mut e = Array2::zeros((h, w));
        e[[k / w, k % w]] = 1.0;
        let col = adjoint(&forward(&e, &y.mask).unwrap());
        for (j, v) in col.iter().enumerate() {
            lhs[(j, k)] = v / s2;
        }
    }
    let aty = adjoint(y);
    let mut rhs = DVector::zeros(m);
    for j in 0..m {
        let (r, c) = (j / w, j % w);
        lhs[(j, j)] += 1.0 / prior.var[[r, c]];
        rhs[j] = aty[[r, c]] / s2 + prior.mu[[r, c]] / prior.var[[r, c]];
    }
    let sol = lhs.cholesky().expect("posterior precision is positive definite").solve(&rhs);
    Array2::from_shape_fn((h, w), |(r, c)| sol[r * w + c])
}

/// A small synthetic dataset with every class present.
pub fn tiny_dataset(seed: u64, train: usize) -> Dataset {
    generate_dataset(&DatasetConfig {
        seed,
        per_class: SplitCounts { train, val: 2, test: 3 },
        sizes: vec![64],
        ..DatasetConfig::default()
    })
    .unwrap()
}

pub fn tiny_model_config() -> ScoreModelConfig {
    let mut cfg = ScoreModelConfig::desk((16, 16));
    cfg.base_channels = 8;
    cfg.embed_dim = 16;
    cfg
}

/// A base-8, 16×16 class-embedding model after a few optimizer steps.
pub fn tiny_trained_model(seed: u64, steps: usize) -> ScoreCheckpoint {
    let data = tiny_dataset(seed, 3);
    let train = TrainConfig {
        steps,
        batch_size: 4,
        warmup_steps: 2,
        log_every: steps,
        max_val_items: 4,
        seed,
        ..TrainConfig::default()
    };
    train_score_model(&data, &tiny_model_config(), &train, Regime::AllEmbed).unwrap()
}

/// `f(x) = ‖A·D(x; σ, C) − y‖²` and its gradient by back-propagation.
pub fn data_term_and_grad(
    ck: &ScoreCheckpoint,
    x: &Image,
    sigma: f64,
    class: Option<ClassLabel>,
    y: &KSpaceMeasurement,
) -> (f64, Image) {
    let mut value = 0.0;
    let (_, grad) = ck
        .net()
        .denoise_vjp(x, sigma, class, &mut |xhat| {
            let (r, diff) = residual(xhat, y)?;
            value = r;
            Ok(Some(adjoint(&diff).mapv(|g| 2.0 * g)))
        })
        .unwrap();
    (value, grad.unwrap())
}

/// Worst relative error between the back-propagated directional derivative of
/// the data term and a central finite difference, over `probes` random
/// directions.
pub fn gradient_check(ck: &ScoreCheckpoint, probes: usize, seed: u64) -> f64 {
    let mut rng = rng_from(seed, &[1]);
    let shape = (16, 16);
    let mask = make_echo_train_mask(16, 2, 2.0, seed, MaskMode::Fse).unwrap();
    let truth = gaussian_image(&mut rng, shape).mapv(|v| 0.3 + 0.1 * v);
    let y = forward(&truth, &mask).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for p in 0..probes {
        let sigma = [0.05, 0.3, 1.0, 3.0][p % 4];
        let class = ClassLabel::ALL[p % 4];
        let x = &truth + &gaussian_image(&mut rng, shape).mapv(|v| sigma * v);
        let dir = gaussian_image(&mut rng, shape);
        let dir = dir.mapv(|v| v / norm(&dir) * 16.0);
        let (_, grad) = data_term_and_grad(ck, &x, sigma, Some(class), &y);
        let analytic: f64 = grad.iter().zip(dir.iter()).map(|(a, b)| a * b).sum();
        let f = |t: f64| data_term_and_grad(ck, &(&x + &dir.mapv(|v| v * t)), sigma, Some(class), &y).0;
        let numeric = (f(h) - f(-h)) / (2.0 * h);
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12));
    }
    worst
}

/// A complete but tiny pipeline: every stage runs, on a few slices with
/// a handful of optimizer and sampler steps.
pub fn tiny_pipeline_config(seed: u64) -> dps_mri::harness::PipelineConfig {
    use dps_mri::harness::{Baseline, PipelineConfig};
    let mut cfg = PipelineConfig { seed, ..PipelineConfig::default() };
    cfg.data.per_class = SplitCounts { train: 2, val: 1, test: 2 };
    cfg.data.sizes = vec![48];
    cfg.denoiser.arch = ScoreModelConfig::desk((16, 16));
    cfg.denoiser.arch.base_channels = 8;
    cfg.denoiser.arch.use_class_embedding = false;
    cfg.denoiser.train = TrainConfig { steps: 2, batch_size: 2, warmup_steps: 1, log_every: 2, max_val_items: 2, ..TrainConfig::default() };
    cfg.score_model = tiny_model_config();
    cfg.score_train = cfg.denoiser.train.clone();
    cfg.experiment.baselines = vec![Baseline::L1Wavelet, Baseline::ZeroFilled];
    cfg.experiment.max_slices = Some(4);
    cfg.experiment.ns_sweep = vec![1, 2];
    cfg.experiment.sampler.n_t = 4;
    cfg.experiment.sampler.n_s = 2;
    cfg.experiment.cs.n_iters = 5;
    cfg.sweep_max_slices = Some(4);
    cfg
}
