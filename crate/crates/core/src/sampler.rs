//! Diffusion posterior sampling on the EDM time discretisation, with posterior
//! averaging, per-pixel uncertainty and an analytic Gaussian-prior oracle.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::{adjoint, residual, KSpaceMeasurement};
use crate::phantoms::{ClassLabel, Image};
use crate::rng::{derive_seed, rng_from};
use crate::scorenet::{ScoreCheckpoint, ScoreNet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub n_t: usize,
    pub n_s: usize,
    /// Below this squared residual the likelihood step is skipped.
    pub likelihood_eps: f64,
    /// Scalar multiplier on the likelihood step (1 is the unweighted step).
    pub guidance_weight: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            sigma_min: 0.002,
            sigma_max: 5.0,
            rho: 7.0,
            n_t: 450,
            n_s: 5,
            likelihood_eps: 1e-12,
            guidance_weight: 1.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.sigma_min && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.rho > 0.0) || self.n_t < 2 || self.n_s < 1 {
            return Err(Error::Config("need rho > 0, N_t >= 2 and N_s >= 1".into()));
        }
        if !(self.likelihood_eps >= 0.0) || !self.guidance_weight.is_finite() {
            return Err(Error::Config("likelihood_eps and guidance_weight must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Stable hash of every field, recorded next to results for provenance.
    pub fn fingerprint(&self) -> String {
        let text = toml::to_string(self).expect("sampler config serializes");
        crate::io::sha256_hex(text.as_bytes())[..16].to_string()
    }
}

/// Noise level `t_i` of the sampler schedule; `t_{N_t+1}` is defined as 0.
pub fn sigma_schedule(i: usize, cfg: &SamplerConfig) -> Result<f64> {
    if i > cfg.n_t + 1 {
        return Err(Error::invalid(format!("schedule index {i} outside 0..={}", cfg.n_t + 1)));
    }
    if i == cfg.n_t + 1 {
        return Ok(0.0);
    }
    // Pin the endpoints so they are exact rather than rounded through the power.
    if i == 0 {
        return Ok(cfg.sigma_max);
    }
    if i == cfg.n_t {
        return Ok(cfg.sigma_min);
    }
    let inv = 1.0 / cfg.rho;
    let (a, b) = (cfg.sigma_max.powf(inv), cfg.sigma_min.powf(inv));
    Ok((a + i as f64 * (b - a) / cfg.n_t as f64).powf(cfg.rho))
}

/// A prior denoiser `E[x₀ | x]` usable by the sampler, with a vector-Jacobian
/// product for the likelihood gradient.
pub trait PriorDenoiser: Sync {
    fn denoise(&self, x: &Image, sigma: f64, class: Option<ClassLabel>) -> Result<Image>;

    /// Returns `x̂ = D(x)` and, when `cotangent(x̂)` yields `v`, `(∂x̂/∂x)ᵀ v`.
    fn denoise_vjp(
        &self,
        x: &Image,
        sigma: f64,
        class: Option<ClassLabel>,
        cotangent: &mut dyn FnMut(&Image) -> Result<Option<Image>>,
    ) -> Result<(Image, Option<Image>)>;
}

impl PriorDenoiser for ScoreNet {
    fn denoise(&self, x: &Image, sigma: f64, class: Option<ClassLabel>) -> Result<Image> {
        self.denoise_estimate(x, sigma, class)
    }

    fn denoise_vjp(
        &self,
        x: &Image,
        sigma: f64,
        class: Option<ClassLabel>,
        cotangent: &mut dyn FnMut(&Image) -> Result<Option<Image>>,
    ) -> Result<(Image, Option<Image>)> {
        ScoreNet::denoise_vjp(self, x, sigma, class, cotangent)
    }
}

impl PriorDenoiser for ScoreCheckpoint {
    fn denoise(&self, x: &Image, sigma: f64, class: Option<ClassLabel>) -> Result<Image> {
        self.net().denoise(x, sigma, class)
    }

    fn denoise_vjp(
        &self,
        x: &Image,
        sigma: f64,
        class: Option<ClassLabel>,
        cotangent: &mut dyn FnMut(&Image) -> Result<Option<Image>>,
    ) -> Result<(Image, Option<Image>)> {
        self.net().denoise_vjp(x, sigma, class, cotangent)
    }
}

/// Conjugate-Gaussian posterior mean `(var·x + σ²·mu)/(var + σ²)`, elementwise.
pub fn analytic_gaussian_denoiser(mu: &Image, var: &Image, x: &Image, sigma: f64) -> Result<Image> {
    if mu.dim() != var.dim() || mu.dim() != x.dim() {
        return Err(Error::invalid("mu, var and x must share one shape"));
    }
    if !(sigma > 0.0) || var.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::invalid("sigma and every variance must be positive"));
    }
    let s2 = sigma * sigma;
    let mut out = x.clone();
    ndarray::Zip::from(&mut out).and(mu).and(var).for_each(|o, &m, &v| {
        *o = (v * *o + s2 * m) / (v + s2);
    });
    Ok(out)
}

/// Exact denoiser for an independent Gaussian prior `N(mu, diag(var))`.
#[derive(Clone, Debug)]
pub struct GaussianPrior {
    pub mu: Image,
    pub var: Image,
}

impl PriorDenoiser for GaussianPrior {
    fn denoise(&self, x: &Image, sigma: f64, _class: Option<ClassLabel>) -> Result<Image> {
        analytic_gaussian_denoiser(&self.mu, &self.var, x, sigma)
    }

    fn denoise_vjp(
        &self,
        x: &Image,
        sigma: f64,
        _class: Option<ClassLabel>,
        cotangent: &mut dyn FnMut(&Image) -> Result<Option<Image>>,
    ) -> Result<(Image, Option<Image>)> {
        let xhat = analytic_gaussian_denoiser(&self.mu, &self.var, x, sigma)?;
        let s2 = sigma * sigma;
        // The Jacobian is diagonal: var / (var + σ²).
        let vjp = cotangent(&xhat)?.map(|mut v| {
            v.zip_mut_with(&self.var, |g, &var| *g *= var / (var + s2));
            v
        });
        Ok((xhat, vjp))
    }
}

fn check_finite(img: &Image, step: usize, what: &str) -> Result<()> {
    if img.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericalFailure {
            step,
            detail: format!("{what} is not finite"),
        })
    }
}

/// One sampler iteration `i ∈ 1..=N_t`: prior step plus normalised likelihood step.
pub fn dps_step(
    x: &Image,
    i: usize,
    y: &KSpaceMeasurement,
    class: Option<ClassLabel>,
    d: &(impl PriorDenoiser + ?Sized),
    cfg: &SamplerConfig,
) -> Result<Image> {
    let t_i = sigma_schedule(i, cfg)?;
    let t_next = sigma_schedule(i + 1, cfg)?;
    if !(t_i > 0.0) {
        return Err(Error::invalid(format!("step {i} has a non-positive noise level")));
    }
    let mut residual_err = None;
    let (xhat, grad) = d.denoise_vjp(x, t_i, class, &mut |xhat: &Image| {
        let (r, diff) = residual(xhat, y)?;
        if !r.is_finite() {
            residual_err = Some(r);
            return Ok(None);
        }
        if r < cfg.likelihood_eps {
            return Ok(None);
        }
        // ∇_x̂ r = 2·Aᴴ(A x̂ − y); the 1/√r normalisation is folded in here.
        let mut v = adjoint(&diff);
        let scale = 2.0 / r.sqrt();
        v.mapv_inplace(|g| g * scale);
        Ok(Some(v))
    })?;
    if let Some(r) = residual_err {
        return Err(Error::NumericalFailure {
            step: i,
            detail: format!("data residual is {r}"),
        });
    }
    check_finite(&xhat, i, "denoised estimate")?;
    let ratio = (t_next - t_i) / t_i;
    let mut out = x.clone();
    ndarray::Zip::from(&mut out).and(&xhat).for_each(|o, &h| *o += (*o - h) * ratio);
    if let Some(g) = grad {
        out.scaled_add(-cfg.guidance_weight, &g);
    }
    check_finite(&out, i, "iterate")?;
    Ok(out)
}

/// Draws the initial iterate `x₀ ~ N(0, σ_max²·I)`.
pub fn initial_iterate(shape: (usize, usize), cfg: &SamplerConfig, sample_seed: u64) -> Image {
    let mut rng = rng_from(sample_seed, &[0x696e6974]);
    Array2::from_shape_simple_fn(shape, || cfg.sigma_max * rng.sample::<f64, _>(StandardNormal))
}

/// One posterior sample: `N_t` steps of [`dps_step`] from a seeded initial iterate.
pub fn posterior_sample(
    y: &KSpaceMeasurement,
    class: Option<ClassLabel>,
    d: &(impl PriorDenoiser + ?Sized),
    cfg: &SamplerConfig,
    sample_seed: u64,
) -> Result<Image> {
    cfg.validate()?;
    let mut x = initial_iterate(y.values.dim(), cfg, sample_seed);
    for i in 1..=cfg.n_t {
        x = dps_step(&x, i, y, class, d, cfg)?;
    }
    Ok(x)
}

/// Seed of posterior sample `s` of a reconstruction.
pub fn sample_seed(cfg: &SamplerConfig, s: usize) -> u64 {
    derive_seed(cfg.seed, &[s as u64])
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorResult {
    pub mean_image: Image,
    pub samples: Option<Vec<Image>>,
    pub stddev_map: Option<Image>,
}

/// Mean and per-pixel sample standard deviation (`n − 1` denominator, zero for
/// a single sample). The mean is summed in sample order; the variance uses
/// deviations from the first sample, so identical samples give exactly zero.
pub fn sample_statistics(samples: &[Image]) -> Result<(Image, Image)> {
    let first = samples.first().ok_or_else(|| Error::invalid("no samples"))?;
    let n = samples.len() as f64;
    let mut mean = Array2::zeros(first.dim());
    for s in samples {
        mean += s;
    }
    mean.mapv_inplace(|v| v / n);
    let mut std = Array2::<f64>::zeros(first.dim());
    if samples.len() > 1 {
        let mut sum = Array2::<f64>::zeros(first.dim());
        let mut sum_sq = Array2::<f64>::zeros(first.dim());
        for s in samples {
            ndarray::Zip::from(&mut sum).and(&mut sum_sq).and(s).and(first).for_each(|a, b, &x, &x0| {
                *a += x - x0;
                *b += (x - x0) * (x - x0);
            });
        }
        ndarray::Zip::from(&mut std).and(&sum).and(&sum_sq).for_each(|o, &a, &b| {
            *o = ((b - a * a / n) / (n - 1.0)).max(0.0).sqrt();
        });
    }
    Ok((mean, std))
}

/// Runs one posterior sample per seed (in parallel) and averages them.
pub fn reconstruct_with_seeds(
    y: &KSpaceMeasurement,
    class: Option<ClassLabel>,
    d: &(impl PriorDenoiser + ?Sized),
    cfg: &SamplerConfig,
    seeds: &[u64],
) -> Result<PosteriorResult> {
    let samples = seeds
        .par_iter()
        .map(|&s| posterior_sample(y, class, d, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let (mean, std) = sample_statistics(&samples)?;
    Ok(PosteriorResult {
        mean_image: mean,
        samples: Some(samples),
        stddev_map: Some(std),
    })
}

/// Posterior averaging: the mean of `N_s` posterior samples with seeds derived from `cfg.seed`.
pub fn reconstruct(
    y: &KSpaceMeasurement,
    class: Option<ClassLabel>,
    d: &(impl PriorDenoiser + ?Sized),
    cfg: &SamplerConfig,
) -> Result<PosteriorResult> {
    cfg.validate()?;
    let seeds: Vec<u64> = (0..cfg.n_s).map(|s| sample_seed(cfg, s)).collect();
    reconstruct_with_seeds(y, class, d, cfg, &seeds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{forward, make_echo_train_mask, MaskMode, SamplingMask};
    use approx::assert_abs_diff_eq;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let cfg = SamplerConfig::default();
        assert_eq!(sigma_schedule(0, &cfg).unwrap(), 5.0);
        assert_eq!(sigma_schedule(450, &cfg).unwrap(), 0.002);
        assert_eq!(sigma_schedule(451, &cfg).unwrap(), 0.0);
        let mid = ((5f64.powf(1.0 / 7.0) + 0.002f64.powf(1.0 / 7.0)) / 2.0).powi(7);
        assert_abs_diff_eq!(sigma_schedule(225, &cfg).unwrap(), mid, epsilon = 1e-12);
        assert!((mid - 0.2832).abs() < 5e-4);
        assert!(sigma_schedule(452, &cfg).is_err());
        for i in 0..=450 {
            assert!(sigma_schedule(i + 1, &cfg).unwrap() < sigma_schedule(i, &cfg).unwrap());
        }
    }

    #[test]
    fn analytic_denoiser_cases() {
        let one = |v: f64| Array2::from_elem((1, 1), v);
        let out = analytic_gaussian_denoiser(&one(0.0), &one(1.0), &one(2.0), 1.0).unwrap();
        assert_abs_diff_eq!(out[[0, 0]], 1.0, epsilon = 1e-15);
        let out = analytic_gaussian_denoiser(&one(0.3), &one(1.0), &one(2.0), 1e-9).unwrap();
        assert_abs_diff_eq!(out[[0, 0]], 2.0, epsilon = 1e-12);
        let out = analytic_gaussian_denoiser(&one(0.3), &one(1.0), &one(2.0), 1e6).unwrap();
        assert_abs_diff_eq!(out[[0, 0]], 0.3, epsilon = 1e-4);
        assert!(analytic_gaussian_denoiser(&one(0.0), &one(0.0), &one(1.0), 1.0).is_err());
    }

    struct Identity;

    impl PriorDenoiser for Identity {
        fn denoise(&self, x: &Image, _: f64, _: Option<ClassLabel>) -> Result<Image> {
            Ok(x.clone())
        }

        fn denoise_vjp(
            &self,
            x: &Image,
            _: f64,
            _: Option<ClassLabel>,
            cot: &mut dyn FnMut(&Image) -> Result<Option<Image>>,
        ) -> Result<(Image, Option<Image>)> {
            Ok((x.clone(), cot(x)?))
        }
    }

    #[test]
    fn fixed_point_denoiser_has_no_prior_step() {
        let cfg = SamplerConfig {
            n_t: 10,
            ..Default::default()
        };
        let x = Array2::from_shape_fn((4, 4), |(r, c)| (r * 4 + c) as f64 * 0.1);
        let mask = SamplingMask::full(4).unwrap();
        // Data-consistent: r = 0, so both terms vanish.
        let y = forward(&x, &mask).unwrap();
        let out = dps_step(&x, 3, &y, None, &Identity, &cfg).unwrap();
        assert_eq!(out, x);
        // Inconsistent data: only the likelihood step moves the iterate, by 2 in norm.
        let y0 = forward(&Array2::zeros((4, 4)), &mask).unwrap();
        let out = dps_step(&x, 3, &y0, None, &Identity, &cfg).unwrap();
        let moved = (&out - &x).mapv(|v| v * v).sum().sqrt();
        assert_abs_diff_eq!(moved, 2.0, epsilon = 1e-9);
    }

    #[test]
    fn two_pixel_step_by_hand() {
        let cfg = SamplerConfig {
            n_t: 4,
            ..Default::default()
        };
        let prior = GaussianPrior {
            mu: Array2::from_shape_vec((2, 1), vec![0.5, -0.5]).unwrap(),
            var: Array2::from_shape_vec((2, 1), vec![1.0, 0.25]).unwrap(),
        };
        let truth = Array2::from_shape_vec((2, 1), vec![1.0, 0.0]).unwrap();
        let y = forward(&truth, &SamplingMask::full(2).unwrap()).unwrap();
        let x = Array2::from_shape_vec((2, 1), vec![2.0, 1.0]).unwrap();
        let i = 2;
        let (t, tn) = (sigma_schedule(2, &cfg).unwrap(), sigma_schedule(3, &cfg).unwrap());
        // Closed form: x̂ = (v·x + t²·mu)/(v + t²), J = v/(v + t²); with a unitary
        // full-sampling operator r = ‖x̂ − truth‖² and ∇r = 2J(x̂ − truth).
        let mut expected = [0.0; 2];
        let mut xhat = [0.0; 2];
        let mut jac = [0.0; 2];
        let (mu, var, xv, tr) = ([0.5, -0.5], [1.0, 0.25], [2.0, 1.0], [1.0, 0.0]);
        for k in 0..2 {
            xhat[k] = (var[k] * xv[k] + t * t * mu[k]) / (var[k] + t * t);
            jac[k] = var[k] / (var[k] + t * t);
        }
        let r: f64 = (0..2).map(|k| (xhat[k] - tr[k]).powi(2)).sum();
        for k in 0..2 {
            let dp = (xv[k] - xhat[k]) / t * (tn - t);
            let dl = -2.0 * jac[k] * (xhat[k] - tr[k]) / r.sqrt();
            expected[k] = xv[k] + dp + dl;
        }
        let out = dps_step(&x, i, &y, None, &prior, &cfg).unwrap();
        assert_abs_diff_eq!(out[[0, 0]], expected[0], epsilon = 1e-12);
        assert_abs_diff_eq!(out[[1, 0]], expected[1], epsilon = 1e-12);
    }

    fn oracle_setup() -> (GaussianPrior, KSpaceMeasurement) {
        let prior = GaussianPrior {
            mu: Array2::from_shape_fn((8, 8), |(r, c)| 2.0 + 0.1 * ((r + 2 * c) % 5) as f64),
            var: Array2::from_elem((8, 8), 0.05),
        };
        let truth = Array2::from_shape_fn((8, 8), |(r, c)| 2.0 + 0.05 * (r as f64 - c as f64));
        let mask = make_echo_train_mask(8, 2, 2.0, 4, MaskMode::Fse).unwrap();
        (prior, forward(&truth, &mask).unwrap())
    }

    #[test]
    fn sampling_is_seeded() {
        let (prior, y) = oracle_setup();
        let cfg = SamplerConfig {
            n_t: 20,
            n_s: 3,
            ..Default::default()
        };
        let a = posterior_sample(&y, None, &prior, &cfg, 5).unwrap();
        assert_eq!(a, posterior_sample(&y, None, &prior, &cfg, 5).unwrap());
        let b = posterior_sample(&y, None, &prior, &cfg, 6).unwrap();
        assert!((&a - &b).mapv(f64::abs).sum() > 0.0);

        let res = reconstruct(&y, None, &prior, &cfg).unwrap();
        let manual: Vec<Image> = (0..3)
            .map(|s| posterior_sample(&y, None, &prior, &cfg, sample_seed(&cfg, s)).unwrap())
            .collect();
        let (mean, _) = sample_statistics(&manual).unwrap();
        assert_eq!(res.mean_image, mean);
        assert!(res.stddev_map.unwrap().iter().all(|v| *v >= 0.0));

        let single = SamplerConfig { n_s: 1, ..cfg.clone() };
        let res = reconstruct(&y, None, &prior, &single).unwrap();
        assert_eq!(res.mean_image, res.samples.as_ref().unwrap()[0]);

        let same = reconstruct_with_seeds(&y, None, &prior, &cfg, &[9, 9, 9]).unwrap();
        assert!(same.stddev_map.unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn non_finite_iterate_is_a_numerical_failure() {
        let (prior, y) = oracle_setup();
        let cfg = SamplerConfig {
            n_t: 5,
            ..Default::default()
        };
        let x = Array2::from_elem((8, 8), f64::NAN);
        assert!(matches!(
            dps_step(&x, 2, &y, None, &prior, &cfg),
            Err(Error::NumericalFailure { step: 2, .. })
        ));
    }
}
