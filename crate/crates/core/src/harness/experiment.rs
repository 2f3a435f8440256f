//! Experiment orchestration: the embeddings × denoising ablation and the
//! posterior-averaging sweep over held-out slices.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::nrmse;
use crate::baseline::{l1_wavelet_reconstruct, CSConfig};
use crate::error::{Error, Result};
use crate::operators::{add_measurement_noise, forward, make_echo_train_mask, zero_filled, KSpaceMeasurement, MaskMode, SamplingMask};
use crate::phantoms::{load_dataset, ClassLabel, Dataset, Image, Split};
use crate::rng::{derive_seed, rng_from};
use crate::sampler::{reconstruct_with_seeds, sample_seed, sample_statistics, SamplerConfig};
use crate::scorenet::ScoreCheckpoint;

const MASK_STREAM: u64 = 0x6d61736b;
const NOISE_STREAM: u64 = 0x6e6f6973;

/// Method name used for diffusion reconstructions in result tables.
pub const DPS_METHOD: &str = "dps";
/// Regime column of rows produced by non-learned baselines.
pub const NO_REGIME: &str = "none";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegimeKind {
    PerClass,
    All,
    AllEmbed,
}

impl RegimeKind {
    pub fn name(self) -> &'static str {
        match self {
            RegimeKind::PerClass => "per-class",
            RegimeKind::All => "all",
            RegimeKind::AllEmbed => "all-embed",
        }
    }
}

/// Whether a model was trained on the raw noisy images or on their denoised versions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainingData {
    Denoised,
    Raw,
}

impl TrainingData {
    pub fn name(self) -> &'static str {
        match self {
            TrainingData::Denoised => "denoised",
            TrainingData::Raw => "raw",
        }
    }
}

/// A trained prior to evaluate. `all` and `all-embed` use `checkpoint`;
/// `per-class` uses one entry of `per_class` per class name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub regime: RegimeKind,
    pub data: TrainingData,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_class: BTreeMap<ClassLabel, PathBuf>,
}

impl ModelSpec {
    /// Regime column value, e.g. `all-embed/denoised`.
    pub fn label(&self) -> String {
        format!("{}/{}", self.regime.name(), self.data.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    L1Wavelet,
    ZeroFilled,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::L1Wavelet => "l1-wavelet",
            Baseline::ZeroFilled => "zero-filled",
        }
    }
}

/// Image the NRMSE is computed against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reference {
    /// The stored fully-sampled (noisy) image the measurement was taken from.
    FullySampled,
    /// The noiseless synthetic ground truth, when the dataset has one.
    Clean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Dataset directory; slices come from its `split`.
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    pub split: Split,
    /// Cap on the number of slices, drawn round-robin over classes.
    pub max_slices: Option<usize>,
    pub models: Vec<ModelSpec>,
    pub baselines: Vec<Baseline>,
    pub r_targets: Vec<f64>,
    pub ns_sweep: Vec<usize>,
    /// Acceleration used by the averaging sweep.
    pub sweep_r: f64,
    /// Index into `models` of the prior used by the averaging sweep.
    pub sweep_model: usize,
    /// Echo-train lengths drawn per slice for fast-spin-echo classes.
    pub etl_choices: Vec<usize>,
    /// Extra complex Gaussian measurement noise; the stored images are already noisy.
    pub sigma_d: f64,
    pub reference: Reference,
    pub record_wall_time: bool,
    /// Seeds the per-slice masks and measurement noise.
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub cs: CSConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            output_dir: PathBuf::from("results"),
            split: Split::Test,
            max_slices: None,
            models: Vec::new(),
            baselines: Vec::new(),
            r_targets: vec![1.5, 2.0],
            ns_sweep: vec![1, 2, 3, 4, 5],
            sweep_r: 2.0,
            sweep_model: 0,
            etl_choices: vec![4, 6, 8],
            sigma_d: 0.0,
            reference: Reference::FullySampled,
            record_wall_time: false,
            seed: 0,
            sampler: SamplerConfig::default(),
            cs: CSConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() && self.baselines.is_empty() {
            return Err(Error::Config("no models or baselines to evaluate".into()));
        }
        if self.r_targets.is_empty() {
            return Err(Error::Config("the target acceleration list is empty".into()));
        }
        for &r in self.r_targets.iter().chain([&self.sweep_r]) {
            if !(r > 1.0 && r <= 4.0) {
                return Err(Error::Config(format!("target acceleration {r} outside (1, 4]")));
            }
        }
        if self.ns_sweep.is_empty() || self.ns_sweep.contains(&0) {
            return Err(Error::Config("N_s sweep must be a nonempty list of positive counts".into()));
        }
        if self.etl_choices.is_empty() || self.etl_choices.contains(&0) {
            return Err(Error::Config("etl_choices must be a nonempty list of positive lengths".into()));
        }
        if !(self.sigma_d >= 0.0 && self.sigma_d.is_finite()) {
            return Err(Error::Config(format!("sigma_d must be non-negative, got {}", self.sigma_d)));
        }
        if self.max_slices == Some(0) {
            return Err(Error::Config("max_slices must be positive".into()));
        }
        self.sampler.validate()?;
        self.cs.validate()
    }
}

/// One row of a result table.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub slice_id: String,
    pub class: ClassLabel,
    pub method: String,
    pub regime: String,
    pub r_target: f64,
    pub r_achieved: f64,
    pub n_s: usize,
    pub nrmse: f64,
    pub wall_time_s: f64,
    /// Weights hash of the checkpoint used (diffusion rows only).
    pub checkpoint_sha256: Option<String>,
    /// Fingerprint of the sampler configuration (diffusion rows only).
    pub sampler_fingerprint: Option<String>,
}

/// The mask a slice was measured with at one target acceleration.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceMask {
    pub slice_id: String,
    pub r_target: f64,
    pub mask: SamplingMask,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentResult {
    pub rows: Vec<ResultRow>,
    pub masks: Vec<SliceMask>,
}

fn row_key(r: &ResultRow) -> (&str, &str, f64, usize, &str) {
    (&r.slice_id, &r.method, r.r_target, r.n_s, &r.regime)
}

impl ExperimentResult {
    /// Sorts rows by (slice_id, method, R_target, N_s, regime) and masks by
    /// (slice_id, R_target), so parallel runs give identical tables.
    pub fn canonicalize(&mut self) {
        self.rows.sort_by(|a, b| {
            let (ka, kb) = (row_key(a), row_key(b));
            ka.0.cmp(kb.0)
                .then_with(|| ka.1.cmp(kb.1))
                .then_with(|| ka.2.total_cmp(&kb.2))
                .then_with(|| ka.3.cmp(&kb.3))
                .then_with(|| ka.4.cmp(kb.4))
        });
        self.masks
            .sort_by(|a, b| a.slice_id.cmp(&b.slice_id).then_with(|| a.r_target.total_cmp(&b.r_target)));
        self.masks.dedup_by(|a, b| a.slice_id == b.slice_id && a.r_target == b.r_target);
    }

    /// Concatenates two results and re-canonicalizes.
    pub fn merge(mut self, other: ExperimentResult) -> ExperimentResult {
        self.rows.extend(other.rows);
        self.masks.extend(other.masks);
        self.canonicalize();
        self
    }

    /// NRMSE values of the rows matching `filter`, keyed by slice id.
    pub fn nrmse_by_slice(&self, filter: impl Fn(&ResultRow) -> bool) -> BTreeMap<String, f64> {
        self.rows.iter().filter(|r| filter(r)).map(|r| (r.slice_id.clone(), r.nrmse)).collect()
    }
}

/// A held-out slice with its measurement source and NRMSE reference.
#[derive(Clone, Debug)]
pub struct TestSlice {
    /// Position within the split, used to derive per-slice seeds.
    pub index: usize,
    pub id: String,
    pub label: ClassLabel,
    pub image: Image,
    pub reference: Image,
}

/// Slices of `split`, capped at `max_slices` by taking classes in turn.
pub fn select_slices(data: &Dataset, split: Split, max_slices: Option<usize>, reference: Reference) -> Result<Vec<TestSlice>> {
    let mut by_class: BTreeMap<ClassLabel, Vec<TestSlice>> = BTreeMap::new();
    for (index, item) in data.split(split).enumerate() {
        let reference = match reference {
            Reference::FullySampled => item.sample.pixels.clone(),
            Reference::Clean => item
                .clean
                .clone()
                .ok_or_else(|| Error::Config(format!("slice {} has no clean ground truth", item.id)))?,
        };
        by_class.entry(item.sample.label).or_default().push(TestSlice {
            index,
            id: item.id.clone(),
            label: item.sample.label,
            image: item.sample.pixels.clone(),
            reference,
        });
    }
    let limit = max_slices.unwrap_or(usize::MAX);
    let mut queues: Vec<std::vec::IntoIter<TestSlice>> = by_class.into_values().map(Vec::into_iter).collect();
    let mut out = Vec::new();
    while out.len() < limit {
        let before = out.len();
        for q in queues.iter_mut() {
            if out.len() < limit {
                out.extend(q.next());
            }
        }
        if out.len() == before {
            break;
        }
    }
    if out.is_empty() {
        return Err(Error::Config(format!("the {} split has no slices", split.name())));
    }
    Ok(out)
}

/// Per-slice echo-train mask: a seeded ETL draw for fast-spin-echo classes and
/// single-line trains for spin echo.
pub fn slice_mask(cfg: &ExperimentConfig, slice: &TestSlice, r_target: f64) -> Result<SamplingMask> {
    let mut rng = rng_from(cfg.seed, &[MASK_STREAM, slice.index as u64, r_target.to_bits()]);
    let (etl, mode) = if slice.label.is_fse() {
        (cfg.etl_choices[rng.random_range(0..cfg.etl_choices.len())], MaskMode::Fse)
    } else {
        (1, MaskMode::Se)
    };
    make_echo_train_mask(slice.image.nrows(), etl, r_target, rng.random(), mode)
}

/// Undersampled measurement of `slice` (plus optional extra noise).
pub fn measure_slice(cfg: &ExperimentConfig, slice: &TestSlice, mask: &SamplingMask) -> Result<KSpaceMeasurement> {
    let y = forward(&slice.image, mask)?;
    if cfg.sigma_d > 0.0 {
        let seed = derive_seed(cfg.seed, &[NOISE_STREAM, slice.index as u64, mask.r.to_bits()]);
        add_measurement_noise(&y, cfg.sigma_d, seed)
    } else {
        Ok(y)
    }
}

/// Posterior-sample seeds for one slice at one acceleration. They depend on the
/// sampler seed but not on the model, so regimes are compared on common noise.
pub fn slice_sample_seeds(sampler: &SamplerConfig, slice: &TestSlice, r_target: f64, n: usize) -> Vec<u64> {
    (0..n)
        .map(|s| derive_seed(sample_seed(sampler, s), &[slice.index as u64, r_target.to_bits()]))
        .collect()
}

/// A model spec with its checkpoints loaded.
pub struct LoadedModel {
    pub spec: ModelSpec,
    shared: Option<(ScoreCheckpoint, String)>,
    per_class: BTreeMap<ClassLabel, (ScoreCheckpoint, String)>,
}

impl fmt::Debug for LoadedModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LoadedModel").field("regime", &self.spec.label()).finish()
    }
}

fn load_checked(path: &Path, spec: &ModelSpec) -> Result<(ScoreCheckpoint, String)> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "regime {}: checkpoint {} does not exist",
            spec.label(),
            path.display()
        )));
    }
    let ckpt = ScoreCheckpoint::load(path)?;
    if ckpt.regime.name() != spec.regime.name() {
        return Err(Error::Config(format!(
            "regime {}: checkpoint {} was trained as {}",
            spec.label(),
            path.display(),
            ckpt.regime
        )));
    }
    let sha = ckpt.sha256();
    Ok((ckpt, sha))
}

impl LoadedModel {
    pub fn load(spec: &ModelSpec) -> Result<Self> {
        let mut model = LoadedModel {
            spec: spec.clone(),
            shared: None,
            per_class: BTreeMap::new(),
        };
        match spec.regime {
            RegimeKind::PerClass => {
                for (&class, path) in &spec.per_class {
                    model.per_class.insert(class, load_checked(path, spec)?);
                }
            }
            RegimeKind::All | RegimeKind::AllEmbed => {
                let path = spec.checkpoint.as_ref().ok_or_else(|| {
                    Error::Config(format!("regime {}: no checkpoint configured", spec.label()))
                })?;
                model.shared = Some(load_checked(path, spec)?);
            }
        }
        Ok(model)
    }

    /// Checkpoint (and its hash) used for slices of `class`.
    pub fn for_class(&self, class: ClassLabel) -> Result<(&ScoreCheckpoint, &str)> {
        let found = match &self.shared {
            Some(shared) => Some(shared),
            None => self.per_class.get(&class),
        };
        found.map(|(c, s)| (c, s.as_str())).ok_or_else(|| {
            Error::Config(format!("regime {}: no checkpoint for class {class}", self.spec.label()))
        })
    }
}

fn load_models(cfg: &ExperimentConfig, slices: &[TestSlice]) -> Result<Vec<LoadedModel>> {
    let models = cfg.models.iter().map(LoadedModel::load).collect::<Result<Vec<_>>>()?;
    // Fail before any reconstruction if a needed per-class model is missing.
    for m in &models {
        for s in slices {
            m.for_class(s.label)?;
        }
    }
    Ok(models)
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let out = f()?;
    Ok((out, start.elapsed().as_secs_f64()))
}

struct SliceContext<'a> {
    cfg: &'a ExperimentConfig,
    slice: &'a TestSlice,
    mask: &'a SamplingMask,
    r_target: f64,
}

impl SliceContext<'_> {
    fn row(&self, method: &str, regime: String, n_s: usize, recon: &Image, secs: f64) -> Result<ResultRow> {
        Ok(ResultRow {
            slice_id: self.slice.id.clone(),
            class: self.slice.label,
            method: method.to_string(),
            regime,
            r_target: self.r_target,
            r_achieved: self.mask.r,
            n_s,
            nrmse: nrmse(recon, &self.slice.reference)?,
            wall_time_s: if self.cfg.record_wall_time { secs } else { 0.0 },
            checkpoint_sha256: None,
            sampler_fingerprint: None,
        })
    }
}

fn baseline_rows(ctx: &SliceContext<'_>, y: &KSpaceMeasurement) -> Result<Vec<ResultRow>> {
    ctx.cfg
        .baselines
        .iter()
        .map(|b| {
            let (img, secs) = match b {
                Baseline::L1Wavelet => timed(|| l1_wavelet_reconstruct(y, &ctx.cfg.cs))?,
                Baseline::ZeroFilled => timed(|| Ok(zero_filled(y)))?,
            };
            // A deterministic baseline is a single reconstruction.
            ctx.row(b.name(), NO_REGIME.to_string(), 1, &img, secs)
        })
        .collect()
}

fn ablation_slice(cfg: &ExperimentConfig, models: &[LoadedModel], slice: &TestSlice) -> Result<ExperimentResult> {
    let mut out = ExperimentResult::default();
    let fingerprint = cfg.sampler.fingerprint();
    for &r_target in &cfg.r_targets {
        let mask = slice_mask(cfg, slice, r_target)?;
        let y = measure_slice(cfg, slice, &mask)?;
        let ctx = SliceContext {
            cfg,
            slice,
            mask: &mask,
            r_target,
        };
        let seeds = slice_sample_seeds(&cfg.sampler, slice, r_target, cfg.sampler.n_s);
        for m in models {
            let (ckpt, sha) = m.for_class(slice.label)?;
            let (res, secs) = timed(|| reconstruct_with_seeds(&y, Some(slice.label), ckpt, &cfg.sampler, &seeds))?;
            let mut row = ctx.row(DPS_METHOD, m.spec.label(), cfg.sampler.n_s, &res.mean_image, secs)?;
            row.checkpoint_sha256 = Some(sha.to_string());
            row.sampler_fingerprint = Some(fingerprint.clone());
            out.rows.push(row);
        }
        out.rows.extend(baseline_rows(&ctx, &y)?);
        out.masks.push(SliceMask {
            slice_id: slice.id.clone(),
            r_target,
            mask,
        });
    }
    Ok(out)
}

fn prepare(cfg: &ExperimentConfig) -> Result<(Vec<TestSlice>, Vec<LoadedModel>)> {
    cfg.validate()?;
    let data = load_dataset(&cfg.dataset)?;
    let slices = select_slices(&data, cfg.split, cfg.max_slices, cfg.reference)?;
    let models = load_models(cfg, &slices)?;
    Ok((slices, models))
}

fn collect(parts: Vec<ExperimentResult>) -> ExperimentResult {
    let mut out = parts.into_iter().fold(ExperimentResult::default(), |mut acc, p| {
        acc.rows.extend(p.rows);
        acc.masks.extend(p.masks);
        acc
    });
    out.canonicalize();
    out
}

/// Every slice × target acceleration × configured model (and baseline). The
/// same checkpoints and sampler settings serve every acceleration.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let (slices, models) = prepare(cfg)?;
    let parts = slices
        .par_iter()
        .map(|s| ablation_slice(cfg, &models, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(collect(parts))
}

/// Posterior samples for the sweep and the rows derived from their running means.
fn sweep_slice(cfg: &ExperimentConfig, model: &LoadedModel, slice: &TestSlice) -> Result<ExperimentResult> {
    let r_target = cfg.sweep_r;
    let mask = slice_mask(cfg, slice, r_target)?;
    let y = measure_slice(cfg, slice, &mask)?;
    let (ckpt, sha) = model.for_class(slice.label)?;
    let n_max = *cfg.ns_sweep.iter().max().expect("validated nonempty");
    let seeds = slice_sample_seeds(&cfg.sampler, slice, r_target, n_max);
    let (res, secs) = timed(|| reconstruct_with_seeds(&y, Some(slice.label), ckpt, &cfg.sampler, &seeds))?;
    let samples = res.samples.expect("reconstruct_with_seeds keeps samples");
    let ctx = SliceContext {
        cfg,
        slice,
        mask: &mask,
        r_target,
    };
    let fingerprint = cfg.sampler.fingerprint();
    let mut out = ExperimentResult::default();
    for &k in &cfg.ns_sweep {
        let (mean, _) = sample_statistics(&samples[..k])?;
        let mut row = ctx.row(DPS_METHOD, model.spec.label(), k, &mean, secs * k as f64 / n_max as f64)?;
        row.checkpoint_sha256 = Some(sha.to_string());
        row.sampler_fingerprint = Some(fingerprint.clone());
        out.rows.push(row);
    }
    out.masks.push(SliceMask {
        slice_id: slice.id.clone(),
        r_target,
        mask,
    });
    Ok(out)
}

/// Per slice, draws `max(ns_sweep)` posterior samples once and scores the mean
/// of the first `k` for every `k` in the sweep.
pub fn run_averaging_sweep(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let (slices, models) = prepare(cfg)?;
    let model = models.get(cfg.sweep_model).ok_or_else(|| {
        Error::Config(format!("sweep_model {} but only {} models are configured", cfg.sweep_model, models.len()))
    })?;
    let parts = slices
        .par_iter()
        .map(|s| sweep_slice(cfg, model, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(collect(parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::acceleration;
    use crate::phantoms::{generate_dataset, DatasetConfig, SplitCounts};

    fn small_dataset() -> Dataset {
        generate_dataset(&DatasetConfig {
            per_class: SplitCounts {
                train: 1,
                val: 0,
                test: 3,
            },
            ..DatasetConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn slices_are_drawn_round_robin_over_classes() {
        let data = small_dataset();
        let s = select_slices(&data, Split::Test, Some(6), Reference::FullySampled).unwrap();
        let labels: Vec<ClassLabel> = s.iter().map(|t| t.label).collect();
        assert_eq!(&labels[..4], &ClassLabel::ALL);
        assert_eq!(&labels[4..], &ClassLabel::ALL[..2]);
        let all = select_slices(&data, Split::Test, None, Reference::Clean).unwrap();
        assert_eq!(all.len(), 12);
        assert!(select_slices(&data, Split::Val, None, Reference::FullySampled).is_err());
    }

    #[test]
    fn slice_masks_are_seeded_per_slice_and_hit_the_target() {
        let data = small_dataset();
        let cfg = ExperimentConfig::default();
        let slices = select_slices(&data, Split::Test, None, Reference::FullySampled).unwrap();
        let mut distinct = std::collections::BTreeSet::new();
        for s in &slices {
            for r in [1.5, 2.0] {
                let m = slice_mask(&cfg, s, r).unwrap();
                assert_eq!(m, slice_mask(&cfg, s, r).unwrap());
                assert_eq!(m.r, acceleration(&m));
                assert!((m.r - r).abs() < 0.35, "R {} for target {r}", m.r);
                assert_eq!(m.mode == MaskMode::Se, s.label == ClassLabel::SeAx);
                distinct.insert(m.to_file().keep);
            }
        }
        assert!(distinct.len() > 12);
    }

    #[test]
    fn sample_seeds_differ_across_slices_and_accelerations() {
        let data = small_dataset();
        let slices = select_slices(&data, Split::Test, None, Reference::FullySampled).unwrap();
        let sc = SamplerConfig::default();
        let a = slice_sample_seeds(&sc, &slices[0], 2.0, 5);
        assert_eq!(a, slice_sample_seeds(&sc, &slices[0], 2.0, 3).into_iter().chain(a[3..].iter().copied()).collect::<Vec<_>>());
        assert_ne!(a, slice_sample_seeds(&sc, &slices[1], 2.0, 5));
        assert_ne!(a, slice_sample_seeds(&sc, &slices[0], 1.5, 5));
    }

    #[test]
    fn config_validation() {
        let ok = ExperimentConfig {
            baselines: vec![Baseline::ZeroFilled],
            ..ExperimentConfig::default()
        };
        ok.validate().unwrap();
        assert!(ExperimentConfig::default().validate().is_err());
        for bad in [
            ExperimentConfig { r_targets: vec![], ..ok.clone() },
            ExperimentConfig { r_targets: vec![0.9], ..ok.clone() },
            ExperimentConfig { ns_sweep: vec![0, 1], ..ok.clone() },
            ExperimentConfig { etl_choices: vec![], ..ok.clone() },
            ExperimentConfig { max_slices: Some(0), ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn model_specs_round_trip_through_toml() {
        let mut per_class = BTreeMap::new();
        per_class.insert(ClassLabel::FseAx, PathBuf::from("m/fse_ax.ckpt"));
        per_class.insert(ClassLabel::SeAx, PathBuf::from("m/se_ax.ckpt"));
        let cfg = ExperimentConfig {
            models: vec![
                ModelSpec {
                    regime: RegimeKind::PerClass,
                    data: TrainingData::Raw,
                    checkpoint: None,
                    per_class,
                },
                ModelSpec {
                    regime: RegimeKind::AllEmbed,
                    data: TrainingData::Denoised,
                    checkpoint: Some("m/emb.ckpt".into()),
                    per_class: BTreeMap::new(),
                },
            ],
            baselines: vec![Baseline::L1Wavelet],
            ..ExperimentConfig::default()
        };
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<ExperimentConfig>(&text).unwrap(), cfg);
        assert_eq!(cfg.models[0].label(), "per-class/raw");
    }

    #[test]
    fn missing_checkpoint_is_a_config_error_naming_the_regime() {
        let spec = ModelSpec {
            regime: RegimeKind::All,
            data: TrainingData::Denoised,
            checkpoint: Some("/nonexistent/all.ckpt".into()),
            per_class: BTreeMap::new(),
        };
        match LoadedModel::load(&spec) {
            Err(Error::Config(msg)) => assert!(msg.contains("all/denoised"), "{msg}"),
            other => panic!("expected a config error, got {other:?}"),
        }
        let no_path = ModelSpec { checkpoint: None, ..spec };
        assert!(matches!(LoadedModel::load(&no_path), Err(Error::Config(_))));
    }

    #[test]
    fn canonical_order_and_merge() {
        let row = |id: &str, method: &str, r: f64, n_s: usize, regime: &str| ResultRow {
            slice_id: id.into(),
            class: ClassLabel::FseAx,
            method: method.into(),
            regime: regime.into(),
            r_target: r,
            r_achieved: r,
            n_s,
            nrmse: 0.1,
            wall_time_s: 0.0,
            checkpoint_sha256: None,
            sampler_fingerprint: None,
        };
        let a = ExperimentResult {
            rows: vec![row("b", "dps", 1.5, 1, "all"), row("a", "l1", 2.0, 1, "none")],
            masks: vec![],
        };
        let b = ExperimentResult {
            rows: vec![row("a", "dps", 2.0, 5, "all"), row("a", "dps", 2.0, 1, "x"), row("a", "dps", 1.5, 5, "all")],
            masks: vec![],
        };
        let merged = a.merge(b);
        let keys: Vec<(String, String, f64, usize)> =
            merged.rows.iter().map(|r| (r.slice_id.clone(), r.method.clone(), r.r_target, r.n_s)).collect();
        assert_eq!(
            keys,
            vec![
                ("a".into(), "dps".into(), 1.5, 5),
                ("a".into(), "dps".into(), 2.0, 1),
                ("a".into(), "dps".into(), 2.0, 5),
                ("a".into(), "l1".into(), 2.0, 1),
                ("b".into(), "dps".into(), 1.5, 1),
            ]
        );
    }
}
