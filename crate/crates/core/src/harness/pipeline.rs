//! The full desk pipeline under one master seed: generate → denoise → train →
//! reconstruct → report.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::experiment::{
    run_ablation, run_averaging_sweep, Baseline, ExperimentConfig, ExperimentResult, ModelSpec, RegimeKind,
    TrainingData,
};
use super::report::{emit_report, ReportFiles};
use crate::denoise::{denoise_items, mean_nrmse_to_clean, train_denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::io;
use crate::phantoms::{generate_dataset, ClassLabel, Dataset, DatasetConfig, Split};
use crate::rng::derive_seed;
use crate::scorenet::{train_score_model, Regime, ScoreModelConfig, TrainConfig};

/// How the step budget is shared out to the per-class models.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerClassBudget {
    /// Steps (and warm-up) scale with the class's share of the training
    /// split, so every regime makes the same number of passes over its data.
    #[default]
    EqualEpochs,
    /// Every per-class model gets the full pooled step budget.
    EqualSteps,
}

/// One prior to train: a regime on either raw or denoised training data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelChoice {
    pub regime: RegimeKind,
    pub data: TrainingData,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    pub data: DatasetConfig,
    pub denoiser: DenoiserConfig,
    pub score_model: ScoreModelConfig,
    /// Step budget of the pooled models; see `per_class_budget` for the rest.
    pub score_train: TrainConfig,
    pub per_class_budget: PerClassBudget,
    pub models: Vec<ModelChoice>,
    /// Evaluation settings. Dataset, output directory, models and seeds are
    /// filled in by the pipeline.
    pub experiment: ExperimentConfig,
    pub run_sweep: bool,
    /// Slice cap for the averaging sweep (the ablation uses `experiment.max_slices`).
    pub sweep_max_slices: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut score_model = ScoreModelConfig::desk((48, 48));
        score_model.base_channels = 8;
        let mut denoiser = DenoiserConfig::desk();
        denoiser.arch.base_channels = 8;
        denoiser.train.steps = 300;
        let experiment = ExperimentConfig {
            baselines: vec![Baseline::L1Wavelet],
            ..ExperimentConfig::default()
        };
        Self {
            seed: 0,
            data: DatasetConfig::default(),
            denoiser,
            score_model,
            score_train: TrainConfig {
                steps: 800,
                ..TrainConfig::default()
            },
            per_class_budget: PerClassBudget::EqualEpochs,
            models: vec![
                ModelChoice {
                    regime: RegimeKind::AllEmbed,
                    data: TrainingData::Denoised,
                },
                ModelChoice {
                    regime: RegimeKind::All,
                    data: TrainingData::Denoised,
                },
                ModelChoice {
                    regime: RegimeKind::PerClass,
                    data: TrainingData::Denoised,
                },
            ],
            experiment,
            run_sweep: true,
            sweep_max_slices: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::Config("the pipeline has no models to train".into()));
        }
        for (i, m) in self.models.iter().enumerate() {
            if self.models[..i].contains(m) {
                return Err(Error::Config(format!(
                    "model {}/{} is listed twice",
                    m.regime.name(),
                    m.data.name()
                )));
            }
        }
        self.data.validate()?;
        self.score_model.validate()?;
        self.score_train.validate()?;
        self.denoiser.train.validate()?;
        Ok(())
    }
}

/// Everything a pipeline run produced.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub workdir: PathBuf,
    /// The evaluation config actually used, including checkpoint paths.
    pub experiment: ExperimentConfig,
    pub ablation: ExperimentResult,
    pub ablation_report: ReportFiles,
    pub sweep: Option<ExperimentResult>,
    pub sweep_report: Option<ReportFiles>,
    /// Mean validation NRMSE to the clean truth before and after denoising.
    pub denoise_val_nrmse: Option<(f64, f64)>,
}

fn checkpoint_path(dir: &Path, m: &ModelChoice, class: Option<ClassLabel>) -> PathBuf {
    let mut name = format!("{}-{}", m.regime.name(), m.data.name());
    if let Some(c) = class {
        name.push('-');
        name.push_str(&c.name().to_ascii_lowercase());
    }
    dir.join(format!("{name}.ckpt"))
}

/// `train` with steps and warm-up scaled by `share` (at least one step).
fn scaled_budget(train: &TrainConfig, share: f64) -> TrainConfig {
    let steps = ((train.steps as f64 * share).round() as usize).max(1);
    TrainConfig {
        steps,
        warmup_steps: (train.warmup_steps as f64 * share).round() as usize,
        log_every: train.log_every.min(steps),
        ..train.clone()
    }
}

fn train_choice(
    cfg: &PipelineConfig,
    index: usize,
    m: &ModelChoice,
    data: &Dataset,
    dir: &Path,
) -> Result<ModelSpec> {
    let mut spec = ModelSpec {
        regime: m.regime,
        data: m.data,
        checkpoint: None,
        per_class: Default::default(),
    };
    let regimes: Vec<Regime> = match m.regime {
        RegimeKind::All => vec![Regime::All],
        RegimeKind::AllEmbed => vec![Regime::AllEmbed],
        RegimeKind::PerClass => ClassLabel::ALL
            .into_iter()
            .filter(|&c| data.split(Split::Train).any(|it| it.sample.label == c))
            .map(Regime::PerClass)
            .collect(),
    };
    let n_train = data.split(Split::Train).count();
    for regime in regimes {
        let class = regime.class();
        let mut train = TrainConfig {
            seed: derive_seed(cfg.seed, &[3, index as u64, class.map_or(4, |c| c.index() as u64)]),
            ..cfg.score_train.clone()
        };
        if let (Some(c), PerClassBudget::EqualEpochs) = (class, cfg.per_class_budget) {
            let share = data.split(Split::Train).filter(|it| it.sample.label == c).count() as f64 / n_train as f64;
            train = scaled_budget(&train, share);
        }
        let ckpt = train_score_model(data, &cfg.score_model, &train, regime)?;
        let path = checkpoint_path(dir, m, class);
        ckpt.save(&path)?;
        match class {
            Some(c) => {
                spec.per_class.insert(c, path);
            }
            None => spec.checkpoint = Some(path),
        }
    }
    Ok(spec)
}

/// Runs the whole pipeline inside `workdir`:
/// `data/` (raw dataset), `denoiser.ckpt` and `denoised/`, `models/`,
/// `ablation/` and `sweep/` reports, and the resolved `pipeline.toml`.
pub fn run_pipeline(cfg: &PipelineConfig, workdir: &Path) -> Result<PipelineOutput> {
    cfg.validate()?;
    fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;
    io::write_toml(&workdir.join("pipeline.toml"), cfg)?;

    let data_cfg = DatasetConfig {
        seed: derive_seed(cfg.seed, &[1]),
        ..cfg.data.clone()
    };
    let raw = generate_dataset(&data_cfg)?;
    let raw_dir = workdir.join("data");
    raw.write(&raw_dir)?;

    let mut denoised = None;
    let mut denoise_val_nrmse = None;
    if cfg.models.iter().any(|m| m.data == TrainingData::Denoised) {
        let mut dcfg = cfg.denoiser.clone();
        dcfg.train.seed = derive_seed(cfg.seed, &[2]);
        let ckpt = train_denoiser(&raw, &dcfg)?;
        ckpt.save(&workdir.join("denoiser.ckpt"))?;
        let den = denoise_items(&raw, &ckpt, "data")?;
        den.write(&workdir.join("denoised"))?;
        denoise_val_nrmse = mean_nrmse_to_clean(raw.split(Split::Val)).zip(mean_nrmse_to_clean(den.split(Split::Val)));
        denoised = Some(den);
    }

    let model_dir = workdir.join("models");
    fs::create_dir_all(&model_dir).map_err(|e| Error::io(&model_dir, e))?;
    let mut specs = Vec::with_capacity(cfg.models.len());
    for (i, m) in cfg.models.iter().enumerate() {
        let data = match m.data {
            TrainingData::Raw => &raw,
            TrainingData::Denoised => denoised.as_ref().expect("denoised data is built when needed"),
        };
        specs.push(train_choice(cfg, i, m, data, &model_dir)?);
    }

    let mut exp = cfg.experiment.clone();
    exp.dataset = raw_dir;
    exp.models = specs;
    exp.seed = derive_seed(cfg.seed, &[4]);
    exp.sampler.seed = derive_seed(cfg.seed, &[5]);
    exp.output_dir = workdir.join("ablation");
    let ablation = run_ablation(&exp)?;
    let ablation_report = emit_report(&ablation, &exp.output_dir)?;

    let (sweep, sweep_report) = if cfg.run_sweep {
        let sweep_cfg = ExperimentConfig {
            max_slices: cfg.sweep_max_slices,
            output_dir: workdir.join("sweep"),
            ..exp.clone()
        };
        let sweep = run_averaging_sweep(&sweep_cfg)?;
        let report = emit_report(&sweep, &sweep_cfg.output_dir)?;
        (Some(sweep), Some(report))
    } else {
        (None, None)
    };

    Ok(PipelineOutput {
        workdir: workdir.to_path_buf(),
        experiment: exp,
        ablation,
        ablation_report,
        sweep,
        sweep_report,
        denoise_val_nrmse,
    })
}
