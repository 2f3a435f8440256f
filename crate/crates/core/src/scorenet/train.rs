use std::fmt;

use dps_nn::{Adam, Graph, Tensor, Var};
use ndarray::s;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::unet::UNet;
use super::{build_preconditioned, draw_noise, images_to_tensor, loss_weight, LossRecord, ScoreCheckpoint, ScoreModelConfig, ScoreNet, TrainingMeta};
use crate::error::{Error, Result};
use crate::phantoms::{resize_image, ClassLabel, Dataset, Image, Split};
use crate::rng::{derive_seed, rng_from};

/// Which data a score model sees and whether it is class-conditioned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Regime {
    /// One unconditioned model per class, trained on that class only.
    PerClass(ClassLabel),
    /// One unconditioned model on all classes.
    All,
    /// One class-conditioned model on all classes.
    AllEmbed,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::PerClass(_) => "per-class",
            Regime::All => "all",
            Regime::AllEmbed => "all-embed",
        }
    }

    pub fn class(self) -> Option<ClassLabel> {
        match self {
            Regime::PerClass(c) => Some(c),
            _ => None,
        }
    }

    pub fn uses_embedding(self) -> bool {
        matches!(self, Regime::AllEmbed)
    }

    pub fn parse(name: &str, class: Option<ClassLabel>) -> Result<Self> {
        match (name, class) {
            ("per-class", Some(c)) => Ok(Regime::PerClass(c)),
            ("per-class", None) => Err(Error::invalid("the per-class regime needs a class")),
            ("all", _) => Ok(Regime::All),
            ("all-embed", _) => Ok(Regime::AllEmbed),
            _ => Err(Error::invalid(format!(
                "unknown regime '{name}' (expected per-class, all or all-embed)"
            ))),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Length of the linear learning-rate ramp at the start of training.
    pub warmup_steps: usize,
    /// Validation loss is evaluated every `log_every` steps and at the end.
    pub log_every: usize,
    /// Upper bound on validation images used per evaluation.
    pub max_val_items: usize,
    pub hflip: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 8,
            learning_rate: 2e-3,
            warmup_steps: 60,
            log_every: 20,
            max_val_items: 24,
            hflip: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("steps, batch_size and log_every must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        let ramp = if self.warmup_steps == 0 {
            1.0
        } else {
            ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        };
        self.learning_rate * ramp
    }
}

pub(crate) fn hflip(img: &Image) -> Image {
    img.slice(s![.., ..;-1]).to_owned()
}

/// A batch's loss value and the gradient seeds for the backward pass.
pub(crate) type StepOutput = (f64, Vec<(Var, Tensor)>);

/// Generic Adam loop shared by the score model and the denoiser. `step_loss`
/// builds the graph for one minibatch (given the item indices and a step seed);
/// `val_loss` evaluates the current weights on held-out data.
pub(crate) fn fit(
    unet: &mut UNet,
    n_items: usize,
    cfg: &TrainConfig,
    mut step_loss: impl FnMut(&UNet, &mut Graph, &[Var], &[usize], u64) -> Result<StepOutput>,
    mut val_loss: impl FnMut(&UNet) -> Result<Option<f64>>,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    let mut adam = Adam::new(unet.params.tensors());
    let mut curve = Vec::new();
    let batch = cfg.batch_size.min(n_items);
    let mut running = 0.0;
    let mut count = 0usize;
    for step in 0..cfg.steps {
        let mut rng = rng_from(cfg.seed, &[1, step as u64]);
        let idx = rand::seq::index::sample(&mut rng, n_items, batch).into_vec();
        let mut g = Graph::new();
        let p = unet.param_leaves(&mut g, true);
        let (loss, seeds) = step_loss(unet, &mut g, &p, &idx, derive_seed(cfg.seed, &[2, step as u64]))?;
        if !loss.is_finite() {
            return Err(Error::NumericalFailure {
                step,
                detail: format!("training loss is {loss}"),
            });
        }
        let mut grads = g.backward(seeds)?;
        let grads: Vec<Option<Tensor>> = p.iter().map(|&v| grads.take(v)).collect();
        if grads.iter().flatten().any(|t| !t.all_finite()) {
            return Err(Error::NumericalFailure {
                step,
                detail: "non-finite gradient".into(),
            });
        }
        adam.step(unet.params.tensors_mut(), &grads, cfg.lr_at(step));
        running += loss;
        count += 1;
        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps {
            curve.push(LossRecord {
                step: step + 1,
                train_loss: running / count as f64,
                val_loss: val_loss(unet)?,
            });
            running = 0.0;
            count = 0;
        }
    }
    Ok(curve)
}

/// Images of `split` selected by the regime, resized to the training grid.
fn regime_items(data: &Dataset, regime: Regime, split: Split, grid: (usize, usize)) -> Vec<(Image, ClassLabel)> {
    data.split(split)
        .filter(|it| regime.class().is_none_or(|c| it.sample.label == c))
        .map(|it| (resize_image(&it.sample.pixels, grid), it.sample.label))
        .collect()
}

/// EDM loss of `net` over fixed held-out items, evaluated in batches.
fn batched_edm_loss(net: &ScoreNet, items: &[(Image, ClassLabel)], seed: u64, batch: usize) -> Result<f64> {
    let cfg = net.config();
    let mut total = 0.0;
    for (c, chunk) in items.chunks(batch.max(1)).enumerate() {
        let mut noisy = Vec::with_capacity(chunk.len());
        let mut sigmas = Vec::with_capacity(chunk.len());
        for (j, (x, _)) in chunk.iter().enumerate() {
            let (sigma, n) = draw_noise(cfg, seed, c * batch + j, x.dim());
            noisy.push(x + &n);
            sigmas.push(sigma);
        }
        let refs: Vec<&Image> = noisy.iter().collect();
        let classes: Vec<ClassLabel> = chunk.iter().map(|(_, l)| *l).collect();
        let cls = cfg.use_class_embedding.then_some(classes.as_slice());
        let outs = net.denoise_batch(&refs, &sigmas, cls)?;
        for ((out, (x, _)), s) in outs.iter().zip(chunk).zip(&sigmas) {
            let err: f64 = out.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            total += loss_weight(*s, cfg.sigma_data) * err;
        }
    }
    Ok(total / items.len() as f64)
}

/// Trains a score model under `regime`. The class-embedding flag of `config` is
/// overridden by the regime.
pub fn train_score_model(
    data: &Dataset,
    config: &ScoreModelConfig,
    train: &TrainConfig,
    regime: Regime,
) -> Result<ScoreCheckpoint> {
    let mut config = config.clone();
    config.use_class_embedding = regime.uses_embedding();
    config.validate()?;
    train.validate()?;
    let grid = config.training_grid();
    let items = regime_items(data, regime, Split::Train, grid);
    if items.is_empty() {
        return Err(Error::invalid(match regime {
            Regime::PerClass(c) => format!("no training samples of class {c}"),
            _ => "the training split is empty".to_string(),
        }));
    }
    let mut val = regime_items(data, regime, Split::Val, grid);
    val.truncate(train.max_val_items);
    let classes: Vec<ClassLabel> = match regime {
        Regime::PerClass(c) => vec![c],
        Regime::AllEmbed => ClassLabel::ALL.to_vec(),
        Regime::All => {
            let mut cs: Vec<ClassLabel> = items.iter().map(|(_, c)| *c).collect();
            cs.sort();
            cs.dedup();
            cs
        }
    };

    let mut net = ScoreNet::new(&config, derive_seed(train.seed, &[0]))?;
    let val_seed = derive_seed(train.seed, &[3]);
    let sd = config.sigma_data;
    let curve = fit(
        &mut net.unet,
        items.len(),
        train,
        |unet, g, p, idx, step_seed| {
            let mut rng = rng_from(step_seed, &[0]);
            let mut clean = Vec::with_capacity(idx.len());
            let mut noisy = Vec::with_capacity(idx.len());
            let mut sigmas = Vec::with_capacity(idx.len());
            for (j, &i) in idx.iter().enumerate() {
                let x = if train.hflip && rng.random_bool(0.5) {
                    hflip(&items[i].0)
                } else {
                    items[i].0.clone()
                };
                let (sigma, n) = draw_noise(&unet.config, step_seed, j + 1, x.dim());
                noisy.push(&x + &n);
                clean.push(x);
                sigmas.push(sigma);
            }
            let classes: Vec<ClassLabel> = idx.iter().map(|&i| items[i].1).collect();
            let refs: Vec<&Image> = noisy.iter().collect();
            let x = g.leaf(images_to_tensor(&refs)?, false);
            let cls = unet.config.use_class_embedding.then_some(classes.as_slice());
            let d = build_preconditioned(unet, g, p, x, &sigmas, cls)?;
            let out = g.value(d).data();
            let pixels = clean[0].len();
            let b = idx.len() as f64;
            let mut seed = vec![0.0; out.len()];
            let mut loss = 0.0;
            for (k, xk) in clean.iter().enumerate() {
                let lam = loss_weight(sigmas[k], sd);
                for (q, xv) in xk.iter().enumerate() {
                    let diff = out[k * pixels + q] - xv;
                    loss += lam * diff * diff / b;
                    seed[k * pixels + q] = 2.0 * lam * diff / b;
                }
            }
            Ok((loss, vec![(d, Tensor::from_vec(g.value(d).shape(), seed)?)]))
        },
        |unet| {
            if val.is_empty() {
                return Ok(None);
            }
            let view = ScoreNet { unet: unet.clone() };
            batched_edm_loss(&view, &val, val_seed, train.batch_size).map(Some)
        },
    )?;
    Ok(ScoreCheckpoint {
        regime,
        classes,
        meta: TrainingMeta {
            steps: train.steps,
            seed: train.seed,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            loss_curve: curve,
        },
        net,
    })
}
