//! Checkpoint files: `<path>` holds the raw weights (little-endian f64),
//! `<path>.toml` the configuration sidecar and `<path>.loss.csv` the loss curve.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Regime, ScoreModelConfig, ScoreNet};
use crate::error::{Error, Result};
use crate::io;
use crate::phantoms::ClassLabel;

const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub steps: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Stored in the `.loss.csv` file rather than the sidecar.
    #[serde(skip)]
    pub loss_curve: Vec<LossRecord>,
}

pub(crate) fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub(crate) fn write_loss_csv(path: &Path, curve: &[LossRecord]) -> Result<()> {
    let mut out = String::from("step,train_loss,val_loss\n");
    for r in curve {
        let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{}", r.step, r.train_loss, val).expect("write to string");
    }
    io::write_bytes(path, out.as_bytes())
}

pub(crate) fn read_loss_csv(path: &Path) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(bad(format!("expected 3 fields in '{line}'")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("'{s}': {e}")));
            Ok(LossRecord {
                step: f[0].parse().map_err(|e| bad(format!("'{}': {e}", f[0])))?,
                train_loss: num(f[1])?,
                val_loss: if f[2].is_empty() { None } else { Some(num(f[2])?) },
            })
        })
        .collect()
}

/// Reads a weights blob and checks it against the hash recorded in its sidecar.
pub(crate) fn read_blob_checked(path: &Path, sha256: &str) -> Result<Vec<u8>> {
    let blob = fs::read(path).map_err(|e| Error::io(path, e))?;
    let actual = io::sha256_hex(&blob);
    if actual != sha256 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("weights hash {actual} does not match sidecar {sha256}"),
        });
    }
    Ok(blob)
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    kind: String,
    schema_version: u32,
    regime: String,
    regime_class: Option<ClassLabel>,
    classes: Vec<ClassLabel>,
    weights_sha256: String,
    training: TrainingMeta,
    config: ScoreModelConfig,
}

/// A trained score model plus the regime and data it was trained on.
#[derive(Clone, Debug)]
pub struct ScoreCheckpoint {
    pub regime: Regime,
    pub classes: Vec<ClassLabel>,
    pub meta: TrainingMeta,
    pub(crate) net: ScoreNet,
}

impl ScoreCheckpoint {
    pub fn net(&self) -> &ScoreNet {
        &self.net
    }

    pub fn config(&self) -> &ScoreModelConfig {
        self.net.config()
    }

    /// SHA-256 of the serialized weights.
    pub fn sha256(&self) -> String {
        io::sha256_hex(&self.net.weights_blob())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let blob = self.net.weights_blob();
        io::write_bytes(path, &blob)?;
        let sidecar = Sidecar {
            kind: "score".into(),
            schema_version: SCHEMA_VERSION,
            regime: self.regime.name().into(),
            regime_class: self.regime.class(),
            classes: self.classes.clone(),
            weights_sha256: io::sha256_hex(&blob),
            training: self.meta.clone(),
            config: self.config().clone(),
        };
        io::write_toml(&with_suffix(path, ".toml"), &sidecar)?;
        write_loss_csv(&with_suffix(path, ".loss.csv"), &self.meta.loss_curve)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sidecar_path = with_suffix(path, ".toml");
        let sc: Sidecar = io::read_toml(&sidecar_path)?;
        if sc.kind != "score" || sc.schema_version != SCHEMA_VERSION {
            return Err(Error::Format {
                path: sidecar_path,
                detail: format!("expected a score checkpoint (schema {SCHEMA_VERSION}), found kind '{}'", sc.kind),
            });
        }
        let regime = Regime::parse(&sc.regime, sc.regime_class)?;
        if sc.config.use_class_embedding && sc.classes.len() != 4 {
            return Err(Error::Format {
                path: sidecar_path,
                detail: "class-embedding checkpoints must list all four classes".into(),
            });
        }
        let blob = read_blob_checked(path, &sc.weights_sha256)?;
        let mut net = ScoreNet::new(&sc.config, 0)?;
        net.load_weights(&blob)?;
        let mut meta = sc.training;
        meta.loss_curve = read_loss_csv(&with_suffix(path, ".loss.csv"))?;
        Ok(Self {
            regime,
            classes: sc.classes,
            meta,
            net,
        })
    }
}

/// Hash of a saved checkpoint's weights file, without building the network.
pub fn file_sha256(path: &Path) -> Result<String> {
    let blob = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(io::sha256_hex(&blob))
}
