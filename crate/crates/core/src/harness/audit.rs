//! Background-noise audit: histograms of the 20×20 background patch of
//! randomly chosen images, each with a Gaussian fit and a normality statistic.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::plot::{Axes, Canvas, PALETTE};
use super::stats::{jarque_bera, mean, std_dev};
use crate::denoise::{estimate_noise_sigma_image, PATCH_SIZE};
use crate::error::{Error, Result};
use crate::io;
use crate::phantoms::{Dataset, Image};
use crate::rng::rng_from;

pub const AUDIT_PANELS: usize = 25;
pub const HISTOGRAM_BINS: usize = 16;
const AUDIT_STREAM: u64 = 0x61756469;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditPanel {
    pub id: String,
    /// Top-left corner of the patch (row, column).
    pub patch_origin: (usize, usize),
    /// Fitted Gaussian mean and standard deviation.
    pub mu: f64,
    pub sigma: f64,
    pub jarque_bera: f64,
    pub p_value: f64,
    /// Left edge of the first bin and the common bin width.
    pub bin_start: f64,
    pub bin_width: f64,
    pub counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditReport {
    pub seed: u64,
    pub panels: Vec<AuditPanel>,
}

impl AuditReport {
    /// Mean of `|μ|` over the panels.
    pub fn mean_abs_mu(&self) -> f64 {
        mean(&self.panels.iter().map(|p| p.mu.abs()).collect::<Vec<_>>())
    }
}

/// Histogram and fit of one patch; bins span `μ ± 4σ`.
pub fn audit_patch(id: &str, patch_origin: (usize, usize), patch: &Image) -> Result<AuditPanel> {
    let values: Vec<f64> = patch.iter().copied().collect();
    let (mu, sigma) = (mean(&values), std_dev(&values));
    let (jb, p) = jarque_bera(&values)?;
    let half = 4.0 * sigma.max(1e-12);
    let bin_width = 2.0 * half / HISTOGRAM_BINS as f64;
    let bin_start = mu - half;
    let mut counts = vec![0; HISTOGRAM_BINS];
    for v in &values {
        let b = ((v - bin_start) / bin_width).floor();
        if b >= 0.0 && (b as usize) < HISTOGRAM_BINS {
            counts[b as usize] += 1;
        }
    }
    Ok(AuditPanel {
        id: id.to_string(),
        patch_origin,
        mu,
        sigma,
        jarque_bera: jb,
        p_value: p,
        bin_start,
        bin_width,
        counts,
    })
}

/// Audits the background patch (the lowest-mean corner, as used by the noise
/// estimator) of 25 images drawn without replacement with `seed`.
pub fn background_noise_audit(data: &Dataset, seed: u64) -> Result<AuditReport> {
    if data.items.len() < AUDIT_PANELS {
        return Err(Error::invalid(format!(
            "the audit needs at least {AUDIT_PANELS} images, the dataset has {}",
            data.items.len()
        )));
    }
    let mut rng = rng_from(seed, &[AUDIT_STREAM]);
    let mut picks = rand::seq::index::sample(&mut rng, data.items.len(), AUDIT_PANELS).into_vec();
    picks.sort_unstable();
    let panels = picks
        .into_iter()
        .map(|i| {
            let item = &data.items[i];
            let est = estimate_noise_sigma_image(&item.sample.pixels)?;
            let (r, c) = est.patch_origin;
            let patch = item.sample.pixels.slice(ndarray::s![r..r + PATCH_SIZE, c..c + PATCH_SIZE]).to_owned();
            audit_patch(&item.id, est.patch_origin, &patch)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AuditReport { seed, panels })
}

#[derive(Serialize)]
struct AuditCsvRow<'a> {
    id: &'a str,
    patch_row: usize,
    patch_col: usize,
    mu: f64,
    sigma: f64,
    jarque_bera: f64,
    p_value: f64,
}

/// Writes `audit.csv` and `audit.png` (a 5×5 grid of histograms with the
/// fitted Gaussian density overlaid).
pub fn write_audit(report: &AuditReport, outdir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    let csv_path = outdir.join("audit.csv");
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    for p in &report.panels {
        w.serialize(AuditCsvRow {
            id: &p.id,
            patch_row: p.patch_origin.0,
            patch_col: p.patch_origin.1,
            mu: p.mu,
            sigma: p.sigma,
            jarque_bera: p.jarque_bera,
            p_value: p.p_value,
        })
        .map_err(|e| Error::io(&csv_path, std::io::Error::other(e.to_string())))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(&csv_path, e.into_error()))?;
    io::write_bytes(&csv_path, &bytes)?;

    let (cell_w, cell_h, cols) = (150i64, 110i64, 5usize);
    let rows = report.panels.len().div_ceil(cols);
    let mut canvas = Canvas::new((cell_w * cols as i64) as u32, (cell_h * rows as i64).max(1) as u32);
    for (k, p) in report.panels.iter().enumerate() {
        let (ox, oy) = ((k % cols) as i64 * cell_w, (k / cols) as i64 * cell_h);
        let n: usize = p.counts.iter().sum();
        let peak_density = 1.0 / (p.sigma.max(1e-12) * (2.0 * std::f64::consts::PI).sqrt());
        let max_density = p
            .counts
            .iter()
            .map(|&c| c as f64 / (n.max(1) as f64 * p.bin_width))
            .fold(peak_density, f64::max);
        let ax = Axes {
            left: ox + 8,
            top: oy + 8,
            width: cell_w - 16,
            height: cell_h - 16,
            x_range: (p.bin_start, p.bin_start + p.bin_width * p.counts.len() as f64),
            y_range: (0.0, max_density * 1.05),
        };
        for (b, &c) in p.counts.iter().enumerate() {
            let x0 = p.bin_start + b as f64 * p.bin_width;
            let d = c as f64 / (n.max(1) as f64 * p.bin_width);
            canvas.fill_rect(ax.px(x0) + 1, ax.py(d), ax.px(x0 + p.bin_width) - 1, ax.py(0.0), PALETTE[7]);
        }
        let steps = 80;
        let curve: Vec<(i64, i64)> = (0..=steps)
            .map(|s| {
                let x = ax.x_range.0 + (ax.x_range.1 - ax.x_range.0) * s as f64 / steps as f64;
                let z = (x - p.mu) / p.sigma.max(1e-12);
                (ax.px(x), ax.py(peak_density * (-0.5 * z * z).exp()))
            })
            .collect();
        for w in curve.windows(2) {
            canvas.line(w[0], w[1], PALETTE[3]);
        }
        canvas.line((ax.left, ax.py(0.0)), (ax.left + ax.width, ax.py(0.0)), [0, 0, 0]);
    }
    let png_path = outdir.join("audit.png");
    canvas.save(&png_path)?;
    Ok((csv_path, png_path))
}
