//! Single-coil Cartesian measurement model `y = M F x + noise`.
//!
//! `F` is the orthonormal 2D DFT with the zero frequency shifted to row
//! `⌊H/2⌋`, column `⌊W/2⌋`. Rows of k-space are phase-encode lines; `M` keeps
//! or zeroes whole rows. Images are real, so the adjoint returns the real part
//! of the inverse transform.

use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantoms::Image;
use crate::rng::rng_from;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskMode {
    /// Fast spin echo: lines are dropped one whole echo train at a time.
    #[serde(rename = "FSE")]
    Fse,
    /// Spin echo: every line is its own train.
    #[serde(rename = "SE")]
    Se,
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::Fse => "FSE",
            MaskMode::Se => "SE",
        })
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FSE" => Ok(MaskMode::Fse),
            "SE" => Ok(MaskMode::Se),
            _ => Err(Error::invalid(format!("unknown mask mode '{s}'"))),
        }
    }
}

/// Interleaved assignment of phase-encode lines to echo trains.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EchoTrainLayout {
    pub n_lines: usize,
    pub etl: usize,
    pub assignment: Vec<usize>,
}

impl EchoTrainLayout {
    pub fn new(n_lines: usize, etl: usize) -> Result<Self> {
        if n_lines == 0 || etl == 0 || etl > n_lines {
            return Err(Error::invalid(format!(
                "echo train length {etl} invalid for {n_lines} lines"
            )));
        }
        let n_trains = n_lines.div_ceil(etl);
        Ok(Self {
            n_lines,
            etl,
            assignment: (0..n_lines).map(|j| j % n_trains).collect(),
        })
    }

    pub fn n_trains(&self) -> usize {
        self.n_lines.div_ceil(self.etl)
    }

    pub fn center_line(&self) -> usize {
        self.n_lines / 2
    }

    pub fn center_train(&self) -> usize {
        self.assignment[self.center_line()]
    }

    pub fn train_size(&self, train: usize) -> usize {
        self.assignment.iter().filter(|&&t| t == train).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMask {
    pub keep: Vec<bool>,
    pub layout: EchoTrainLayout,
    pub mode: MaskMode,
    /// Achieved acceleration, `n_lines / kept`.
    pub r: f64,
    pub seed: u64,
}

impl SamplingMask {
    /// Mask that keeps every line.
    pub fn full(n_lines: usize) -> Result<Self> {
        let layout = EchoTrainLayout::new(n_lines, 1)?;
        Ok(Self {
            keep: vec![true; n_lines],
            layout,
            mode: MaskMode::Se,
            r: 1.0,
            seed: 0,
        })
    }

    pub fn n_lines(&self) -> usize {
        self.keep.len()
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// Checks the structural invariants: center train kept, drops aligned to
    /// whole trains, recorded acceleration consistent.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_lines();
        if n != self.layout.n_lines || self.kept() == 0 {
            return Err(Error::invalid("mask/layout mismatch or no kept lines"));
        }
        if !self.keep[self.layout.center_line()] {
            return Err(Error::invalid("center line dropped"));
        }
        for t in 0..self.layout.n_trains() {
            let states: Vec<bool> = (0..n).filter(|&j| self.layout.assignment[j] == t).map(|j| self.keep[j]).collect();
            if states.iter().any(|&s| s != states[0]) {
                return Err(Error::invalid(format!("train {t} is partially dropped")));
            }
        }
        if self.r != acceleration(self) {
            return Err(Error::invalid("recorded acceleration does not match the mask"));
        }
        Ok(())
    }

    pub fn to_file(&self) -> MaskFile {
        MaskFile {
            n_lines: self.n_lines(),
            etl: self.layout.etl,
            keep: self.keep.iter().map(|&k| if k { '1' } else { '0' }).collect(),
            seed: self.seed,
            mode: self.mode,
            r: self.r,
        }
    }

    pub fn from_file(f: &MaskFile) -> Result<Self> {
        let keep: Vec<bool> = f
            .keep
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(Error::invalid(format!("mask keep string contains '{other}'"))),
            })
            .collect::<Result<_>>()?;
        if keep.len() != f.n_lines {
            return Err(Error::invalid("mask keep string length differs from n_lines"));
        }
        let mask = Self {
            keep,
            layout: EchoTrainLayout::new(f.n_lines, f.etl)?,
            mode: f.mode,
            r: f.r,
            seed: f.seed,
        };
        mask.validate()?;
        Ok(mask)
    }
}

/// Structured-text form of a mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskFile {
    pub n_lines: usize,
    pub etl: usize,
    /// One `0`/`1` character per phase-encode line.
    pub keep: String,
    pub seed: u64,
    pub mode: MaskMode,
    #[serde(rename = "R")]
    pub r: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceMeasurement {
    /// `H x W`, rows with `keep = false` are exactly zero.
    pub values: Array2<Complex64>,
    pub mask: SamplingMask,
    pub noise_sigma_d: f64,
}

impl KSpaceMeasurement {
    /// Wraps stored k-space values; rows the mask drops are zeroed.
    pub fn from_parts(mut values: Array2<Complex64>, mask: SamplingMask, noise_sigma_d: f64) -> Result<Self> {
        if values.nrows() != mask.n_lines() || values.ncols() == 0 {
            return Err(Error::invalid(format!(
                "k-space has shape {:?} but the mask has {} lines",
                values.dim(),
                mask.n_lines()
            )));
        }
        if values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::invalid("k-space contains non-finite values"));
        }
        apply_mask(&mut values, &mask);
        Ok(Self {
            values,
            mask,
            noise_sigma_d,
        })
    }
}

pub fn acceleration(mask: &SamplingMask) -> f64 {
    mask.n_lines() as f64 / mask.kept() as f64
}

/// Drops uniformly random whole trains (or single lines in SE mode), never the
/// one holding the center line, choosing the drop count whose achieved
/// acceleration is closest to `target_r` (ties go to the higher acceleration).
pub fn make_echo_train_mask(n_lines: usize, etl: usize, target_r: f64, seed: u64, mode: MaskMode) -> Result<SamplingMask> {
    if !(target_r > 1.0 && target_r <= 4.0) {
        return Err(Error::invalid(format!("target acceleration {target_r} outside (1, 4]")));
    }
    let layout = match mode {
        MaskMode::Fse => EchoTrainLayout::new(n_lines, etl)?,
        MaskMode::Se => EchoTrainLayout::new(n_lines, 1)?,
    };
    let n_trains = layout.n_trains();
    let center = layout.center_train();
    let mut order: Vec<usize> = (0..n_trains).filter(|&t| t != center).collect();
    if order.is_empty() {
        return Err(Error::Infeasible(format!(
            "{n_lines} lines in a single train of length {etl}: only the center train exists"
        )));
    }
    let mut rng = rng_from(seed, &[n_lines as u64, layout.etl as u64]);
    order.shuffle(&mut rng);

    let sizes: Vec<usize> = (0..n_trains).map(|t| layout.train_size(t)).collect();
    let mut best: Option<(usize, f64)> = None;
    let mut dropped_lines = 0;
    for (d, &t) in order.iter().enumerate() {
        dropped_lines += sizes[t];
        let r = n_lines as f64 / (n_lines - dropped_lines) as f64;
        let better = match best {
            None => true,
            Some((_, br)) => {
                let (e, be) = ((r - target_r).abs(), (br - target_r).abs());
                e < be - 1e-12 || ((e - be).abs() <= 1e-12 && r > br)
            }
        };
        if better {
            best = Some((d + 1, r));
        }
    }
    let (n_drop, _) = best.expect("at least one candidate");
    let mut keep = vec![true; n_lines];
    for &t in &order[..n_drop] {
        for (j, k) in keep.iter_mut().enumerate() {
            if layout.assignment[j] == t {
                *k = false;
            }
        }
    }
    let mut mask = SamplingMask {
        keep,
        layout,
        mode,
        r: 0.0,
        seed,
    };
    mask.r = acceleration(&mask);
    Ok(mask)
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

/// Orthonormal 2D DFT in place (no shift).
fn fft2(data: &mut Array2<Complex64>, inverse: bool) {
    let (h, w) = data.dim();
    let row_fft = plan(w, inverse);
    for mut row in data.rows_mut() {
        let slice = row.as_slice_mut().expect("standard layout");
        row_fft.process(slice);
    }
    let col_fft = plan(h, inverse);
    let mut buf = vec![Complex64::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            buf[r] = data[[r, c]];
        }
        col_fft.process(&mut buf);
        for r in 0..h {
            data[[r, c]] = buf[r];
        }
    }
    let norm = 1.0 / ((h * w) as f64).sqrt();
    data.mapv_inplace(|v| v * norm);
}

/// Moves index 0 to index `⌊n/2⌋` along both axes.
fn fftshift(a: &Array2<Complex64>) -> Array2<Complex64> {
    let (h, w) = a.dim();
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            out[[(r + h / 2) % h, (c + w / 2) % w]] = a[[r, c]];
        }
    }
    out
}

fn ifftshift(a: &Array2<Complex64>) -> Array2<Complex64> {
    let (h, w) = a.dim();
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            out[[r, c]] = a[[(r + h / 2) % h, (c + w / 2) % w]];
        }
    }
    out
}

fn apply_mask(values: &mut Array2<Complex64>, mask: &SamplingMask) {
    for (mut row, &k) in values.rows_mut().into_iter().zip(&mask.keep) {
        if !k {
            row.fill(Complex64::new(0.0, 0.0));
        }
    }
}

/// Centered orthonormal k-space of `x` with dropped rows zeroed.
pub fn forward(x: &Image, mask: &SamplingMask) -> Result<KSpaceMeasurement> {
    if x.nrows() != mask.n_lines() {
        return Err(Error::invalid(format!(
            "image has {} phase-encode rows but mask has {} lines",
            x.nrows(),
            mask.n_lines()
        )));
    }
    let mut k = x.mapv(|v| Complex64::new(v, 0.0));
    fft2(&mut k, false);
    let mut values = fftshift(&k);
    apply_mask(&mut values, mask);
    Ok(KSpaceMeasurement {
        values,
        mask: mask.clone(),
        noise_sigma_d: 0.0,
    })
}

/// Real part of the orthonormal inverse transform of the masked k-space.
pub fn adjoint(y: &KSpaceMeasurement) -> Image {
    let mut masked = y.values.clone();
    apply_mask(&mut masked, &y.mask);
    let mut img = ifftshift(&masked);
    fft2(&mut img, true);
    img.mapv(|v| v.re)
}

/// Zero-filled reconstruction; identical to [`adjoint`].
pub fn zero_filled(y: &KSpaceMeasurement) -> Image {
    adjoint(y)
}

/// Adds complex Gaussian noise (each component variance `sigma_d² / 2`) on kept rows only.
pub fn add_measurement_noise(y: &KSpaceMeasurement, sigma_d: f64, seed: u64) -> Result<KSpaceMeasurement> {
    if !(sigma_d >= 0.0) || !sigma_d.is_finite() {
        return Err(Error::invalid(format!("measurement noise must be non-negative, got {sigma_d}")));
    }
    let mut out = y.clone();
    out.noise_sigma_d = sigma_d;
    if sigma_d == 0.0 {
        return Ok(out);
    }
    let s = sigma_d / 2f64.sqrt();
    let mut rng = rng_from(seed, &[0x6b6e6f697365]);
    for (mut row, &k) in out.values.rows_mut().into_iter().zip(&y.mask.keep) {
        if !k {
            continue;
        }
        for v in row.iter_mut() {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            *v += Complex64::new(s * re, s * im);
        }
    }
    Ok(out)
}

/// Real inner product `Re Σ conj(a)·b`.
pub fn kspace_inner(a: &Array2<Complex64>, b: &Array2<Complex64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.re * y.re + x.im * y.im).sum()
}

pub fn kspace_norm_sq(a: &Array2<Complex64>) -> f64 {
    a.iter().map(|v| v.norm_sqr()).sum()
}

/// `‖A x − y‖²` and the difference `A x − y`.
pub fn residual(x: &Image, y: &KSpaceMeasurement) -> Result<(f64, KSpaceMeasurement)> {
    let mut ax = forward(x, &y.mask)?;
    ax.values -= &y.values;
    apply_mask(&mut ax.values, &y.mask);
    Ok((kspace_norm_sq(&ax.values), ax))
}
