//! Paired nonparametric test, normality statistic and small summary helpers.

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// One-sided Wilcoxon signed-rank test of `a > b` on paired observations.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WilcoxonResult {
    /// Pairs with a nonzero difference.
    pub n: usize,
    /// Sum of the ranks of positive differences `a − b`.
    pub w_plus: f64,
    pub z: f64,
    /// P-value for the alternative that `a − b` is shifted above zero.
    pub p_greater: f64,
}

/// Normal approximation with the tie correction of the variance and a
/// continuity correction; zero differences are discarded.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::invalid("paired samples must have equal length"));
    }
    let mut d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("paired samples contain non-finite values"));
    }
    let n = d.len();
    if n == 0 {
        return Err(Error::invalid("all paired differences are zero"));
    }
    d.sort_by(|x, y| x.abs().total_cmp(&y.abs()));

    let mut w_plus = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[j + 1].abs() == d[i].abs() {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let rank = (i + j + 2) as f64 / 2.0;
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        w_plus += d[i..=j].iter().filter(|v| **v > 0.0).count() as f64 * rank;
        i = j + 1;
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    // One-sided continuity correction toward the null.
    let z = if var > 0.0 { (w_plus - mean - 0.5) / var.sqrt() } else { 0.0 };
    let normal = Normal::standard();
    Ok(WilcoxonResult {
        n,
        w_plus,
        z,
        p_greater: normal.sf(z),
    })
}

/// Jarque–Bera statistic and its asymptotic χ²(2) p-value.
pub fn jarque_bera(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 3 {
        return Err(Error::invalid("Jarque-Bera needs at least three values"));
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let m = |k: i32| values.iter().map(|v| (v - mean).powi(k)).sum::<f64>() / nf;
    let (m2, m3, m4) = (m(2), m(3), m(4));
    if m2 <= 0.0 {
        return Err(Error::invalid("Jarque-Bera of constant values is undefined"));
    }
    let skew = m3 / m2.powf(1.5);
    let kurt = m4 / (m2 * m2);
    let jb = nf / 6.0 * (skew * skew + (kurt - 3.0).powi(2) / 4.0);
    let chi2 = ChiSquared::new(2.0).expect("valid degrees of freedom");
    Ok((jb, chi2.sf(jb)))
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (`n − 1`), zero for fewer than two values.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

/// Paired effect size: mean difference divided by the standard deviation of
/// the differences (Cohen's d_z). Zero when the differences are constant.
pub fn paired_effect_size(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let s = std_dev(&d);
    if s > 0.0 {
        mean(&d) / s
    } else {
        0.0
    }
}
