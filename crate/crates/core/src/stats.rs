//! Summary statistics and the few hypothesis tests the verification suites
//! rely on.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{usage, Result};

/// Sample mean, unbiased variance and their standard errors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub var: f64,
    /// `sqrt(var / n)`.
    pub se_mean: f64,
    /// Delta-method SE of the variance, `sqrt((m4 - var²) / n)`.
    pub se_var: f64,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    let n = values.len();
    if n < 2 {
        return usage(format!("need at least 2 values for a standard error, got {n}"));
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let (mut m2, mut m4) = (0.0, 0.0);
    for v in values {
        let d = (v - mean) * (v - mean);
        m2 += d;
        m4 += d * d;
    }
    let var = m2 / (nf - 1.0);
    let m4 = m4 / nf;
    let pop_var = m2 / nf;
    Ok(Summary {
        n,
        mean,
        var,
        se_mean: (var / nf).sqrt(),
        se_var: ((m4 - pop_var * pop_var).max(0.0) / nf).sqrt(),
    })
}

/// `k`-th sample central moment.
pub fn central_moment(values: &[f64], k: i32) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(k)).sum::<f64>() / n
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return usage("KS test needs two non-empty samples");
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let ne = (na * nb / (na + nb)).sqrt();
    Ok((d, kolmogorov_q((ne + 0.12 + 0.11 / ne) * d)))
}

/// Survival function of the Kolmogorov distribution.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = 2.0 * (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// Pearson chi-square test that two count vectors share one distribution.
/// Categories empty in both samples are skipped.
pub fn chi_square_homogeneity(a: &[u64], b: &[u64]) -> Result<f64> {
    if a.len() != b.len() {
        return usage("count vectors differ in length");
    }
    let (na, nb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    if na == 0.0 || nb == 0.0 {
        return usage("chi-square test needs non-empty samples");
    }
    let total = na + nb;
    let mut stat = 0.0;
    let mut cells = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        let col = (x + y) as f64;
        if col == 0.0 {
            continue;
        }
        cells += 1;
        let (ea, eb) = (col * na / total, col * nb / total);
        stat += (x as f64 - ea).powi(2) / ea + (y as f64 - eb).powi(2) / eb;
    }
    if cells < 2 {
        return Ok(1.0);
    }
    let dist = ChiSquared::new((cells - 1) as f64).expect("positive degrees of freedom");
    Ok(1.0 - dist.cdf(stat))
}
