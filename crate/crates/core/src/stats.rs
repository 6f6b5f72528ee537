//! Nonparametric comparison of paired samples: Wilcoxon signed-rank test
//! with effect size `r = |z| / sqrt(n)`, and Cliff's delta.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::{Error, Result};

/// Largest number of nonzero differences for which the exact null
/// distribution is used.
pub const EXACT_MAX_N: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub baseline: Vec<f64>,
    pub variant: Vec<f64>,
}

impl PairedSample {
    pub fn new(baseline: Vec<f64>, variant: Vec<f64>) -> Result<Self> {
        if baseline.len() != variant.len() {
            return Err(Error::LengthMismatch(format!(
                "paired samples differ in length: {} vs {}",
                baseline.len(),
                variant.len()
            )));
        }
        if baseline.is_empty() {
            return Err(Error::Degenerate("paired sample is empty".into()));
        }
        if baseline.iter().chain(&variant).any(|v| !v.is_finite()) {
            return Err(Error::Validation("paired sample has non-finite values".into()));
        }
        Ok(Self { baseline, variant })
    }

    /// `variant - baseline` per pair.
    pub fn differences(&self) -> Vec<f64> {
        self.variant.iter().zip(&self.baseline).map(|(v, b)| v - b).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alternative {
    #[default]
    TwoSided,
    /// Variant tends to exceed baseline.
    Greater,
    /// Variant tends to fall below baseline.
    Less,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Nonzero differences.
    pub n: usize,
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    pub z: f64,
    pub p_value: f64,
    pub r: f64,
    pub exact: bool,
}

/// Ranks of `values` (1-based), ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Exact null distribution of the doubled rank sum: `counts[s]` is the number
/// of sign assignments whose positive doubled ranks sum to `s`.
fn signed_rank_counts(doubled_ranks: &[u64]) -> Vec<f64> {
    let total: u64 = doubled_ranks.iter().sum();
    let mut counts = vec![0.0; total as usize + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in doubled_ranks {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    counts
}

pub fn wilcoxon_signed_rank(sample: &PairedSample, alternative: Alternative) -> Result<WilcoxonResult> {
    let diffs: Vec<f64> = sample.differences().into_iter().filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n == 0 {
        return Err(Error::Degenerate("all paired differences are zero".into()));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    {
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i;
            while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_term += t * t * t - t;
            i = j + 1;
        }
    }
    let sd = (nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0).sqrt();
    let dev = w_plus - mean;
    let corrected = (dev.abs() - 0.5).max(0.0) * dev.signum();
    let z = if sd > 0.0 { corrected / sd } else { 0.0 };

    let (p_value, exact) = if n <= EXACT_MAX_N {
        let doubled: Vec<u64> = ranks.iter().map(|r| (r * 2.0).round() as u64).collect();
        let counts = signed_rank_counts(&doubled);
        let w2 = (w_plus * 2.0).round() as usize;
        let total = 2f64.powi(n as i32);
        let upper = counts[w2..].iter().sum::<f64>() / total;
        let lower = counts[..=w2].iter().sum::<f64>() / total;
        let p = match alternative {
            Alternative::Greater => upper,
            Alternative::Less => lower,
            Alternative::TwoSided => (2.0 * upper.min(lower)).min(1.0),
        };
        (p, true)
    } else {
        let p = match alternative {
            Alternative::Greater => 1.0 - std_normal_cdf((dev - 0.5) / sd),
            Alternative::Less => std_normal_cdf((dev + 0.5) / sd),
            Alternative::TwoSided => (2.0 * (1.0 - std_normal_cdf(z.abs()))).min(1.0),
        };
        (p, false)
    };

    Ok(WilcoxonResult {
        n,
        w_plus,
        z,
        p_value: p_value.clamp(0.0, 1.0),
        r: z.abs() / nf.sqrt(),
        exact,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Magnitude {
    Negligible,
    Small,
    Medium,
    Large,
}

impl Magnitude {
    /// Romano et al. cutoffs: 0.147 / 0.33 / 0.474.
    pub fn from_delta(delta: f64) -> Self {
        let d = delta.abs();
        if d < 0.147 {
            Magnitude::Negligible
        } else if d < 0.33 {
            Magnitude::Small
        } else if d < 0.474 {
            Magnitude::Medium
        } else {
            Magnitude::Large
        }
    }
}

/// Cliff's delta of `variant` over `baseline`: P(variant > baseline) minus
/// P(variant < baseline) over all cross pairs. O((n + m) log n).
pub fn cliffs_delta(baseline: &[f64], variant: &[f64]) -> Result<(f64, Magnitude)> {
    if baseline.is_empty() || variant.is_empty() {
        return Err(Error::Degenerate("Cliff's delta needs two nonempty groups".into()));
    }
    if baseline.iter().chain(variant).any(|v| v.is_nan()) {
        return Err(Error::Validation("NaN in Cliff's delta input".into()));
    }
    let mut sorted = baseline.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut greater = 0i64;
    let mut less = 0i64;
    for &v in variant {
        let below = sorted.partition_point(|&b| b < v);
        let not_above = sorted.partition_point(|&b| b <= v);
        greater += below as i64;
        less += (sorted.len() - not_above) as i64;
    }
    let delta = (greater - less) as f64 / (baseline.len() * variant.len()) as f64;
    Ok((delta, Magnitude::from_delta(delta)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub p_value: f64,
    pub z: f64,
    pub effect_r: f64,
    pub delta: f64,
    pub magnitude: Magnitude,
    pub n_nonzero: usize,
    pub exact: bool,
}

/// Wilcoxon signed-rank plus Cliff's delta on one paired sample.
pub fn compare(sample: &PairedSample, alternative: Alternative) -> Result<TestResult> {
    let w = wilcoxon_signed_rank(sample, alternative)?;
    let (delta, magnitude) = cliffs_delta(&sample.baseline, &sample.variant)?;
    Ok(TestResult {
        p_value: w.p_value,
        z: w.z,
        effect_r: w.r,
        delta,
        magnitude,
        n_nonzero: w.n,
        exact: w.exact,
    })
}
