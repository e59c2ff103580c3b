//! Distributional comparison of generated against realised returns.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_paths::annualized_volatility;
use crate::objectives::kurtosis;

fn sorted(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN in sample".into()));
    }
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// Survival function of the Kolmogorov distribution, `P(K > lambda)`.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let p = if lambda < 1.18 {
        // small-lambda form converges far faster than the alternating series
        let pi2 = std::f64::consts::PI.powi(2);
        let c = (2.0 * std::f64::consts::PI).sqrt() / lambda;
        let cdf: f64 = (1..=20)
            .map(|k| {
                let j = (2 * k - 1) as f64;
                (-j * j * pi2 / (8.0 * lambda * lambda)).exp()
            })
            .sum::<f64>()
            * c;
        1.0 - cdf
    } else {
        2.0 * (1..=100)
            .map(|k| {
                let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
                sign * (-2.0 * (k * k) as f64 * lambda * lambda).exp()
            })
            .sum::<f64>()
    };
    p.clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov–Smirnov statistic with its asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    let a = sorted(a)?;
    let b = sorted(b)?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let ne = na * nb / (na + nb);
    Ok((d, kolmogorov_survival(ne.sqrt() * d)))
}

/// First Wasserstein distance between the empirical distributions.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    let a = sorted(a)?;
    let b = sorted(b)?;
    if a.len() == b.len() {
        return Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64);
    }
    // integral of |F_a - F_b| over the pooled support
    let mut pooled: Vec<f64> = a.iter().chain(&b).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut total = 0.0;
    for w in pooled.windows(2) {
        while i < a.len() && a[i] <= w[0] {
            i += 1;
        }
        while j < b.len() && b[j] <= w[0] {
            j += 1;
        }
        total += (i as f64 / na - j as f64 / nb).abs() * (w[1] - w[0]);
    }
    Ok(total)
}

/// Quantile at probability `p` with midpoint plotting positions, so that
/// `p = (i + 0.5) / n` returns the `i`-th order statistic exactly.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (p * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Least-squares R² through `(x, y)`; `None` when either side has no spread.
pub fn r_squared(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy * sxy / (sxx * syy)).min(1.0))
}

/// R² of the QQ plot of `b` against `a`, evaluated at the plotting positions
/// of the smaller sample.
pub fn qq_r_squared(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    let a = sorted(a)?;
    let b = sorted(b)?;
    let m = a.len().min(b.len());
    if m < 2 {
        return Err(Error::InsufficientData { needed: 2, got: m });
    }
    let ps: Vec<f64> = (0..m).map(|i| (i as f64 + 0.5) / m as f64).collect();
    let qa: Vec<f64> = ps.iter().map(|p| quantile(&a, *p)).collect();
    let qb: Vec<f64> = ps.iter().map(|p| quantile(&b, *p)).collect();
    Ok(r_squared(&qa, &qb))
}

/// Metrics for one condition. Differences are absolute values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub mean_diff: f64,
    pub vol_diff: f64,
    pub kurt_diff: Option<f64>,
    pub ks_stat: f64,
    pub ks_pvalue: f64,
    pub wasserstein: f64,
    pub qq_r2: Option<f64>,
}

fn pooled(paths: &[Vec<f64>]) -> Vec<f64> {
    paths.iter().flatten().copied().collect()
}

/// Compare pooled daily returns of real and generated paths for one condition.
pub fn compare_condition(real: &[Vec<f64>], generated: &[Vec<f64>]) -> Result<MetricRow> {
    let r = pooled(real);
    let g = pooled(generated);
    if r.len() < 2 || g.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: r.len().min(g.len()),
        });
    }
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let kurt_diff = match (kurtosis(&r), kurtosis(&g)) {
        (Ok(a), Ok(b)) => Some((a - b).abs()),
        _ => None,
    };
    let (ks_stat, ks_pvalue) = ks_two_sample(&r, &g)?;
    Ok(MetricRow {
        mean_diff: (mean(&r) - mean(&g)).abs(),
        vol_diff: (annualized_volatility(&r)? - annualized_volatility(&g)?).abs(),
        kurt_diff,
        ks_stat,
        ks_pvalue,
        wasserstein: wasserstein1(&r, &g)?,
        qq_r2: qq_r_squared(&r, &g)?,
    })
}

pub const METRIC_NAMES: [&str; 7] = [
    "mean_diff",
    "vol_diff",
    "kurt_diff",
    "ks_stat",
    "ks_pvalue",
    "wasserstein",
    "qq_r2",
];

impl MetricRow {
    fn values(&self) -> [Option<f64>; 7] {
        [
            Some(self.mean_diff),
            Some(self.vol_diff),
            self.kurt_diff,
            Some(self.ks_stat),
            Some(self.ks_pvalue),
            Some(self.wasserstein),
            self.qq_r2,
        ]
    }
}

/// Mean and sample standard deviation of one metric across conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Conditions where the metric was defined.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub n_conditions: usize,
    pub metrics: Vec<MetricSummary>,
}

impl ValidationReport {
    pub fn from_rows(rows: &[MetricRow]) -> Self {
        let metrics = METRIC_NAMES
            .iter()
            .enumerate()
            .map(|(k, name)| {
                let vals: Vec<f64> = rows.iter().filter_map(|r| r.values()[k]).collect();
                let n = vals.len();
                let mean = (n > 0).then(|| vals.iter().sum::<f64>() / n as f64);
                let std = mean.map(|m| {
                    if n > 1 {
                        (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                    } else {
                        0.0
                    }
                });
                MetricSummary {
                    metric: name.to_string(),
                    mean,
                    std,
                    count: n,
                }
            })
            .collect();
        Self {
            n_conditions: rows.len(),
            metrics,
        }
    }

    pub fn get(&self, metric: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.metric == metric)
    }

    /// `metric,mean,std`, with `NA` where a metric was never defined.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |x| x.to_string());
        writeln!(w, "metric,mean,std")?;
        for m in &self.metrics {
            writeln!(w, "{},{},{}", m.metric, fmt(m.mean), fmt(m.std))?;
        }
        w.flush()?;
        Ok(())
    }
}
