//! Risk-neutral GBM Monte Carlo valuation (the market maker's model), and
//! the same estimator applied to externally generated paths.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_paths::TRADING_DAYS_PER_YEAR;
use crate::payoffs::{path_value, ContractSpec};
use crate::sampler::to_prices;

/// Paths simulated from one generator substream.
pub const CHUNK_PATHS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbmParams {
    pub s0: f64,
    pub r: f64,
    pub sigma: f64,
    pub n_days: usize,
    pub n_paths: usize,
    pub seed: u64,
}

impl GbmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.s0 > 0.0) || !(self.sigma >= 0.0) || !self.r.is_finite() || !self.sigma.is_finite() {
            return Err(Error::Domain(format!(
                "GBM needs s0 > 0, finite r and sigma >= 0 (s0={}, r={}, sigma={})",
                self.s0, self.r, self.sigma
            )));
        }
        if self.n_paths == 0 || self.n_days == 0 {
            return Err(Error::Domain("GBM needs at least one path and one day".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_paths: usize,
}

/// Daily log returns of one exact-discretised GBM path.
pub fn gbm_log_returns(rng: &mut ChaCha8Rng, r: f64, sigma: f64, n_days: usize) -> Vec<f64> {
    let dt = 1.0 / TRADING_DAYS_PER_YEAR;
    let drift = (r - 0.5 * sigma * sigma) * dt;
    let vol = sigma * dt.sqrt();
    (0..n_days)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            drift + vol * z
        })
        .collect()
}

/// Apply `f` to every simulated log-return path in order, chunk-parallel.
fn map_gbm_paths<T, F>(params: &GbmParams, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(Vec<f64>) -> Result<T> + Sync,
{
    params.validate()?;
    let chunks = params.n_paths.div_ceil(CHUNK_PATHS);
    let out: Vec<Vec<T>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(c as u64);
            let n = CHUNK_PATHS.min(params.n_paths - c * CHUNK_PATHS);
            (0..n)
                .map(|_| f(gbm_log_returns(&mut rng, params.r, params.sigma, params.n_days)))
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(out.into_iter().flatten().collect())
}

/// Simulated log-return paths; identical for a fixed seed at any thread count.
pub fn simulate_gbm_returns(params: &GbmParams) -> Result<Vec<Vec<f64>>> {
    map_gbm_paths(params, Ok)
}

/// Simulated price paths over days `1..=n_days`.
pub fn simulate_gbm(params: &GbmParams) -> Result<Vec<Vec<f64>>> {
    map_gbm_paths(params, |r| to_prices(params.s0, &r))
}

/// Neumaier-compensated sum in slice order.
pub fn compensated_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Sample mean and standard error of per-path values.
pub fn estimate(values: &[f64]) -> Result<PriceEstimate> {
    if values.is_empty() {
        return Err(Error::Data("no paths to value".into()));
    }
    let n = values.len();
    let mean = compensated_sum(values) / n as f64;
    let std_error = if n > 1 {
        let sq: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
        (compensated_sum(&sq) / (n - 1) as f64).sqrt() / (n as f64).sqrt()
    } else {
        0.0
    };
    Ok(PriceEstimate {
        value: mean,
        std_error,
        n_paths: n,
    })
}

/// Q value of a contract: mean discounted cash flow over simulated GBM paths.
pub fn price(contract: &ContractSpec, params: &GbmParams, t_calendar: f64) -> Result<PriceEstimate> {
    contract.validate()?;
    let values = map_gbm_paths(params, |r| {
        let path = to_prices(params.s0, &r)?;
        path_value(contract, &path, params.s0, params.r, t_calendar)
    })?;
    estimate(&values)
}

/// The same estimator over externally supplied log-return paths.
pub fn p_price(contract: &ContractSpec, log_return_paths: &[Vec<f64>], s0: f64, r: f64, t_calendar: f64) -> Result<PriceEstimate> {
    contract.validate()?;
    if log_return_paths.is_empty() {
        return Err(Error::Data("no generated paths to value".into()));
    }
    let n = log_return_paths[0].len();
    if log_return_paths.iter().any(|p| p.len() != n) {
        return Err(Error::Data("generated paths have differing horizons".into()));
    }
    let values: Vec<f64> = log_return_paths
        .par_iter()
        .map(|lr| path_value(contract, &to_prices(s0, lr)?, s0, r, t_calendar))
        .collect::<Result<_>>()?;
    estimate(&values)
}
