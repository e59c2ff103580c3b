use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DailySeries, RateTable, TRADING_DAYS_PER_YEAR};
use crate::error::{Error, Result};

/// Two-regime geometric Brownian motion on a weekday calendar.
///
/// The regime flips with probability `p_switch` on every trading day, which
/// produces persistent high/low volatility spells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub start_date: NaiveDate,
    pub n_calendar_days: usize,
    pub s0: f64,
    /// Annualised drift per regime.
    pub drift: [f64; 2],
    /// Annualised volatility per regime.
    pub vol: [f64; 2],
    pub p_switch: f64,
    /// Close the market on a fixed set of public holidays as well as weekends.
    pub holidays: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            start_date: NaiveDate::from_ymd_opt(2014, 1, 1).expect("valid date"),
            n_calendar_days: 10 * 365,
            s0: 5000.0,
            drift: [0.08, -0.05],
            vol: [0.15, 0.35],
            p_switch: 0.02,
            holidays: true,
        }
    }
}

fn is_holiday(d: NaiveDate) -> bool {
    matches!(
        (d.month(), d.day()),
        (1, 1) | (5, 1..=3) | (10, 1..=7)
    )
}

pub fn is_synthetic_trading_day(d: NaiveDate, holidays: bool) -> bool {
    !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) && !(holidays && is_holiday(d))
}

pub fn synthesize_series(config: &SyntheticConfig, seed: u64) -> Result<DailySeries> {
    if !(config.s0 > 0.0) || !config.s0.is_finite() {
        return Err(Error::Config(format!("synthetic s0 must be positive, got {}", config.s0)));
    }
    if config.vol.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Config(format!(
            "synthetic volatilities must be non-negative, got {:?}",
            config.vol
        )));
    }
    if config.drift.iter().any(|d| !d.is_finite()) {
        return Err(Error::Config("synthetic drifts must be finite".into()));
    }
    if !(0.0..=1.0).contains(&config.p_switch) {
        return Err(Error::Config(format!("p_switch {} outside [0,1]", config.p_switch)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = 1.0 / TRADING_DAYS_PER_YEAR;
    let mut dates = Vec::with_capacity(config.n_calendar_days);
    let mut closes = Vec::with_capacity(config.n_calendar_days);
    let mut flags = Vec::with_capacity(config.n_calendar_days);
    let mut regime = 0usize;
    let mut price = config.s0;
    let mut seen_trading_day = false;
    for i in 0..config.n_calendar_days {
        let d = config.start_date + Duration::days(i as i64);
        let trading = is_synthetic_trading_day(d, config.holidays);
        if trading {
            if seen_trading_day {
                if rng.gen::<f64>() < config.p_switch {
                    regime = 1 - regime;
                }
                let z: f64 = rng.sample(StandardNormal);
                let (mu, sigma) = (config.drift[regime], config.vol[regime]);
                price *= ((mu - 0.5 * sigma * sigma) * dt + sigma * dt.sqrt() * z).exp();
            }
            seen_trading_day = true;
        }
        dates.push(d);
        closes.push(price);
        flags.push(trading);
    }
    DailySeries::new(dates, closes, flags)
}

/// Constant rate per tenor, observed on trading days only so that weekend
/// and holiday gaps exercise the forward fill.
pub fn synthesize_rates(series: &DailySeries, levels: &[(u32, f64)]) -> Result<Vec<RateTable>> {
    levels
        .iter()
        .map(|&(tenor, rate)| {
            let obs = series
                .dates()
                .iter()
                .zip(series.is_trading_day())
                .filter(|(_, t)| **t)
                .map(|(d, _)| (*d, rate))
                .collect();
            RateTable::new(tenor, obs)
        })
        .collect()
}
