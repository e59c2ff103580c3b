//! Daily price series, day-count conventions and the sliding-window slicer
//! that turns a series into conditioned training/test samples.

mod io;
mod synthetic;

pub use io::{read_rates_csv, read_series_csv, write_rates_csv, write_series_csv};
pub use synthetic::{synthesize_rates, synthesize_series, SyntheticConfig};

use chrono::{Duration, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Trading days per year used for annualisation.
pub const TRADING_DAYS_PER_YEAR: f64 = 252.0;
/// Calendar days per year used for calendar time to maturity.
pub const CALENDAR_DAYS_PER_YEAR: f64 = 365.0;

/// Closing prices keyed by calendar date with a trading-day flag.
///
/// Non-trading dates may be present (their close is ignored by the slicer)
/// or omitted entirely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailySeries {
    dates: Vec<NaiveDate>,
    closes: Vec<f64>,
    is_trading_day: Vec<bool>,
}

impl DailySeries {
    pub fn new(dates: Vec<NaiveDate>, closes: Vec<f64>, is_trading_day: Vec<bool>) -> Result<Self> {
        if dates.len() != closes.len() || dates.len() != is_trading_day.len() {
            return Err(Error::shape(
                format!("{} closes and flags", dates.len()),
                format!("{} closes, {} flags", closes.len(), is_trading_day.len()),
            ));
        }
        if let Some(w) = dates.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::Data(format!(
                "dates must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        if let Some((d, c)) = dates
            .iter()
            .zip(&closes)
            .find(|(_, c)| !(c.is_finite() && **c > 0.0))
        {
            return Err(Error::Data(format!("non-positive close {c} on {d}")));
        }
        let trading = is_trading_day.iter().filter(|t| **t).count();
        if trading < 2 {
            return Err(Error::InsufficientData {
                needed: 2,
                got: trading,
            });
        }
        Ok(Self {
            dates,
            closes,
            is_trading_day,
        })
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn closes(&self) -> &[f64] {
        &self.closes
    }

    pub fn is_trading_day(&self) -> &[bool] {
        &self.is_trading_day
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn first_date(&self) -> NaiveDate {
        self.dates[0]
    }

    pub fn last_date(&self) -> NaiveDate {
        self.dates[self.dates.len() - 1]
    }

    /// Indices of trading days, in date order.
    pub fn trading_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_trading_day[i]).collect()
    }
}

/// Risk-free rate observations for one tenor, forward-filled by date.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateTable {
    pub tenor_days: u32,
    observations: Vec<(NaiveDate, f64)>,
}

impl RateTable {
    pub fn new(tenor_days: u32, mut observations: Vec<(NaiveDate, f64)>) -> Result<Self> {
        if let Some((d, r)) = observations.iter().find(|(_, r)| !r.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite rate {r} on {d} for tenor {tenor_days}"
            )));
        }
        observations.sort_by_key(|(d, _)| *d);
        observations.dedup_by_key(|(d, _)| *d);
        Ok(Self {
            tenor_days,
            observations,
        })
    }

    pub fn observations(&self) -> &[(NaiveDate, f64)] {
        &self.observations
    }

    /// Last observed rate on or before `date`.
    pub fn rate_on(&self, date: NaiveDate) -> Option<f64> {
        let idx = self.observations.partition_point(|(d, _)| *d <= date);
        idx.checked_sub(1).map(|i| self.observations[i].1)
    }
}

/// Conditioning features attached to every slice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionVector {
    /// Annualised volatility of the trading year before the slice start.
    pub sigma_hist: f64,
    /// Matched risk-free rate at the slice start.
    pub r: f64,
    /// Calendar days in the window over 365.
    pub t_calendar: f64,
    /// Trading days in the window (start inclusive) over 252.
    pub t_trading: f64,
    /// Number of daily return steps in the slice.
    pub n_trading: usize,
}

/// Number of scalar features fed to the condition embedding.
pub const CONDITION_DIM: usize = 5;

impl ConditionVector {
    /// Network input features. The step count is rescaled to years so all
    /// features share a comparable magnitude.
    pub fn features(&self) -> [f64; CONDITION_DIM] {
        [
            self.sigma_hist,
            self.r,
            self.t_calendar,
            self.t_trading,
            self.n_trading as f64 / TRADING_DAYS_PER_YEAR,
        ]
    }
}

/// One conditioned sample: log returns of a window plus its padding mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSlice {
    pub start_date: NaiveDate,
    pub s0: f64,
    /// Valid log returns only; padding is implied by `mask`.
    pub log_returns: Vec<f64>,
    pub mask: Vec<bool>,
    pub condition: ConditionVector,
    pub window_calendar_days: u32,
}

impl PathSlice {
    pub fn valid_len(&self) -> usize {
        self.log_returns.len()
    }

    pub fn padded_len(&self) -> usize {
        self.mask.len()
    }

    /// Log returns zero-padded to the mask length.
    pub fn padded_returns(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.mask.len()];
        out[..self.log_returns.len()].copy_from_slice(&self.log_returns);
        out
    }

    /// Realised closes after the start date.
    pub fn prices(&self) -> Vec<f64> {
        crate::sampler::to_prices(self.s0, &self.log_returns)
            .expect("slice s0 validated positive at construction")
    }
}

pub fn log_return(p_prev: f64, p_curr: f64) -> Result<f64> {
    if !(p_prev > 0.0) || !(p_curr > 0.0) {
        return Err(Error::Domain(format!(
            "log return needs positive prices, got {p_prev} -> {p_curr}"
        )));
    }
    Ok((p_curr / p_prev).ln())
}

pub fn log_returns(prices: &[f64]) -> Result<Vec<f64>> {
    prices.windows(2).map(|w| log_return(w[0], w[1])).collect()
}

/// Sample standard deviation of daily log returns scaled by sqrt(252).
pub fn annualized_volatility(log_returns: &[f64]) -> Result<f64> {
    let n = log_returns.len();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let mean = log_returns.iter().sum::<f64>() / n as f64;
    let ss: f64 = log_returns.iter().map(|r| (r - mean).powi(2)).sum();
    Ok((TRADING_DAYS_PER_YEAR / (n - 1) as f64 * ss).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceConfig {
    /// Window lengths in calendar days.
    pub windows: Vec<u32>,
    /// Slices starting before this date are training data.
    pub split_date: NaiveDate,
    /// Padded length is rounded up to a multiple of this.
    pub length_multiple: usize,
    /// Trailing returns used for the historical volatility feature.
    pub history_returns: usize,
    /// Minimum trailing returns required when fewer than `history_returns` exist.
    pub min_history_returns: usize,
}

impl SliceConfig {
    pub fn new(windows: Vec<u32>, split_date: NaiveDate) -> Self {
        Self {
            windows,
            split_date,
            length_multiple: 4,
            history_returns: 252,
            min_history_returns: 60,
        }
    }
}

/// Why candidate slices were dropped.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipCounts {
    /// Windows longer than the whole series.
    pub window_too_long: usize,
    /// Not enough trailing history for the volatility feature.
    pub short_history: usize,
    /// No rate observation on or before the start date.
    pub missing_rate: usize,
    /// Training candidates whose window crosses the split date.
    pub straddles_split: usize,
    /// Windows containing no return step.
    pub empty_window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlicedDataset {
    pub train: Vec<PathSlice>,
    pub test: Vec<PathSlice>,
    pub l_max: usize,
    pub skipped: SkipCounts,
}

enum Candidate {
    Slice(PathSlice),
    Skip(fn(&mut SkipCounts)),
}

/// Cut the series into daily-stride windows and split them by start date.
///
/// Training slices never touch a date on or after the split date; the
/// volatility feature only uses closes strictly before each slice start.
pub fn slice_dataset(
    series: &DailySeries,
    rates: &[RateTable],
    config: &SliceConfig,
) -> Result<SlicedDataset> {
    if config.windows.is_empty() {
        return Err(Error::Config("no slice windows configured".into()));
    }
    if config.length_multiple == 0 {
        return Err(Error::Config("length_multiple must be positive".into()));
    }
    if config.min_history_returns < 2 || config.min_history_returns > config.history_returns {
        return Err(Error::Config(format!(
            "history bounds invalid: min {} / full {}",
            config.min_history_returns, config.history_returns
        )));
    }
    let mut matched = Vec::with_capacity(config.windows.len());
    for &w in &config.windows {
        if w == 0 {
            return Err(Error::Config("window length must be positive".into()));
        }
        let table = rates.iter().find(|t| t.tenor_days == w).ok_or_else(|| {
            Error::Data(format!("no risk-free rate table matches the {w}-day window"))
        })?;
        if table.observations().is_empty() {
            return Err(Error::Data(format!("rate table for tenor {w} is empty")));
        }
        matched.push((w, table));
    }

    let dates = series.dates();
    let trading = series.trading_indices();
    let closes = series.closes();
    let span_days = (series.last_date() - series.first_date()).num_days() + 1;

    let mut skipped = SkipCounts::default();
    let mut slices = Vec::new();
    for (w, table) in matched {
        if i64::from(w) > span_days {
            skipped.window_too_long += 1;
            continue;
        }
        let candidates: Vec<Candidate> = (0..trading.len())
            .into_par_iter()
            .filter_map(|k| {
                let start = dates[trading[k]];
                let end = start + Duration::days(i64::from(w));
                if end - Duration::days(1) > series.last_date() {
                    return None;
                }
                Some(build_candidate(
                    dates, closes, &trading, k, w, end, table, config,
                ))
            })
            .collect();
        for c in candidates {
            match c {
                Candidate::Slice(s) => slices.push(s),
                Candidate::Skip(f) => f(&mut skipped),
            }
        }
    }

    let l_max = slices
        .iter()
        .map(PathSlice::valid_len)
        .max()
        .map(|n| n.div_ceil(config.length_multiple) * config.length_multiple)
        .unwrap_or(0);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut s in slices {
        s.mask = (0..l_max).map(|i| i < s.log_returns.len()).collect();
        if s.start_date < config.split_date {
            train.push(s);
        } else {
            test.push(s);
        }
    }
    Ok(SlicedDataset {
        train,
        test,
        l_max,
        skipped,
    })
}

#[allow(clippy::too_many_arguments)]
fn build_candidate(
    dates: &[NaiveDate],
    closes: &[f64],
    trading: &[usize],
    k: usize,
    window: u32,
    end: NaiveDate,
    table: &RateTable,
    config: &SliceConfig,
) -> Candidate {
    let start = dates[trading[k]];
    if start < config.split_date && end > config.split_date {
        return Candidate::Skip(|s| s.straddles_split += 1);
    }
    let in_window = trading[k..].partition_point(|&i| dates[i] < end);
    if in_window < 2 {
        return Candidate::Skip(|s| s.empty_window += 1);
    }
    let history_closes = (config.history_returns + 1).min(k);
    if history_closes < config.min_history_returns + 1 {
        return Candidate::Skip(|s| s.short_history += 1);
    }
    let Some(r) = table.rate_on(start) else {
        return Candidate::Skip(|s| s.missing_rate += 1);
    };
    let hist: Vec<f64> = trading[k - history_closes..k].iter().map(|&i| closes[i]).collect();
    let window_closes: Vec<f64> = trading[k..k + in_window].iter().map(|&i| closes[i]).collect();
    // closes are validated positive by DailySeries
    let sigma_hist = annualized_volatility(&log_returns(&hist).expect("positive closes"))
        .expect("history length checked");
    let returns = log_returns(&window_closes).expect("positive closes");
    let n = returns.len();
    Candidate::Slice(PathSlice {
        start_date: start,
        s0: window_closes[0],
        log_returns: returns,
        mask: Vec::new(),
        condition: ConditionVector {
            sigma_hist,
            r,
            t_calendar: f64::from(window) / CALENDAR_DAYS_PER_YEAR,
            t_trading: in_window as f64 / TRADING_DAYS_PER_YEAR,
            n_trading: n,
        },
        window_calendar_days: window,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    #[test]
    fn log_return_examples() {
        assert_eq!(log_return(100.0, 100.0).unwrap(), 0.0);
        assert_relative_eq!(log_return(100.0, 110.0).unwrap(), 0.0953101798043249, epsilon = 1e-15);
        assert!(matches!(log_return(100.0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(log_return(-1.0, 2.0), Err(Error::Domain(_))));
    }

    #[test]
    fn annualized_volatility_examples() {
        assert_eq!(annualized_volatility(&[0.01, 0.01, 0.01]).unwrap(), 0.0);
        // sample std of the alternating series is sqrt(4e-4/3)
        let v = annualized_volatility(&[0.01, -0.01, 0.01, -0.01]).unwrap();
        assert_relative_eq!(v, (4e-4f64 / 3.0).sqrt() * 252f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(v, 0.183300, epsilon = 5e-6);
        assert!(matches!(
            annualized_volatility(&[0.01]),
            Err(Error::InsufficientData { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn rate_table_forward_fills() {
        let t = RateTable::new(30, vec![(date(2020, 1, 3), 0.02), (date(2020, 1, 1), 0.01)]).unwrap();
        assert_eq!(t.rate_on(date(2019, 12, 31)), None);
        assert_eq!(t.rate_on(date(2020, 1, 2)), Some(0.01));
        assert_eq!(t.rate_on(date(2020, 1, 3)), Some(0.02));
        assert_eq!(t.rate_on(date(2021, 6, 1)), Some(0.02));
    }

    #[test]
    fn series_rejects_bad_input() {
        let d = vec![date(2020, 1, 1), date(2020, 1, 2)];
        assert!(DailySeries::new(d.clone(), vec![1.0, 0.0], vec![true, true]).is_err());
        assert!(DailySeries::new(d.clone(), vec![1.0, 1.0], vec![true, false]).is_err());
        assert!(DailySeries::new(vec![d[1], d[0]], vec![1.0, 1.0], vec![true, true]).is_err());
        assert!(DailySeries::new(d, vec![1.0, 1.0], vec![true, true]).is_ok());
    }

    fn flat_rates(series: &DailySeries, tenors: &[u32]) -> Vec<RateTable> {
        tenors
            .iter()
            .map(|&t| RateTable::new(t, vec![(series.first_date(), 0.02)]).unwrap())
            .collect()
    }

    fn three_year_series() -> DailySeries {
        synthesize_series(
            &SyntheticConfig {
                start_date: date(2020, 1, 1),
                n_calendar_days: 3 * 365,
                ..SyntheticConfig::default()
            },
            11,
        )
        .unwrap()
    }

    #[test]
    fn train_slices_end_before_split() {
        let series = three_year_series();
        let split = date(2022, 1, 1);
        let ds = slice_dataset(&series, &flat_rates(&series, &[30]), &SliceConfig::new(vec![30], split)).unwrap();
        assert!(!ds.train.is_empty() && !ds.test.is_empty());
        for s in &ds.train {
            assert!(s.start_date + Duration::days(29) < split);
        }
        assert!(ds.test.iter().all(|s| s.start_date >= split));
        assert!(ds.skipped.straddles_split > 0);
    }

    #[test]
    fn short_series_yields_bounded_slice_count() {
        // every start must leave 365 calendar days inside a 400-day series,
        // so at most 36 start dates exist
        let series = synthesize_series(
            &SyntheticConfig {
                start_date: date(2020, 1, 1),
                n_calendar_days: 400,
                ..SyntheticConfig::default()
            },
            3,
        )
        .unwrap();
        let mut cfg = SliceConfig::new(vec![365], date(2030, 1, 1));
        cfg.min_history_returns = 2;
        let ds = slice_dataset(&series, &flat_rates(&series, &[365]), &cfg).unwrap();
        let oracle = (0..400)
            .map(|i| date(2020, 1, 1) + Duration::days(i))
            .filter(|d| *d + Duration::days(364) <= series.last_date())
            .count();
        assert_eq!(oracle, 36);
        assert!(ds.train.len() + ds.test.len() <= oracle);
    }

    #[test]
    fn empty_rate_table_is_an_error() {
        let series = three_year_series();
        let cfg = SliceConfig::new(vec![30], date(2022, 1, 1));
        assert!(matches!(slice_dataset(&series, &[], &cfg), Err(Error::Data(_))));
        let empty = vec![RateTable::new(30, vec![]).unwrap()];
        assert!(matches!(slice_dataset(&series, &empty, &cfg), Err(Error::Data(_))));
    }

    #[test]
    fn window_longer_than_series_is_counted() {
        let series = three_year_series();
        let cfg = SliceConfig::new(vec![30, 5000], date(2022, 1, 1));
        let ds = slice_dataset(&series, &flat_rates(&series, &[30, 5000]), &cfg).unwrap();
        assert_eq!(ds.skipped.window_too_long, 1);
        assert!(ds.train.iter().all(|s| s.window_calendar_days == 30));
    }

    #[test]
    fn slices_round_trip_to_source_closes() {
        let series = three_year_series();
        let ds = slice_dataset(
            &series,
            &flat_rates(&series, &[90]),
            &SliceConfig::new(vec![90], date(2022, 1, 1)),
        )
        .unwrap();
        let dates = series.dates();
        for s in ds.train.iter().step_by(37) {
            let start = dates.iter().position(|d| *d == s.start_date).unwrap();
            let source: Vec<f64> = (start..series.len())
                .filter(|&i| series.is_trading_day()[i])
                .map(|i| series.closes()[i])
                .skip(1)
                .take(s.valid_len())
                .collect();
            for (a, b) in s.prices().iter().zip(&source) {
                assert!(((a - b) / b).abs() < 1e-12);
            }
            assert_eq!(s.mask.iter().filter(|m| **m).count(), s.valid_len());
            assert!(s.mask.iter().skip_while(|m| **m).all(|m| !*m));
            assert_eq!(s.padded_len(), ds.l_max);
            assert_eq!(ds.l_max % 4, 0);
            assert!(s.condition.n_trading as u32 <= s.window_calendar_days);
        }
    }

    #[test]
    fn sigma_hist_uses_only_prior_closes() {
        let series = three_year_series();
        let cfg = SliceConfig::new(vec![30], date(2022, 1, 1));
        let rates = flat_rates(&series, &[30]);
        let base = slice_dataset(&series, &rates, &cfg).unwrap();
        let target = &base.test[10];
        // perturb every close from the slice start onwards
        let bumped: Vec<f64> = series
            .dates()
            .iter()
            .zip(series.closes())
            .map(|(d, c)| if *d >= target.start_date { c * 1.5 } else { *c })
            .collect();
        let series2 =
            DailySeries::new(series.dates().to_vec(), bumped, series.is_trading_day().to_vec()).unwrap();
        let again = slice_dataset(&series2, &rates, &cfg).unwrap();
        let same = again.test.iter().find(|s| s.start_date == target.start_date).unwrap();
        assert_eq!(same.condition.sigma_hist, target.condition.sigma_hist);
    }
}
