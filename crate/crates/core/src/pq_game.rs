//! Trader versus market-maker quoting game.
//!
//! The market maker (Q) quotes around its GBM Monte Carlo value with a
//! greediness margin. The trader (P) values the same contract on generated
//! paths and lifts the ask or hits the bid when its value clears the quote
//! by more than the threshold. Trades settle on the realised path.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_paths::{PathSlice, TRADING_DAYS_PER_YEAR};
use crate::payoffs::{path_value, ContractSpec};
use crate::q_pricer::{self, simulate_gbm_returns, GbmParams};

pub const DEFAULT_THRESHOLD: f64 = 0.10;
/// Floor on the quote magnitude used as the gap denominator.
pub const EPS_DEN: f64 = 1e-9;

pub const RELATIVE_LEVELS: [f64; 5] = [0.0, 0.1, 0.2, 0.3, 0.4];
pub const ABSOLUTE_LEVELS: [f64; 5] = [0.0, 0.005, 0.01, 0.015, 0.02];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpreadMode {
    /// Margin `g * |fair|` on each side.
    Relative,
    /// Margin `delta * notional` on each side.
    Absolute { notional: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quote {
    pub fair: f64,
    pub bid: f64,
    pub ask: f64,
    pub mode: SpreadMode,
}

/// Quote a two-sided market. For non-negative fair values the relative mode
/// is `fair * (1 -/+ g)`; using `|fair|` keeps `bid <= fair <= ask` when the
/// fair value is negative.
pub fn make_quote(fair: f64, level: f64, mode: SpreadMode) -> Result<Quote> {
    if !fair.is_finite() {
        return Err(Error::Numeric(format!("fair value {fair} is not finite")));
    }
    if !(level >= 0.0) || !level.is_finite() {
        return Err(Error::Config(format!("greediness must be >= 0, got {level}")));
    }
    let margin = match mode {
        SpreadMode::Relative => level * fair.abs(),
        SpreadMode::Absolute { notional } => level * notional,
    };
    Ok(Quote {
        fair,
        bid: fair - margin,
        ask: fair + margin,
        mode,
    })
}

pub fn default_levels(contract: &ContractSpec) -> (Vec<f64>, SpreadMode) {
    match contract.notional() {
        Some(notional) => (ABSOLUTE_LEVELS.to_vec(), SpreadMode::Absolute { notional }),
        None => (RELATIVE_LEVELS.to_vec(), SpreadMode::Relative),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Long,
    Short,
    None,
}

impl Side {
    pub fn as_str(&self) -> &'static str {
        match self {
            Side::Long => "long",
            Side::Short => "short",
            Side::None => "none",
        }
    }
}

/// Strict-inequality gap rule against the side that would be executed.
pub fn decide_trade(p_value: f64, quote: &Quote, threshold: f64) -> Side {
    if (p_value - quote.ask) / quote.ask.abs().max(EPS_DEN) > threshold {
        Side::Long
    } else if (quote.bid - p_value) / quote.bid.abs().max(EPS_DEN) > threshold {
        Side::Short
    } else {
        Side::None
    }
}

/// `(pnl_p, pnl_q)` of one executed trade; the two legs cancel exactly.
pub fn settle(side: Side, exec_price: f64, realized: f64) -> Result<(f64, f64)> {
    let pnl_p = match side {
        Side::Long => realized - exec_price,
        Side::Short => exec_price - realized,
        Side::None => return Err(Error::Domain("cannot settle a non-trade".into())),
    };
    Ok((pnl_p, -pnl_p))
}

/// Mean over sample standard deviation, annualised by `sqrt(252)`.
/// `None` with fewer than two points or zero spread.
pub fn sharpe_annualized(daily_pnl: &[f64]) -> Option<f64> {
    let n = daily_pnl.len();
    if n < 2 {
        return None;
    }
    let mean = daily_pnl.iter().sum::<f64>() / n as f64;
    let var = daily_pnl.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if !(var > 0.0) {
        return None;
    }
    Some(mean / var.sqrt() * TRADING_DAYS_PER_YEAR.sqrt())
}

/// Source of log-return paths for a slice's condition.
pub trait PathGenerator: Sync {
    fn generate(&self, slice: &PathSlice, n_paths: usize, seed: u64) -> Result<Vec<Vec<f64>>>;
}

/// Risk-neutral GBM at the slice's historical volatility and rate.
#[derive(Debug, Clone, Copy, Default)]
pub struct GbmGenerator;

pub fn gbm_params(slice: &PathSlice, n_paths: usize, seed: u64) -> GbmParams {
    GbmParams {
        s0: slice.s0,
        r: slice.condition.r,
        sigma: slice.condition.sigma_hist,
        n_days: slice.condition.n_trading,
        n_paths,
        seed,
    }
}

impl PathGenerator for GbmGenerator {
    fn generate(&self, slice: &PathSlice, n_paths: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        simulate_gbm_returns(&gbm_params(slice, n_paths, seed))
    }
}

/// Replays the slice's own realised returns; a perfect-foresight oracle.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReplayGenerator;

impl PathGenerator for ReplayGenerator {
    fn generate(&self, slice: &PathSlice, n_paths: usize, _seed: u64) -> Result<Vec<Vec<f64>>> {
        Ok(vec![slice.log_returns.clone(); n_paths])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GameConfig {
    pub threshold: f64,
    pub q_paths: usize,
    pub p_paths: usize,
    pub q_seed: u64,
    pub p_seed: u64,
    /// Discount P's path values at the matched rate.
    pub discount_p: bool,
    /// Discount realised cash flows to the trade date.
    pub discount_realized: bool,
}

impl Default for GameConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            q_paths: 20_000,
            p_paths: 1000,
            q_seed: 1,
            p_seed: 2,
            discount_p: true,
            discount_realized: true,
        }
    }
}

impl GameConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold >= 0.0) || self.q_paths == 0 || self.p_paths == 0 {
            return Err(Error::Config("game needs threshold >= 0 and positive path counts".into()));
        }
        Ok(())
    }
}

/// Seed for slice `index` derived from a run seed (splitmix64 finaliser).
pub fn slice_seed(base: u64, index: usize) -> u64 {
    let mut z = base.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Both models' values and the realised value for one slice, computed
/// once and shared by every greediness level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceValuation {
    pub start_date: NaiveDate,
    pub q_fair: f64,
    pub p_value: f64,
    pub realized: f64,
}

pub fn value_slice<G: PathGenerator + ?Sized>(
    slice: &PathSlice,
    index: usize,
    contract: &ContractSpec,
    config: &GameConfig,
    p_model: &G,
) -> Result<SliceValuation> {
    let c = &slice.condition;
    let q = q_pricer::price(contract, &gbm_params(slice, config.q_paths, slice_seed(config.q_seed, index)), c.t_calendar)?;
    let paths = p_model.generate(slice, config.p_paths, slice_seed(config.p_seed, index))?;
    if paths.iter().any(|p| p.len() != slice.valid_len()) {
        return Err(Error::Data(format!(
            "generated horizon does not match the {}-step slice at {}",
            slice.valid_len(),
            slice.start_date
        )));
    }
    let p_rate = if config.discount_p { c.r } else { 0.0 };
    let p = q_pricer::p_price(contract, &paths, slice.s0, p_rate, c.t_calendar)?;
    let real_rate = if config.discount_realized { c.r } else { 0.0 };
    let realized = path_value(contract, &slice.prices(), slice.s0, real_rate, c.t_calendar)?;
    Ok(SliceValuation {
        start_date: slice.start_date,
        q_fair: q.value,
        p_value: p.value,
        realized,
    })
}

/// Value every slice in parallel, in slice order.
pub fn value_slices<G: PathGenerator + ?Sized>(
    slices: &[PathSlice],
    contract: &ContractSpec,
    config: &GameConfig,
    p_model: &G,
) -> Result<Vec<SliceValuation>> {
    config.validate()?;
    contract.validate()?;
    slices
        .par_iter()
        .enumerate()
        .map(|(i, s)| value_slice(s, i, contract, config, p_model))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeRecord {
    pub start_date: NaiveDate,
    pub product: String,
    pub side: Side,
    pub exec_price: f64,
    pub q_fair: f64,
    pub p_value: f64,
    pub realized: f64,
    pub pnl_p: f64,
    pub pnl_q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameReport {
    pub level: f64,
    pub cum_pnl: f64,
    pub trades: usize,
    pub longs: usize,
    pub shorts: usize,
    pub win_rate: Option<f64>,
    pub sharpe: Option<f64>,
}

/// Play one greediness level over precomputed valuations.
pub fn play_level(
    valuations: &[SliceValuation],
    product: &str,
    level: f64,
    mode: SpreadMode,
    threshold: f64,
) -> Result<(GameReport, Vec<TradeRecord>)> {
    let mut trades = Vec::new();
    let mut by_date: BTreeMap<NaiveDate, f64> = BTreeMap::new();
    for v in valuations {
        let daily = by_date.entry(v.start_date).or_insert(0.0);
        let quote = make_quote(v.q_fair, level, mode)?;
        let side = decide_trade(v.p_value, &quote, threshold);
        let exec_price = match side {
            Side::Long => quote.ask,
            Side::Short => quote.bid,
            Side::None => continue,
        };
        let (pnl_p, pnl_q) = settle(side, exec_price, v.realized)?;
        *daily += pnl_p;
        trades.push(TradeRecord {
            start_date: v.start_date,
            product: product.to_string(),
            side,
            exec_price,
            q_fair: v.q_fair,
            p_value: v.p_value,
            realized: v.realized,
            pnl_p,
            pnl_q,
        });
    }
    let n = trades.len();
    let wins = trades.iter().filter(|t| t.pnl_p > 0.0).count();
    let daily: Vec<f64> = by_date.into_values().collect();
    let report = GameReport {
        level,
        cum_pnl: trades.iter().fold(0.0, |acc, t| acc + t.pnl_p),
        trades: n,
        longs: trades.iter().filter(|t| t.side == Side::Long).count(),
        shorts: trades.iter().filter(|t| t.side == Side::Short).count(),
        win_rate: (n > 0).then(|| wins as f64 / n as f64),
        sharpe: sharpe_annualized(&daily),
    };
    Ok((report, trades))
}

/// Valuations plus one report and trade list per level.
#[derive(Debug, Clone, PartialEq)]
pub struct GameRun {
    pub product: String,
    pub valuations: Vec<SliceValuation>,
    pub levels: Vec<(GameReport, Vec<TradeRecord>)>,
}

pub fn run_game<G: PathGenerator + ?Sized>(
    slices: &[PathSlice],
    contract: &ContractSpec,
    levels: &[f64],
    mode: SpreadMode,
    config: &GameConfig,
    p_model: &G,
) -> Result<GameRun> {
    let valuations = value_slices(slices, contract, config, p_model)?;
    let product = contract.product().to_string();
    let levels = levels
        .iter()
        .map(|l| play_level(&valuations, &product, *l, mode, config.threshold))
        .collect::<Result<_>>()?;
    Ok(GameRun {
        product,
        valuations,
        levels,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or("NA".to_string(), |x| x.to_string())
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::file(path, e))?))
}

pub fn write_report_csv(path: &Path, reports: &[GameReport]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "level,cum_pnl,trades,longs,shorts,win_rate,sharpe")?;
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.level,
            r.cum_pnl,
            r.trades,
            r.longs,
            r.shorts,
            opt(r.win_rate),
            opt(r.sharpe)
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trades_csv(path: &Path, trades: &[TradeRecord]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "start_date,product,side,exec_price,q_fair,p_value,realized,pnl_p,pnl_q")?;
    for t in trades {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            t.start_date,
            t.product,
            t.side.as_str(),
            t.exec_price,
            t.q_fair,
            t.p_value,
            t.realized,
            t.pnl_p,
            t.pnl_q
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Levels as columns, metrics as rows.
pub fn format_table(product: &str, mode: SpreadMode, reports: &[GameReport]) -> String {
    let level = |l: f64| format!("{}%", (l * 1e4).round() / 100.0);
    let header = match mode {
        SpreadMode::Relative => "Greediness",
        SpreadMode::Absolute { .. } => "Greediness (absolute spread)",
    };
    let fmt_opt = |v: Option<f64>, pct: bool| match v {
        Some(x) if pct => format!("{:.2}%", x * 100.0),
        Some(x) => format!("{x:.3}"),
        None => "NA".to_string(),
    };
    let rows: Vec<(&str, Vec<String>)> = vec![
        (header, reports.iter().map(|r| level(r.level)).collect()),
        ("Cum. P&L (P model)", reports.iter().map(|r| format!("{:.2}", r.cum_pnl)).collect()),
        ("Trades", reports.iter().map(|r| r.trades.to_string()).collect()),
        ("Longs", reports.iter().map(|r| r.longs.to_string()).collect()),
        ("Shorts", reports.iter().map(|r| r.shorts.to_string()).collect()),
        ("Win Rate", reports.iter().map(|r| fmt_opt(r.win_rate, true)).collect()),
        ("Annualized Sharpe Ratio", reports.iter().map(|r| fmt_opt(r.sharpe, false)).collect()),
    ];
    let label_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
    let col_w = rows.iter().flat_map(|r| r.1.iter().map(|c| c.len())).max().unwrap_or(0);
    let mut out = format!("{product}\n");
    for (label, cells) in rows {
        let _ = write!(out, "{label:<label_w$}");
        for c in cells {
            let _ = write!(out, "  {c:>col_w$}");
        }
        out.push('\n');
    }
    out
}

/// Report CSV, text table and per-level trade files for one product.
pub fn write_game_outputs(dir: &Path, run: &GameRun, mode: SpreadMode) -> Result<()> {
    let reports: Vec<GameReport> = run.levels.iter().map(|(r, _)| r.clone()).collect();
    write_report_csv(&dir.join(format!("game_{}_report.csv", run.product)), &reports)?;
    let table = format_table(&run.product, mode, &reports);
    let p = dir.join(format!("game_{}_report.txt", run.product));
    std::fs::write(&p, table).map_err(|e| Error::file(&p, e))?;
    for (r, trades) in &run.levels {
        write_trades_csv(&dir.join(format!("game_{}_{}.csv", run.product, r.level)), trades)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_paths::ConditionVector;
    use proptest::prelude::*;

    #[test]
    fn quote_examples() {
        let q = make_quote(100.0, 0.1, SpreadMode::Relative).unwrap();
        assert!((q.bid - 90.0).abs() < 1e-12 && (q.ask - 110.0).abs() < 1e-12);
        let q = make_quote(100.0, 0.0, SpreadMode::Relative).unwrap();
        assert_eq!((q.bid, q.ask), (100.0, 100.0));
        let q = make_quote(50_000.0, 0.005, SpreadMode::Absolute { notional: 1e6 }).unwrap();
        assert_eq!((q.bid, q.ask), (45_000.0, 55_000.0));
        assert!(make_quote(1.0, -0.1, SpreadMode::Relative).is_err());
        let neg = make_quote(-10.0, 0.2, SpreadMode::Relative).unwrap();
        assert!(neg.bid <= neg.fair && neg.fair <= neg.ask);
    }

    #[test]
    fn decision_examples() {
        let q = Quote {
            fair: 100.0,
            bid: 90.0,
            ask: 110.0,
            mode: SpreadMode::Relative,
        };
        assert_eq!(decide_trade(125.0, &q, 0.1), Side::Long);
        assert_eq!(decide_trade(100.0, &q, 0.1), Side::None);
        assert_eq!(decide_trade(70.0, &q, 0.1), Side::Short);
        let flat = make_quote(100.0, 0.0, SpreadMode::Relative).unwrap();
        assert_eq!(decide_trade(100.0, &flat, 0.0), Side::None);
        // a gap of exactly the threshold does not trade
        let q = make_quote(100.0, 0.0, SpreadMode::Relative).unwrap();
        assert_eq!(decide_trade(125.0, &q, 0.25), Side::None);
    }

    #[test]
    fn settlement_examples() {
        assert_eq!(settle(Side::Long, 110.0, 120.0).unwrap(), (10.0, -10.0));
        assert_eq!(settle(Side::Short, 90.0, 120.0).unwrap(), (-30.0, 30.0));
        assert_eq!(settle(Side::Long, 5.0, 5.0).unwrap(), (0.0, -0.0));
        assert!(settle(Side::None, 1.0, 1.0).is_err());
    }

    #[test]
    fn sharpe_examples() {
        assert_eq!(sharpe_annualized(&[1.5; 10]), None);
        assert_eq!(sharpe_annualized(&[1.0, -1.0, 1.0, -1.0]), Some(0.0));
        let s = sharpe_annualized(&[2.0, 1.0, 3.0, 0.0, -1.0]).unwrap();
        // mean 1, sample variance 10/4
        assert!((s - (252.0f64 / 2.5).sqrt()).abs() < 1e-10);
        assert_eq!(sharpe_annualized(&[0.0; 5]), None);
        assert_eq!(sharpe_annualized(&[1.0]), None);
    }

    fn vals(pairs: &[(f64, f64, f64)]) -> Vec<SliceValuation> {
        pairs
            .iter()
            .enumerate()
            .map(|(i, (q, p, r))| SliceValuation {
                start_date: NaiveDate::from_ymd_opt(2024, 1, 1).unwrap() + chrono::Days::new(i as u64),
                q_fair: *q,
                p_value: *p,
                realized: *r,
            })
            .collect()
    }

    #[test]
    fn level_report_counts() {
        let v = vals(&[(100.0, 130.0, 150.0), (100.0, 60.0, 70.0), (100.0, 101.0, 0.0), (10.0, 14.0, 5.0)]);
        let (r, trades) = play_level(&v, "european", 0.1, SpreadMode::Relative, 0.1).unwrap();
        assert_eq!((r.trades, r.longs, r.shorts), (3, 2, 1));
        assert_eq!(r.trades, trades.len());
        let pnl: Vec<f64> = trades.iter().map(|t| t.pnl_p).collect();
        assert!((pnl[0] - 40.0).abs() < 1e-9 && (pnl[1] - 20.0).abs() < 1e-9 && (pnl[2] + 6.0).abs() < 1e-9);
        assert!((r.win_rate.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.cum_pnl - 54.0).abs() < 1e-9);
        assert!(trades.iter().all(|t| t.pnl_p + t.pnl_q == 0.0));
        let (none, _) = play_level(&v, "european", 0.5, SpreadMode::Relative, 0.1).unwrap();
        assert_eq!(none.trades, 0);
        assert_eq!(none.win_rate, None);
        assert!(none.cum_pnl == 0.0 && none.cum_pnl.is_sign_positive());
    }

    #[test]
    fn long_pnl_falls_with_greediness() {
        let v = vals(&[(100.0, 200.0, 150.0)]);
        let mut prev = f64::INFINITY;
        for g in RELATIVE_LEVELS {
            let (_, t) = play_level(&v, "european", g, SpreadMode::Relative, 0.1).unwrap();
            assert_eq!(t[0].side, Side::Long);
            assert!(t[0].pnl_p < prev);
            prev = t[0].pnl_p;
        }
    }

    fn slice(i: u64) -> PathSlice {
        let returns: Vec<f64> = (0..20).map(|k| 0.01 * ((k as f64 + i as f64) * 0.7).sin()).collect();
        PathSlice {
            start_date: NaiveDate::from_ymd_opt(2023, 1, 2).unwrap() + chrono::Days::new(i),
            s0: 100.0 + i as f64,
            mask: vec![true; 20],
            log_returns: returns,
            condition: ConditionVector {
                sigma_hist: 0.2,
                r: 0.02,
                t_calendar: 28.0 / 365.0,
                t_trading: 21.0 / 252.0,
                n_trading: 20,
            },
            window_calendar_days: 28,
        }
    }

    #[test]
    fn identical_models_never_trade() {
        let slices: Vec<PathSlice> = (0..6).map(slice).collect();
        let cfg = GameConfig {
            q_paths: 2000,
            p_paths: 2000,
            q_seed: 9,
            p_seed: 9,
            ..Default::default()
        };
        for contract in [ContractSpec::european(), ContractSpec::snowball(1.05, 0.9, 0.15)] {
            let (levels, mode) = default_levels(&contract);
            let run = run_game(&slices, &contract, &levels, mode, &cfg, &GbmGenerator).unwrap();
            assert!(run.valuations.iter().all(|v| v.q_fair == v.p_value));
            assert!(run.levels.iter().all(|(r, _)| r.trades == 0));
            let zero = run_game(&slices, &contract, &[0.0], mode, &GameConfig { threshold: 0.0, ..cfg }, &GbmGenerator).unwrap();
            assert_eq!(zero.levels[0].0.trades, 0);
        }
    }

    #[test]
    fn run_is_deterministic_and_writes_tables() {
        let slices: Vec<PathSlice> = (0..5).map(slice).collect();
        let cfg = GameConfig {
            q_paths: 500,
            p_paths: 50,
            ..Default::default()
        };
        let c = ContractSpec::snowball(1.05, 0.9, 0.15);
        let (levels, mode) = default_levels(&c);
        assert_eq!(levels, ABSOLUTE_LEVELS.to_vec());
        let a = run_game(&slices, &c, &levels, mode, &cfg, &ReplayGenerator).unwrap();
        let b = run_game(&slices, &c, &levels, mode, &cfg, &ReplayGenerator).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        write_game_outputs(dir.path(), &a, mode).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("game_snowball_report.csv")).unwrap();
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.starts_with("level,cum_pnl,trades,longs,shorts,win_rate,sharpe\n0,"));
        for l in ["0", "0.005", "0.01", "0.015", "0.02"] {
            assert!(dir.path().join(format!("game_snowball_{l}.csv")).exists());
        }
        let table = std::fs::read_to_string(dir.path().join("game_snowball_report.txt")).unwrap();
        assert!(table.contains("0.5%") && table.contains("Win Rate"));
    }

    #[test]
    fn seeds_differ_per_slice() {
        assert_ne!(slice_seed(1, 0), slice_seed(1, 1));
        assert_ne!(slice_seed(1, 0), slice_seed(2, 0));
    }

    proptest! {
        #[test]
        fn trade_count_non_increasing_in_level(
            pairs in prop::collection::vec((-50.0f64..150.0, -50.0f64..200.0), 1..40),
            theta in 0.0f64..0.5,
            absolute in any::<bool>(),
        ) {
            let v = vals(&pairs.iter().map(|(q, p)| (*q, *p, 0.0)).collect::<Vec<_>>());
            let (levels, mode) = if absolute {
                (ABSOLUTE_LEVELS.to_vec(), SpreadMode::Absolute { notional: 1000.0 })
            } else {
                (RELATIVE_LEVELS.to_vec(), SpreadMode::Relative)
            };
            let mut prev = usize::MAX;
            for l in levels {
                let (r, t) = play_level(&v, "x", l, mode, theta).unwrap();
                prop_assert!(r.trades <= prev);
                prop_assert_eq!(r.trades, r.longs + r.shorts);
                let wins = t.iter().filter(|x| x.pnl_p > 0.0).count();
                if let Some(w) = r.win_rate {
                    prop_assert!((w - wins as f64 / r.trades as f64).abs() < 1e-15);
                }
                prop_assert!(t.iter().all(|x| x.pnl_p + x.pnl_q == 0.0));
                prev = r.trades;
            }
        }
    }
}
