//! Contract definitions and deterministic cash flows on a single price path.
//!
//! A path holds the closes on trading days `1..=n` after the start; the
//! start close `s0` is passed separately. Cash-flow days are 1-based.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_paths::TRADING_DAYS_PER_YEAR;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ContractSpec {
    European {
        #[serde(default = "unit")]
        strike_ratio: f64,
    },
    Lookback {
        #[serde(default = "unit")]
        strike_ratio: f64,
    },
    Asian {
        #[serde(default = "unit")]
        strike_ratio: f64,
    },
    Accumulator {
        discount: f64,
        ko_ratio: f64,
        #[serde(default = "unit")]
        daily_units: f64,
    },
    Snowball {
        ko_ratio: f64,
        ki_ratio: f64,
        coupon_pa: f64,
        #[serde(default = "default_stride")]
        ko_obs_stride: usize,
        #[serde(default = "default_notional")]
        notional: f64,
    },
}

fn unit() -> f64 {
    1.0
}

fn default_stride() -> usize {
    5
}

fn default_notional() -> f64 {
    1_000_000.0
}

impl ContractSpec {
    pub fn european() -> Self {
        ContractSpec::European { strike_ratio: 1.0 }
    }

    pub fn snowball(ko_ratio: f64, ki_ratio: f64, coupon_pa: f64) -> Self {
        ContractSpec::Snowball {
            ko_ratio,
            ki_ratio,
            coupon_pa,
            ko_obs_stride: default_stride(),
            notional: default_notional(),
        }
    }

    pub fn product(&self) -> &'static str {
        match self {
            ContractSpec::European { .. } => "european",
            ContractSpec::Lookback { .. } => "lookback",
            ContractSpec::Asian { .. } => "asian",
            ContractSpec::Accumulator { .. } => "accumulator",
            ContractSpec::Snowball { .. } => "snowball",
        }
    }

    /// Notional used to express an absolute quoting spread.
    pub fn notional(&self) -> Option<f64> {
        match self {
            ContractSpec::Snowball { notional, .. } => Some(*notional),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        match *self {
            ContractSpec::European { strike_ratio }
            | ContractSpec::Lookback { strike_ratio }
            | ContractSpec::Asian { strike_ratio } => positive("strike_ratio", strike_ratio),
            ContractSpec::Accumulator {
                discount,
                ko_ratio,
                daily_units,
            } => {
                positive("discount", discount)?;
                positive("daily_units", daily_units)?;
                if !(discount < 1.0 && 1.0 < ko_ratio) {
                    return Err(Error::Config(format!(
                        "accumulator needs discount < 1 < ko_ratio, got {discount} / {ko_ratio}"
                    )));
                }
                Ok(())
            }
            ContractSpec::Snowball {
                ko_ratio,
                ki_ratio,
                coupon_pa,
                ko_obs_stride,
                notional,
            } => {
                positive("ki_ratio", ki_ratio)?;
                positive("notional", notional)?;
                if !(ki_ratio < 1.0 && 1.0 < ko_ratio) {
                    return Err(Error::Config(format!(
                        "snowball needs ki_ratio < 1 < ko_ratio, got {ki_ratio} / {ko_ratio}"
                    )));
                }
                if !(coupon_pa >= 0.0) || ko_obs_stride == 0 {
                    return Err(Error::Config("snowball coupon must be >= 0 and stride >= 1".into()));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CashFlowSchedule {
    /// `(day, amount)` with strictly increasing days.
    pub flows: Vec<(usize, f64)>,
    pub termination_day: usize,
    pub terminated_early: bool,
}

impl CashFlowSchedule {
    fn at_maturity(day: usize, amount: f64) -> Self {
        Self {
            flows: vec![(day, amount)],
            termination_day: day,
            terminated_early: false,
        }
    }

    pub fn total(&self) -> f64 {
        // fold from +0.0: an empty float sum is -0.0
        self.flows.iter().fold(0.0, |acc, (_, a)| acc + a)
    }
}

fn last(path: &[f64]) -> Result<f64> {
    path.last()
        .copied()
        .ok_or_else(|| Error::InsufficientData { needed: 1, got: 0 })
}

pub fn european_payoff(path: &[f64], s0: f64, strike_ratio: f64) -> Result<f64> {
    Ok((last(path)? - strike_ratio * s0).max(0.0))
}

/// Fixed-strike lookback on the maximum close over the path.
pub fn lookback_payoff(path: &[f64], s0: f64, strike_ratio: f64) -> Result<f64> {
    last(path)?;
    let m = path.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok((m - strike_ratio * s0).max(0.0))
}

/// Arithmetic-average call over every close on the path.
pub fn asian_payoff(path: &[f64], s0: f64, strike_ratio: f64) -> Result<f64> {
    last(path)?;
    let a = path.iter().sum::<f64>() / path.len() as f64;
    Ok((a - strike_ratio * s0).max(0.0))
}

/// Daily purchases at `discount * s0`, doubled below that strike, until the
/// close first reaches `ko_ratio * s0`. The knock-out day still settles.
pub fn accumulator_cashflows(path: &[f64], s0: f64, discount: f64, ko_ratio: f64, daily_units: f64) -> Result<CashFlowSchedule> {
    last(path)?;
    let strike = discount * s0;
    let barrier = ko_ratio * s0;
    let mut flows = Vec::with_capacity(path.len());
    for (i, &s) in path.iter().enumerate() {
        let q = if s < strike { 2.0 } else { 1.0 } * daily_units;
        flows.push((i + 1, q * (s - strike)));
        if s >= barrier {
            return Ok(CashFlowSchedule {
                flows,
                termination_day: i + 1,
                terminated_early: i + 1 < path.len(),
            });
        }
    }
    Ok(CashFlowSchedule {
        flows,
        termination_day: path.len(),
        terminated_early: false,
    })
}

/// Which of the four mutually exclusive snowball regimes a path fell into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnowballOutcome {
    KnockOut,
    KnockInLoss,
    KnockInRecovered,
    FullCoupon,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnowballResult {
    /// Coupon or principal loss, excluding the returned principal.
    pub amount: f64,
    pub termination_day: usize,
    pub outcome: SnowballOutcome,
}

/// Snowball settlement. Knock-out is observed every `stride` days and on
/// the final day; knock-in daily. Coupons accrue over the calendar year
/// fraction elapsed, `t_calendar * day / n`.
pub fn snowball_payoff(path: &[f64], s0: f64, spec: &ContractSpec, t_calendar: f64) -> Result<SnowballResult> {
    let ContractSpec::Snowball {
        ko_ratio,
        ki_ratio,
        coupon_pa,
        ko_obs_stride,
        notional,
    } = *spec
    else {
        return Err(Error::Config(format!("expected a snowball, got {}", spec.product())));
    };
    let s_t = last(path)?;
    let n = path.len();
    let mut knocked_in = false;
    for (i, &s) in path.iter().enumerate() {
        let day = i + 1;
        knocked_in |= s < ki_ratio * s0;
        if (day % ko_obs_stride == 0 || day == n) && s >= ko_ratio * s0 {
            return Ok(SnowballResult {
                amount: notional * coupon_pa * t_calendar * day as f64 / n as f64,
                termination_day: day,
                outcome: SnowballOutcome::KnockOut,
            });
        }
    }
    let (amount, outcome) = if !knocked_in {
        (notional * coupon_pa * t_calendar, SnowballOutcome::FullCoupon)
    } else if s_t < s0 {
        (notional * (s_t / s0 - 1.0).max(-1.0), SnowballOutcome::KnockInLoss)
    } else {
        (0.0, SnowballOutcome::KnockInRecovered)
    };
    Ok(SnowballResult {
        amount,
        termination_day: n,
        outcome,
    })
}

/// Cash flows of any contract on one path.
pub fn cashflows(contract: &ContractSpec, path: &[f64], s0: f64, t_calendar: f64) -> Result<CashFlowSchedule> {
    let n = path.len();
    match *contract {
        ContractSpec::European { strike_ratio } => Ok(CashFlowSchedule::at_maturity(n, european_payoff(path, s0, strike_ratio)?)),
        ContractSpec::Lookback { strike_ratio } => Ok(CashFlowSchedule::at_maturity(n, lookback_payoff(path, s0, strike_ratio)?)),
        ContractSpec::Asian { strike_ratio } => Ok(CashFlowSchedule::at_maturity(n, asian_payoff(path, s0, strike_ratio)?)),
        ContractSpec::Accumulator {
            discount,
            ko_ratio,
            daily_units,
        } => accumulator_cashflows(path, s0, discount, ko_ratio, daily_units),
        ContractSpec::Snowball { .. } => {
            let r = snowball_payoff(path, s0, contract, t_calendar)?;
            Ok(CashFlowSchedule {
                flows: vec![(r.termination_day, r.amount)],
                termination_day: r.termination_day,
                terminated_early: r.termination_day < n,
            })
        }
    }
}

/// Present value `sum CF_t * exp(-r t / 252)`.
pub fn discount_value(schedule: &CashFlowSchedule, r: f64) -> Result<f64> {
    if !r.is_finite() {
        return Err(Error::Domain(format!("rate must be finite, got {r}")));
    }
    Ok(schedule
        .flows
        .iter()
        .fold(0.0, |acc, (t, cf)| acc + cf * (-r * *t as f64 / TRADING_DAYS_PER_YEAR).exp()))
}

/// Discounted value of a contract on one path.
pub fn path_value(contract: &ContractSpec, path: &[f64], s0: f64, r: f64, t_calendar: f64) -> Result<f64> {
    discount_value(&cashflows(contract, path, s0, t_calendar)?, r)
}

/// Per-path payoff dump: `path_id,product,amount,termination_day`.
pub fn write_payoffs_csv(path: &Path, product: &str, rows: &[CashFlowSchedule]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "path_id,product,amount,termination_day")?;
    for (i, s) in rows.iter().enumerate() {
        writeln!(w, "{i},{product},{},{}", s.total(), s.termination_day)?;
    }
    w.flush()?;
    Ok(())
}
