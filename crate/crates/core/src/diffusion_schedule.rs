//! Noise schedule, closed-form forward noising and the algebra linking the
//! three prediction targets (noise, clean sample, velocity).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What the denoiser is trained to output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionMode {
    Eps,
    X0,
    #[default]
    V,
}

/// Linear beta schedule over `T` steps. Step indices run `1..=T`; index 0
/// denotes clean data with `alpha_bar = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "schedule requires 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let beta = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Config("empty beta sequence".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0,1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Cumulative signal retention at step `t`; `t = 0` gives 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        match t {
            0 => 1.0,
            t => self.alpha_bar[t - 1],
        }
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::Config(format!(
                "step {t} outside 0..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// Coefficients `(sqrt(abar), sqrt(1-abar))` at step `t`.
    pub fn coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check_step(t)?;
        let ab = self.alpha_bar(t);
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }
}

fn check_same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    Ok(())
}

/// Sample `x_t` given clean data and the injected noise.
pub fn forward_diffuse(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    check_same_len(x0, eps)?;
    let (s, n) = sched.coefficients(t)?;
    Ok(x0.iter().zip(eps).map(|(x, e)| s * x + n * e).collect())
}

/// Velocity target `sqrt(abar)*eps - sqrt(1-abar)*x0`.
pub fn v_target(x0: &[f64], eps: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    check_same_len(x0, eps)?;
    let (s, n) = sched.coefficients(t)?;
    Ok(x0.iter().zip(eps).map(|(x, e)| s * e - n * x).collect())
}

/// Training target for the configured parameterisation.
pub fn training_target(
    mode: PredictionMode,
    x0: &[f64],
    eps: &[f64],
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    match mode {
        PredictionMode::Eps => {
            check_same_len(x0, eps)?;
            sched.check_step(t)?;
            Ok(eps.to_vec())
        }
        PredictionMode::X0 => {
            check_same_len(x0, eps)?;
            sched.check_step(t)?;
            Ok(x0.to_vec())
        }
        PredictionMode::V => v_target(x0, eps, t, sched),
    }
}

/// Linear map `x0_hat = a * x_t + b * prediction` for each mode.
///
/// Returned so callers can also push gradients back through the inversion.
pub fn recover_x0_coefficients(mode: PredictionMode, t: usize, sched: &NoiseSchedule) -> Result<(f64, f64)> {
    let (s, n) = sched.coefficients(t)?;
    match mode {
        PredictionMode::X0 => Ok((0.0, 1.0)),
        PredictionMode::V => Ok((s, -n)),
        PredictionMode::Eps => {
            if s == 0.0 {
                return Err(Error::Numeric(format!("alpha_bar is zero at step {t}")));
            }
            Ok((1.0 / s, -n / s))
        }
    }
}

pub fn recover_x0(
    x_t: &[f64],
    prediction: &[f64],
    mode: PredictionMode,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_same_len(x_t, prediction)?;
    let (a, b) = recover_x0_coefficients(mode, t, sched)?;
    Ok(x_t.iter().zip(prediction).map(|(x, p)| a * x + b * p).collect())
}

/// Noise estimate implied by a prediction in any mode.
pub fn recover_eps(
    x_t: &[f64],
    prediction: &[f64],
    mode: PredictionMode,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_same_len(x_t, prediction)?;
    let (s, n) = sched.coefficients(t)?;
    match mode {
        PredictionMode::Eps => Ok(prediction.to_vec()),
        PredictionMode::V => Ok(x_t.iter().zip(prediction).map(|(x, v)| n * x + s * v).collect()),
        PredictionMode::X0 => {
            if n == 0.0 {
                return Err(Error::Numeric(format!("no noise at step {t}")));
            }
            Ok(x_t.iter().zip(prediction).map(|(x, p)| (x - s * p) / n).collect())
        }
    }
}
