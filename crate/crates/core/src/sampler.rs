//! DDIM reverse sampling with step skipping, and reconstruction of price
//! paths from generated log returns.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::Tensor3;
use crate::diffusion_schedule::{recover_eps, recover_x0, NoiseSchedule, PredictionMode};
use crate::error::{Error, Result};
use crate::market_paths::{ConditionVector, CONDITION_DIM};

/// Anything that maps a noisy batch at a shared step to a prediction in
/// its own parameterisation.
pub trait NoisePredictor: Sync {
    fn mode(&self) -> PredictionMode;
    /// Sequence length the predictor accepts.
    fn input_length(&self) -> usize;
    fn predict(&self, x: &Tensor3, t: usize, cond: &[[f64; CONDITION_DIM]]) -> Result<Tensor3>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Number of reverse steps actually visited.
    pub num_steps: usize,
    /// Scale of the fresh noise; 0 gives the deterministic sampler.
    pub eta: f64,
    pub seed: u64,
    pub n_paths: usize,
    /// Paths evaluated together in one network call.
    pub batch_size: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: 50,
            eta: 0.0,
            seed: 0,
            n_paths: 100,
            batch_size: 64,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, total_steps: usize) -> Result<()> {
        if self.num_steps == 0 || self.num_steps > total_steps {
            return Err(Error::Config(format!(
                "num_steps must lie in 1..={total_steps}, got {}",
                self.num_steps
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta must lie in [0,1], got {}", self.eta)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// `k` steps spaced uniformly over `1..=T` including both ends, descending.
pub fn timesteps(k: usize, total: usize) -> Result<Vec<usize>> {
    if k == 0 || k > total {
        return Err(Error::Config(format!("num_steps must lie in 1..={total}, got {k}")));
    }
    if k == 1 {
        return Ok(vec![total]);
    }
    let span = (total - 1) as f64 / (k - 1) as f64;
    Ok((0..k).rev().map(|i| 1 + (i as f64 * span).round() as usize).collect())
}

/// Noise scale for a transition `t -> t_prev` at the given `eta`.
pub fn ddim_sigma(eta: f64, t: usize, t_prev: usize, sched: &NoiseSchedule) -> f64 {
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    eta * ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).max(0.0).sqrt()
}

fn check_transition(t: usize, t_prev: usize, sigma: f64, sched: &NoiseSchedule) -> Result<f64> {
    if t_prev >= t || t > sched.steps() {
        return Err(Error::Config(format!("invalid transition {t} -> {t_prev}")));
    }
    let room = 1.0 - sched.alpha_bar(t_prev) - sigma * sigma;
    if sigma < 0.0 || room < -1e-15 {
        return Err(Error::Config(format!("sigma {sigma} too large for step {t_prev}")));
    }
    Ok(room.max(0.0).sqrt())
}

fn combine(x0: &[f64], eps: &[f64], ab_prev: f64, dir: f64, sigma: f64, noise: Option<&[f64]>) -> Vec<f64> {
    let s = ab_prev.sqrt();
    x0.iter()
        .zip(eps)
        .enumerate()
        .map(|(i, (x, e))| {
            let z = match noise {
                Some(n) if sigma > 0.0 => sigma * n[i],
                _ => 0.0,
            };
            s * x + dir * e + z
        })
        .collect()
}

/// One DDIM transition from `t` to `t_prev` given a noise estimate.
/// `noise` supplies the fresh Gaussian draw and is read only when `sigma > 0`.
pub fn ddim_step(
    x_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    sigma: f64,
    noise: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let dir = check_transition(t, t_prev, sigma, sched)?;
    if sigma > 0.0 && noise.map_or(true, |n| n.len() != x_t.len()) {
        return Err(Error::Config("stochastic step needs a noise vector of matching length".into()));
    }
    let x0 = recover_x0(x_t, eps_hat, PredictionMode::Eps, t, sched)?;
    Ok(combine(&x0, eps_hat, sched.alpha_bar(t_prev), dir, sigma, noise))
}

/// Run the reverse chain from `x` at `steps[0]` down to clean data.
/// Each row of the batch draws its fresh noise from its own generator.
pub fn reverse_chain<P: NoisePredictor + ?Sized>(
    model: &P,
    mut x: Tensor3,
    cond: &[[f64; CONDITION_DIM]],
    steps: &[usize],
    sched: &NoiseSchedule,
    eta: f64,
    rngs: &mut [ChaCha8Rng],
) -> Result<Tensor3> {
    let (b, _, l) = x.shape();
    if rngs.len() != b || cond.len() != b {
        return Err(Error::shape(b, rngs.len().min(cond.len())));
    }
    for (i, &t) in steps.iter().enumerate() {
        let t_prev = steps.get(i + 1).copied().unwrap_or(0);
        let sigma = ddim_sigma(eta, t, t_prev, sched);
        let dir = check_transition(t, t_prev, sigma, sched)?;
        let pred = model.predict(&x, t, cond)?;
        let ab_prev = sched.alpha_bar(t_prev);
        for (row, rng) in rngs.iter_mut().enumerate() {
            let xt = x.sample(row);
            let p = pred.sample(row);
            let x0 = recover_x0(xt, p, model.mode(), t, sched)?;
            let eps = recover_eps(xt, p, model.mode(), t, sched)?;
            let noise: Option<Vec<f64>> =
                (sigma > 0.0).then(|| (0..l).map(|_| StandardNormal.sample(rng)).collect());
            let next = combine(&x0, &eps, ab_prev, dir, sigma, noise.as_deref());
            x.sample_mut(row).copy_from_slice(&next);
        }
        if !x.all_finite() {
            return Err(Error::Numeric(format!("non-finite sample at step {t}")));
        }
    }
    Ok(x)
}

/// Generator for path `index`: an independent stream of the run seed.
pub fn path_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Draw `n_paths` sequences for one condition, truncated to its step count.
/// Output is independent of `batch_size` and thread count.
pub fn sample_paths<P: NoisePredictor + ?Sized>(
    model: &P,
    config: &SamplerConfig,
    condition: &ConditionVector,
    sched: &NoiseSchedule,
) -> Result<Vec<Vec<f64>>> {
    config.validate(sched.steps())?;
    let l = model.input_length();
    let n = condition.n_trading;
    if n == 0 || n > l {
        return Err(Error::Config(format!(
            "condition asks for {n} steps but the model generates {l}"
        )));
    }
    let steps = timesteps(config.num_steps, sched.steps())?;
    let features = condition.features();
    let starts: Vec<usize> = (0..config.n_paths).step_by(config.batch_size).collect();
    let chunks: Vec<Vec<Vec<f64>>> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + config.batch_size).min(config.n_paths);
            let b = end - start;
            let mut rngs: Vec<ChaCha8Rng> = (start..end).map(|i| path_rng(config.seed, i)).collect();
            let mut x = Tensor3::zeros(b, 1, l);
            for (row, rng) in rngs.iter_mut().enumerate() {
                for v in x.sample_mut(row) {
                    *v = StandardNormal.sample(rng);
                }
            }
            let out = reverse_chain(model, x, &vec![features; b], &steps, sched, config.eta, &mut rngs)?;
            Ok((0..b).map(|row| out.sample(row)[..n].to_vec()).collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Prices `S_t = s0 * exp(r_1 + ... + r_t)` after the start.
pub fn to_prices(s0: f64, log_returns: &[f64]) -> Result<Vec<f64>> {
    if !(s0 > 0.0) {
        return Err(Error::Domain(format!("initial price must be positive, got {s0}")));
    }
    let mut acc = 0.0;
    Ok(log_returns
        .iter()
        .map(|r| {
            acc += r;
            s0 * acc.exp()
        })
        .collect())
}

/// Metadata written next to a generated path bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathManifest {
    pub condition: ConditionVector,
    pub s0: f64,
    pub sampler: SamplerConfig,
    pub n_paths: usize,
}

pub fn write_paths_csv(path: &Path, paths: &[Vec<f64>]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "path_id,step,log_return")?;
    for (id, p) in paths.iter().enumerate() {
        for (k, r) in p.iter().enumerate() {
            writeln!(w, "{id},{},{r}", k + 1)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_paths_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    if rdr.headers()?.iter().collect::<Vec<_>>() != ["path_id", "step", "log_return"] {
        return Err(Error::Data(format!("{}: expected header path_id,step,log_return", path.display())));
    }
    let mut out: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.deserialize() {
        let (id, step, r): (usize, usize, f64) = rec?;
        if id == out.len() {
            out.push(Vec::new());
        }
        if id + 1 != out.len() || step != out[id].len() + 1 {
            return Err(Error::Data(format!("{}: rows out of order at path {id} step {step}", path.display())));
        }
        out[id].push(r);
    }
    Ok(out)
}
