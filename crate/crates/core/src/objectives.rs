//! Composite training objective: masked core regression loss plus annealed
//! finance-aware regularisers evaluated on the reconstructed clean sequence.
//!
//! Every auxiliary term returns its value together with the gradient with
//! respect to the predicted sequence, so the trainer can backpropagate the
//! whole objective through the denoiser.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::denoiser::Tensor3;
use crate::diffusion_schedule::{recover_x0_coefficients, PredictionMode, NoiseSchedule};
use crate::error::{Error, Result};

/// Transition point of the smooth L1 penalty.
pub const SMOOTH_L1_DELTA: f64 = 1.0;
/// Quantiles averaged by the two-sided pinball term.
pub const PINBALL_QUANTILES: [f64; 2] = [0.01, 0.99];

/// Value of one regulariser and its gradient with respect to the prediction.
/// Degenerate inputs yield a skipped term with zero value and gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub value: f64,
    pub grad: Vec<f64>,
    pub skipped: bool,
}

impl Term {
    fn skipped(n: usize) -> Self {
        Self {
            value: 0.0,
            grad: vec![0.0; n],
            skipped: true,
        }
    }

    fn ok(value: f64, grad: Vec<f64>) -> Self {
        Self {
            value,
            grad,
            skipped: false,
        }
    }
}

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::shape(truth.len(), pred.len()));
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population standard deviation and its gradient (zero when the spread is zero).
fn std_with_grad(x: &[f64]) -> (f64, Vec<f64>) {
    let n = x.len() as f64;
    let m = mean(x);
    let s = (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
    let g = if s > 0.0 {
        x.iter().map(|v| (v - m) / (n * s)).collect()
    } else {
        vec![0.0; x.len()]
    };
    (s, g)
}

fn smooth_l1_scalar(x: f64, delta: f64) -> (f64, f64) {
    if x.abs() < delta {
        (0.5 * x * x / delta, x / delta)
    } else {
        (x.abs() - 0.5 * delta, x.signum())
    }
}

/// Mean smooth L1 between two vectors, with gradient for the first.
pub fn smooth_l1(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_pair(a, b)?;
    if a.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = a.len() as f64;
    let mut total = 0.0;
    let grad = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let (v, d) = smooth_l1_scalar(x - y, SMOOTH_L1_DELTA);
            total += v;
            d / n
        })
        .collect();
    Ok((total / n, grad))
}

/// Mean squared error over positions where `mask` is set.
pub fn masked_mse(y: &[f64], y_hat: &[f64], mask: &[bool]) -> Result<f64> {
    check_pair(y_hat, y)?;
    if mask.len() != y.len() {
        return Err(Error::shape(y.len(), mask.len()));
    }
    let count = mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Err(Error::Data("mask selects no positions".into()));
    }
    let s: f64 = y
        .iter()
        .zip(y_hat)
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|((a, b), _)| (a - b).powi(2))
        .sum();
    Ok(s / count as f64)
}

/// Mean absolute mismatch of first differences.
pub fn jump_loss(pred: &[f64], truth: &[f64]) -> Result<Term> {
    check_pair(pred, truth)?;
    let n = pred.len();
    if n < 2 {
        return Ok(Term::skipped(n));
    }
    let pairs = (n - 1) as f64;
    let mut grad = vec![0.0; n];
    let mut total = 0.0;
    for i in 0..n - 1 {
        let d = (pred[i + 1] - pred[i]) - (truth[i + 1] - truth[i]);
        total += d.abs();
        let s = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        } / pairs;
        grad[i + 1] += s;
        grad[i] -= s;
    }
    Ok(Term::ok(total / pairs, grad))
}

/// Smooth L1 between rolling-window standard deviations.
pub fn vol_clustering_loss(pred: &[f64], truth: &[f64], window: usize, stride: usize) -> Result<Term> {
    check_pair(pred, truth)?;
    if window < 2 || stride == 0 {
        return Err(Error::Config(format!(
            "volatility window must be >= 2 and stride >= 1, got {window}/{stride}"
        )));
    }
    let n = pred.len();
    if window > n {
        return Ok(Term::skipped(n));
    }
    let starts: Vec<usize> = (0..=n - window).step_by(stride).collect();
    let mut sp = Vec::with_capacity(starts.len());
    let mut gp = Vec::with_capacity(starts.len());
    let mut st = Vec::with_capacity(starts.len());
    for &s in &starts {
        let (v, g) = std_with_grad(&pred[s..s + window]);
        sp.push(v);
        gp.push(g);
        st.push(std_with_grad(&truth[s..s + window]).0);
    }
    let (value, dstd) = smooth_l1(&sp, &st)?;
    let mut grad = vec![0.0; n];
    for ((&s, g), d) in starts.iter().zip(&gp).zip(&dstd) {
        for (k, gk) in g.iter().enumerate() {
            grad[s + k] += d * gk;
        }
    }
    Ok(Term::ok(value, grad))
}

/// Absolute difference of whole-sequence standard deviations.
pub fn global_vol_loss(pred: &[f64], truth: &[f64]) -> Result<Term> {
    check_pair(pred, truth)?;
    if pred.len() < 2 {
        return Ok(Term::skipped(pred.len()));
    }
    let (sp, g) = std_with_grad(pred);
    let (st, _) = std_with_grad(truth);
    let d = sp - st;
    let sign = if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    };
    Ok(Term::ok(d.abs(), g.into_iter().map(|v| sign * v).collect()))
}

/// Excess kurtosis `E[z^4] - 3` with population moments.
pub fn kurtosis(x: &[f64]) -> Result<f64> {
    Ok(kurtosis_with_grad(x)?.0)
}

fn kurtosis_with_grad(x: &[f64]) -> Result<(f64, Vec<f64>)> {
    if x.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let n = x.len() as f64;
    let m = mean(x);
    let c: Vec<f64> = x.iter().map(|v| v - m).collect();
    let m2 = c.iter().map(|v| v * v).sum::<f64>() / n;
    if !(m2 > 0.0) {
        return Err(Error::Numeric("kurtosis undefined for zero spread".into()));
    }
    let m3 = c.iter().map(|v| v.powi(3)).sum::<f64>() / n;
    let m4 = c.iter().map(|v| v.powi(4)).sum::<f64>() / n;
    let k = m4 / (m2 * m2) - 3.0;
    let grad = c
        .iter()
        .map(|ci| {
            let dm4 = 4.0 / n * (ci.powi(3) - m3);
            let dm2 = 2.0 / n * ci;
            dm4 / (m2 * m2) - 2.0 * m4 / (m2 * m2 * m2) * dm2
        })
        .collect();
    Ok((k, grad))
}

/// Squared difference of excess kurtosis.
pub fn tail_loss(pred: &[f64], truth: &[f64]) -> Result<Term> {
    check_pair(pred, truth)?;
    let (Ok((kp, g)), Ok((kt, _))) = (kurtosis_with_grad(pred), kurtosis_with_grad(truth)) else {
        return Ok(Term::skipped(pred.len()));
    };
    let d = kp - kt;
    Ok(Term::ok(d * d, g.into_iter().map(|v| 2.0 * d * v).collect()))
}

/// Squared mismatch of the total change from first to last element.
pub fn drift_loss(pred: &[f64], truth: &[f64]) -> Result<Term> {
    check_pair(pred, truth)?;
    let n = pred.len();
    if n < 2 {
        return Ok(Term::skipped(n));
    }
    let d = (pred[n - 1] - pred[0]) - (truth[n - 1] - truth[0]);
    let mut grad = vec![0.0; n];
    grad[n - 1] += 2.0 * d;
    grad[0] -= 2.0 * d;
    Ok(Term::ok(d * d, grad))
}

fn check_quantile(q: f64) -> Result<()> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Config(format!("quantile {q} outside (0,1)")));
    }
    Ok(())
}

/// Mean quantile loss of `y_hat` against `y`; under-prediction costs `q`,
/// over-prediction `1 - q`.
pub fn pinball_loss(y: &[f64], y_hat: &[f64], q: f64) -> Result<f64> {
    Ok(pinball_with_grad(y, y_hat, q)?.0)
}

fn pinball_with_grad(y: &[f64], y_hat: &[f64], q: f64) -> Result<(f64, Vec<f64>)> {
    check_quantile(q)?;
    check_pair(y_hat, y)?;
    if y.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = y.len() as f64;
    let mut total = 0.0;
    let grad = y
        .iter()
        .zip(y_hat)
        .map(|(a, b)| {
            if a >= b {
                total += q * (a - b);
                if a > b {
                    -q / n
                } else {
                    0.0
                }
            } else {
                total += (1.0 - q) * (b - a);
                (1.0 - q) / n
            }
        })
        .collect();
    Ok((total / n, grad))
}

/// Pinball loss averaged over the low and high tail quantiles.
pub fn two_sided_pinball(pred: &[f64], truth: &[f64]) -> Result<Term> {
    check_pair(pred, truth)?;
    if pred.is_empty() {
        return Ok(Term::skipped(0));
    }
    let k = PINBALL_QUANTILES.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for q in PINBALL_QUANTILES {
        let (v, g) = pinball_with_grad(truth, pred, q)?;
        value += v / k;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b / k;
        }
    }
    Ok(Term::ok(value, grad))
}

fn dft(x: &[f64]) -> Vec<Complex<f64>> {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|v| Complex::new(*v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf
}

/// Magnitude spectrum scaled so its largest bin is one.
pub fn normalized_spectrum(x: &[f64]) -> Result<Vec<f64>> {
    let mag: Vec<f64> = dft(x).iter().map(|c| c.norm()).collect();
    let max = mag.iter().cloned().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(Error::Numeric("spectrum of an all-zero sequence".into()));
    }
    Ok(mag.into_iter().map(|m| m / max).collect())
}

/// Smooth L1 between max-normalised magnitude spectra.
pub fn spectral_loss(pred: &[f64], truth: &[f64]) -> Result<Term> {
    check_pair(pred, truth)?;
    let n = pred.len();
    if n < 2 {
        return Ok(Term::skipped(n));
    }
    let Ok(target) = normalized_spectrum(truth) else {
        return Ok(Term::skipped(n));
    };
    let spec = dft(pred);
    let mag: Vec<f64> = spec.iter().map(|c| c.norm()).collect();
    let (kmax, max) = mag
        .iter()
        .cloned()
        .enumerate()
        .fold((0, 0.0), |acc, (k, m)| if m > acc.1 { (k, m) } else { acc });
    if !(max > 0.0) {
        return Ok(Term::skipped(n));
    }
    let norm: Vec<f64> = mag.iter().map(|m| m / max).collect();
    let (value, g) = smooth_l1(&norm, &target)?;
    // chain through the max normalisation, holding the argmax fixed
    let mut dmag: Vec<f64> = g.iter().map(|gk| gk / max).collect();
    dmag[kmax] -= g.iter().zip(&mag).map(|(gk, mk)| gk * mk).sum::<f64>() / (max * max);
    // d|X_k|/dx_n = Re(conj(X_k) e^{-2 pi i k n / N}) / |X_k|
    let weights: Vec<f64> = dmag
        .iter()
        .zip(&mag)
        .map(|(d, m)| if *m > 0.0 { d / m } else { 0.0 })
        .collect();
    let mut buf: Vec<Complex<f64>> = spec.iter().zip(&weights).map(|(x, w)| x.conj() * *w).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    Ok(Term::ok(value, buf.iter().map(|c| c.re).collect()))
}

/// Maximum regulariser weights plus warm-up and window settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_jump: f64,
    pub lambda_vol: f64,
    pub lambda_gvol: f64,
    pub lambda_kurt: f64,
    pub lambda_drift: f64,
    pub lambda_pinball: f64,
    pub lambda_spectral: f64,
    /// Fraction of training over which weights ramp linearly from zero.
    pub warmup_fraction: f64,
    pub vol_window: usize,
    pub vol_stride: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_jump: 0.1,
            lambda_vol: 0.1,
            lambda_gvol: 0.1,
            lambda_kurt: 0.05,
            lambda_drift: 0.1,
            lambda_pinball: 0.05,
            lambda_spectral: 0.05,
            warmup_fraction: 0.1,
            vol_window: 5,
            vol_stride: 1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.maxima().iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "warmup_fraction {} outside (0,1]",
                self.warmup_fraction
            )));
        }
        if self.vol_window < 2 || self.vol_stride == 0 {
            return Err(Error::Config("vol_window must be >= 2 and vol_stride >= 1".into()));
        }
        Ok(())
    }

    /// In term order: jump, vol, gvol, kurt, drift, pinball, spectral.
    pub fn maxima(&self) -> [f64; 7] {
        [
            self.lambda_jump,
            self.lambda_vol,
            self.lambda_gvol,
            self.lambda_kurt,
            self.lambda_drift,
            self.lambda_pinball,
            self.lambda_spectral,
        ]
    }

    /// Linear warm-up factor in `[0, 1]`.
    pub fn anneal(&self, step: usize, total_steps: usize) -> f64 {
        let warm = self.warmup_fraction * total_steps as f64;
        if warm <= 0.0 {
            return if step == 0 { 0.0 } else { 1.0 };
        }
        (step as f64 / warm).min(1.0)
    }

    pub fn at_step(&self, step: usize, total_steps: usize) -> [f64; 7] {
        let a = self.anneal(step, total_steps);
        self.maxima().map(|l| l * a)
    }
}

pub const TERM_NAMES: [&str; 7] = ["jump", "vol", "gvol", "kurt", "drift", "pinball", "spectral"];

/// Per-term values (unweighted), the weights applied and the total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub core: f64,
    pub terms: [f64; 7],
    pub weights: [f64; 7],
    /// Samples for which each term was undefined and contributed nothing.
    pub skipped: [usize; 7],
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,core,jump,vol,gvol,kurt,drift,pinball,spectral,total";

    pub fn csv_row(&self, step: usize) -> String {
        let mut s = format!("{step},{}", self.core);
        for t in self.terms {
            s.push_str(&format!(",{t}"));
        }
        s.push_str(&format!(",{}", self.total));
        s
    }
}

/// Everything the objective needs about one training batch. Sequences are
/// stored as `(batch, 1, length)` tensors padded beyond `valid_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBatch {
    pub x0: Tensor3,
    pub x_t: Tensor3,
    pub target: Tensor3,
    pub steps: Vec<usize>,
    pub valid_len: Vec<usize>,
}

fn sample_terms(pred: &[f64], truth: &[f64], weights: &LossWeights) -> Result<[Term; 7]> {
    Ok([
        jump_loss(pred, truth)?,
        vol_clustering_loss(pred, truth, weights.vol_window, weights.vol_stride)?,
        global_vol_loss(pred, truth)?,
        tail_loss(pred, truth)?,
        drift_loss(pred, truth)?,
        two_sided_pinball(pred, truth)?,
        spectral_loss(pred, truth)?,
    ])
}

/// Composite loss and its gradient with respect to the network output.
///
/// Auxiliary terms compare the clean sequence implied by the prediction
/// against the true clean sequence on each sample's valid prefix, and are
/// averaged over the samples where they are defined.
pub fn total_loss(
    batch: &LossBatch,
    prediction: &Tensor3,
    mode: PredictionMode,
    sched: &NoiseSchedule,
    step: usize,
    total_steps: usize,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Tensor3)> {
    let (b, c, l) = prediction.shape();
    if c != 1 || batch.target.shape() != (b, c, l) || batch.x0.shape() != (b, c, l) || batch.x_t.shape() != (b, c, l) {
        return Err(Error::shape(
            format!("{:?}", batch.target.shape()),
            format!("{:?}", prediction.shape()),
        ));
    }
    if batch.steps.len() != b || batch.valid_len.len() != b || batch.valid_len.iter().any(|n| *n > l) {
        return Err(Error::Data("per-sample steps/valid lengths do not match the batch".into()));
    }
    let count: usize = batch.valid_len.iter().sum();
    if count == 0 {
        return Err(Error::Data("mask selects no positions".into()));
    }

    let mut grad = Tensor3::zeros(b, 1, l);
    let mut core = 0.0;
    for i in 0..b {
        let n = batch.valid_len[i];
        let p = &prediction.sample(i)[..n];
        let y = &batch.target.sample(i)[..n];
        let g = &mut grad.sample_mut(i)[..n];
        for k in 0..n {
            let d = p[k] - y[k];
            core += d * d;
            g[k] = 2.0 * d / count as f64;
        }
    }
    core /= count as f64;

    let lambdas = weights.at_step(step, total_steps);
    let mut terms = [0.0; 7];
    let mut skipped = [0usize; 7];
    if lambdas.iter().any(|l| *l > 0.0) {
        let mut per_sample = Vec::with_capacity(b);
        for i in 0..b {
            let n = batch.valid_len[i];
            let (a, c) = recover_x0_coefficients(mode, batch.steps[i], sched)?;
            let x0_hat: Vec<f64> = batch.x_t.sample(i)[..n]
                .iter()
                .zip(&prediction.sample(i)[..n])
                .map(|(x, p)| a * x + c * p)
                .collect();
            per_sample.push((c, sample_terms(&x0_hat, &batch.x0.sample(i)[..n], weights)?));
        }
        for k in 0..7 {
            let defined = per_sample.iter().filter(|(_, t)| !t[k].skipped).count();
            skipped[k] = b - defined;
            if defined == 0 {
                continue;
            }
            let scale = lambdas[k] / defined as f64;
            for (i, (c, t)) in per_sample.iter().enumerate() {
                let term = &t[k];
                if term.skipped {
                    continue;
                }
                terms[k] += term.value / defined as f64;
                if scale != 0.0 {
                    for (g, d) in grad.sample_mut(i).iter_mut().zip(&term.grad) {
                        *g += scale * c * d;
                    }
                }
            }
        }
    }
    let total = core + terms.iter().zip(&lambdas).map(|(t, l)| t * l).sum::<f64>();
    Ok((
        LossBreakdown {
            core,
            terms,
            weights: lambdas,
            skipped,
            total,
        },
        grad,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn masked_mse_examples() {
        assert_eq!(masked_mse(&[1.0, 2.0], &[1.0, 2.0], &[true, true]).unwrap(), 0.0);
        assert_eq!(masked_mse(&[1.0, 9.0], &[0.0, 0.0], &[true, false]).unwrap(), 1.0);
        assert_relative_eq!(masked_mse(&[1.0, 2.0, 3.0], &[0.0; 3], &[true; 3]).unwrap(), 14.0 / 3.0);
        assert!(matches!(masked_mse(&[1.0], &[0.0], &[false]), Err(Error::Data(_))));
    }

    #[test]
    fn jump_examples() {
        assert_eq!(jump_loss(&[0.0, 1.0, 3.0], &[0.0, 1.0, 3.0]).unwrap().value, 0.0);
        assert_eq!(jump_loss(&[0.0, 2.0], &[0.0, 1.0]).unwrap().value, 1.0);
        assert_eq!(jump_loss(&[0.0, 1.0, 3.0], &[0.0, 1.0, 1.0]).unwrap().value, 1.0);
        assert!(jump_loss(&[1.0], &[2.0]).unwrap().skipped);
    }

    #[test]
    fn smooth_l1_branches() {
        assert_relative_eq!(smooth_l1(&[0.2], &[0.5]).unwrap().0, 0.045, epsilon = 1e-15);
        assert_eq!(smooth_l1(&[2.5], &[0.5]).unwrap().0, 1.5);
    }

    #[test]
    fn vol_clustering_examples() {
        let x = normals(20, 1);
        assert_eq!(vol_clustering_loss(&x, &x, 5, 1).unwrap().value, 0.0);
        // a single window of two points has population std |a-b|/2
        let v = vol_clustering_loss(&[0.0, 0.4], &[0.0, 1.0], 2, 1).unwrap().value;
        assert_relative_eq!(v, 0.045, epsilon = 1e-15);
        assert!(vol_clustering_loss(&x[..3], &x[..3], 5, 1).unwrap().skipped);
    }

    #[test]
    fn global_vol_examples() {
        let x = normals(30, 2);
        assert_eq!(global_vol_loss(&x, &x).unwrap().value, 0.0);
        let pred = [0.3, -0.3, 0.3, -0.3];
        let truth = [0.1, -0.1, 0.1, -0.1];
        assert_relative_eq!(global_vol_loss(&pred, &truth).unwrap().value, 0.2, epsilon = 1e-15);
        assert_relative_eq!(global_vol_loss(&[1.0; 4], &truth).unwrap().value, 0.1, epsilon = 1e-15);
    }

    #[test]
    fn kurtosis_examples() {
        assert_relative_eq!(kurtosis(&[-1.0, 1.0, -1.0, 1.0]).unwrap(), -2.0, epsilon = 1e-15);
        let big = normals(100_000, 7);
        assert!(kurtosis(&big).unwrap().abs() < 0.1);
        assert!(kurtosis(&[2.0; 5]).is_err());
        let x = normals(12, 3);
        assert_eq!(tail_loss(&x, &x).unwrap().value, 0.0);
        assert!(tail_loss(&[1.0; 4], &x[..4]).unwrap().skipped);
    }

    #[test]
    fn drift_examples() {
        let t = [0.0, 0.1, 0.3];
        assert!(drift_loss(&[5.0, 5.1, 5.3], &t).unwrap().value < 1e-28);
        assert_relative_eq!(drift_loss(&[0.0, 0.5], &[0.0, 0.2]).unwrap().value, 0.09, epsilon = 1e-15);
        assert_relative_eq!(drift_loss(&[0.0, 0.2], &[0.0, -0.2]).unwrap().value, 0.16, epsilon = 1e-15);
    }

    #[test]
    fn pinball_examples() {
        assert_eq!(pinball_loss(&[1.0, 2.0], &[1.0, 2.0], 0.3).unwrap(), 0.0);
        assert_relative_eq!(pinball_loss(&[1.0], &[0.0], 0.99).unwrap(), 0.99);
        assert_relative_eq!(pinball_loss(&[0.0], &[1.0], 0.01).unwrap(), 0.99);
        assert_relative_eq!(pinball_loss(&[0.0], &[1.0], 0.99).unwrap(), 0.01, epsilon = 1e-15);
        assert!(matches!(pinball_loss(&[0.0], &[1.0], 1.0), Err(Error::Config(_))));
        assert!(matches!(pinball_loss(&[0.0], &[1.0], 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn spectral_examples() {
        let x = normals(16, 4);
        assert_eq!(spectral_loss(&x, &x).unwrap().value, 0.0);
        let dc = normalized_spectrum(&[3.0; 8]).unwrap();
        assert_relative_eq!(dc[0], 1.0);
        assert!(dc[1..].iter().all(|v| v.abs() < 1e-12));
        let n = 16;
        let wave = |k: f64| -> Vec<f64> {
            (0..n).map(|i| (2.0 * std::f64::consts::PI * k * i as f64 / n as f64).cos()).collect()
        };
        assert!(spectral_loss(&wave(2.0), &wave(5.0)).unwrap().value > 0.0);
        assert!(spectral_loss(&x, &[0.0; 16]).unwrap().skipped);
    }

    /// Central differences of a term's value against its analytic gradient.
    fn check_term_gradient(f: impl Fn(&[f64]) -> Term, x: &[f64]) {
        let g = f(x).grad;
        let h = 1e-6;
        for i in 0..x.len() {
            let mut up = x.to_vec();
            up[i] += h;
            let mut dn = x.to_vec();
            dn[i] -= h;
            let fd = (f(&up).value - f(&dn).value) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "coord {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn term_gradients_match_finite_differences() {
        let truth = normals(16, 10);
        let pred: Vec<f64> = normals(16, 11).iter().map(|v| v * 1.7 + 0.2).collect();
        check_term_gradient(|p| jump_loss(p, &truth).unwrap(), &pred);
        check_term_gradient(|p| vol_clustering_loss(p, &truth, 5, 2).unwrap(), &pred);
        check_term_gradient(|p| global_vol_loss(p, &truth).unwrap(), &pred);
        check_term_gradient(|p| tail_loss(p, &truth).unwrap(), &pred);
        check_term_gradient(|p| drift_loss(p, &truth).unwrap(), &pred);
        check_term_gradient(|p| two_sided_pinball(p, &truth).unwrap(), &pred);
        check_term_gradient(|p| spectral_loss(p, &truth).unwrap(), &pred);
    }

    fn batch_fixture(perfect: bool) -> (LossBatch, Tensor3, NoiseSchedule) {
        let sched = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let (b, l) = (3, 12);
        let valid = vec![12, 9, 6];
        let mut x0 = Tensor3::from_vec(b, 1, l, normals(b * l, 1)).unwrap();
        let eps = Tensor3::from_vec(b, 1, l, normals(b * l, 2)).unwrap();
        for (i, n) in valid.iter().enumerate() {
            x0.sample_mut(i)[*n..].fill(0.0);
        }
        let steps = vec![5, 50, 100];
        let mut x_t = Tensor3::zeros(b, 1, l);
        let mut target = Tensor3::zeros(b, 1, l);
        for i in 0..b {
            let xt = crate::diffusion_schedule::forward_diffuse(x0.sample(i), steps[i], eps.sample(i), &sched).unwrap();
            x_t.sample_mut(i).copy_from_slice(&xt);
            let v = crate::diffusion_schedule::v_target(x0.sample(i), eps.sample(i), steps[i], &sched).unwrap();
            target.sample_mut(i).copy_from_slice(&v);
        }
        let mut pred = target.clone();
        if !perfect {
            pred.data.iter_mut().zip(normals(b * l, 3)).for_each(|(p, n)| *p += 0.3 * n);
        }
        (
            LossBatch {
                x0,
                x_t,
                target,
                steps,
                valid_len: valid,
            },
            pred,
            sched,
        )
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let (batch, pred, sched) = batch_fixture(true);
        let (br, _) = total_loss(&batch, &pred, PredictionMode::V, &sched, 1000, 1000, &LossWeights::default()).unwrap();
        assert_eq!(br.core, 0.0);
        for t in br.terms {
            assert!(t.abs() < 1e-10, "{br:?}");
        }
        assert!(br.total.abs() < 1e-10);
    }

    #[test]
    fn annealing_starts_at_core_and_saturates() {
        let w = LossWeights::default();
        let (batch, pred, sched) = batch_fixture(false);
        let (br0, _) = total_loss(&batch, &pred, PredictionMode::V, &sched, 0, 1000, &w).unwrap();
        assert_eq!(br0.total, br0.core);
        assert_eq!(w.at_step(100, 1000), w.maxima());
        assert_eq!(w.at_step(5000, 1000), w.maxima());
        let (br, _) = total_loss(&batch, &pred, PredictionMode::V, &sched, 500, 1000, &w).unwrap();
        assert!(br.total >= br.core);
        assert!(br.terms.iter().all(|t| *t >= 0.0));
        let mut prev = 0.0;
        for s in 0..300 {
            let a = w.anneal(s, 1000);
            assert!(a >= prev);
            prev = a;
        }
    }

    #[test]
    fn padding_values_do_not_matter() {
        let (batch, pred, sched) = batch_fixture(false);
        let w = LossWeights::default();
        let (base, g0) = total_loss(&batch, &pred, PredictionMode::V, &sched, 900, 1000, &w).unwrap();
        let mut b2 = batch.clone();
        let mut p2 = pred.clone();
        for i in 0..3 {
            let n = batch.valid_len[i];
            for t in [&mut b2.x0, &mut b2.x_t, &mut b2.target, &mut p2] {
                t.sample_mut(i)[n..].iter_mut().for_each(|v| *v += 123.0);
            }
        }
        let (other, g1) = total_loss(&b2, &p2, PredictionMode::V, &sched, 900, 1000, &w).unwrap();
        assert!((base.core - other.core).abs() <= 1e-12);
        for k in 0..7 {
            assert!((base.terms[k] - other.terms[k]).abs() <= 1e-12);
        }
        for i in 0..3 {
            let n = batch.valid_len[i];
            assert!(g1.sample(i)[n..].iter().all(|v| *v == 0.0));
            assert_eq!(g0.sample(i), g1.sample(i));
        }
    }

    #[test]
    fn total_gradient_matches_finite_differences() {
        let (batch, pred, sched) = batch_fixture(false);
        let w = LossWeights::default();
        for mode in [PredictionMode::V, PredictionMode::Eps, PredictionMode::X0] {
            let f = |p: &Tensor3| total_loss(&batch, p, mode, &sched, 900, 1000, &w).unwrap();
            let (_, g) = f(&pred);
            let h = 1e-6;
            for i in 0..pred.data.len() {
                let mut up = pred.clone();
                up.data[i] += h;
                let mut dn = pred.clone();
                dn.data[i] -= h;
                let fd = (f(&up).0.total - f(&dn).0.total) / (2.0 * h);
                assert!((fd - g.data[i]).abs() <= 1e-5 * (1.0 + fd.abs()), "{mode:?} {i}: {fd} vs {}", g.data[i]);
            }
        }
    }
}
