//! Trained generator: denoiser plus schedule, JSON checkpoints, the Adam
//! training loop, and the path-generator adapter used by the game.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserConfig, DenoiserInput, Mode, ParamEntry, Tensor3};
use crate::diffusion_schedule::{forward_diffuse, training_target, NoiseSchedule, PredictionMode, ScheduleConfig};
use crate::error::{Error, Result};
use crate::market_paths::{PathSlice, CONDITION_DIM};
use crate::objectives::{total_loss, LossBatch, LossBreakdown, LossWeights};
use crate::pq_game::PathGenerator;
use crate::sampler::{sample_paths, NoisePredictor, SamplerConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const DEFAULT_RETURN_SCALE: f64 = 0.015;

/// Denoiser with the schedule and data scaling it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionModel {
    pub denoiser: Denoiser,
    pub schedule_config: ScheduleConfig,
    pub schedule: NoiseSchedule,
    pub mode: PredictionMode,
    /// Log returns are divided by this before diffusion.
    pub return_scale: f64,
}

impl DiffusionModel {
    pub fn init(
        config: DenoiserConfig,
        schedule_config: ScheduleConfig,
        mode: PredictionMode,
        return_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(return_scale > 0.0) || !return_scale.is_finite() {
            return Err(Error::Config(format!("return_scale must be positive, got {return_scale}")));
        }
        Ok(Self {
            denoiser: Denoiser::init(config, seed)?,
            schedule: schedule_config.build()?,
            schedule_config,
            mode,
            return_scale,
        })
    }

    /// Generated log returns in market units for one condition.
    pub fn sample_returns(&self, sampler: &SamplerConfig, slice: &PathSlice) -> Result<Vec<Vec<f64>>> {
        let mut paths = sample_paths(self, sampler, &slice.condition, &self.schedule)?;
        paths.iter_mut().flatten().for_each(|v| *v *= self.return_scale);
        Ok(paths)
    }
}

impl NoisePredictor for DiffusionModel {
    fn mode(&self) -> PredictionMode {
        self.mode
    }

    fn input_length(&self) -> usize {
        self.denoiser.config().input_length
    }

    fn predict(&self, x: &Tensor3, t: usize, cond: &[[f64; CONDITION_DIM]]) -> Result<Tensor3> {
        let input = DenoiserInput {
            x: x.clone(),
            steps: vec![t; x.batch],
            cond: cond.to_vec(),
        };
        self.denoiser.forward(&input, Mode::Eval)
    }
}

/// Diffusion model bound to sampler settings; the trader's path source.
#[derive(Debug, Clone, Copy)]
pub struct DiffusionGenerator<'a> {
    pub model: &'a DiffusionModel,
    pub sampler: SamplerConfig,
}

impl PathGenerator for DiffusionGenerator<'_> {
    fn generate(&self, slice: &PathSlice, n_paths: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let cfg = SamplerConfig {
            n_paths,
            seed,
            ..self.sampler
        };
        self.model.sample_returns(&cfg, slice)
    }
}

/// Adam moments and the number of updates applied so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: usize,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// On-disk model: configuration, flat parameters with their index map,
/// normalisation buffers, and optional optimiser state for resuming.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub mode: PredictionMode,
    pub return_scale: f64,
    pub param_index: Vec<ParamEntry>,
    pub buffer_index: Vec<ParamEntry>,
    pub params: Vec<f64>,
    pub buffers: Vec<f64>,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn from_model(model: &DiffusionModel, optimizer: Option<&AdamState>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            denoiser: *model.denoiser.config(),
            schedule: model.schedule_config,
            mode: model.mode,
            return_scale: model.return_scale,
            param_index: model.denoiser.param_entries().to_vec(),
            buffer_index: model.denoiser.buffer_entries().to_vec(),
            params: model.denoiser.params().to_vec(),
            buffers: model.denoiser.buffers().to_vec(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn into_model(self) -> Result<(DiffusionModel, Option<AdamState>)> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {}", self.version)));
        }
        let denoiser = Denoiser::from_parts(self.denoiser, self.params, self.buffers)?;
        if denoiser.param_entries() != self.param_index.as_slice() || denoiser.buffer_entries() != self.buffer_index.as_slice() {
            return Err(Error::Config("checkpoint index map does not match its denoiser config".into()));
        }
        if let Some(opt) = &self.optimizer {
            if opt.m.len() != denoiser.num_params() || opt.v.len() != denoiser.num_params() {
                return Err(Error::Config("optimizer state does not match the parameter count".into()));
            }
        }
        let model = DiffusionModel {
            denoiser,
            schedule: self.schedule.build()?,
            schedule_config: self.schedule,
            mode: self.mode,
            return_scale: self.return_scale,
        };
        Ok((model, self.optimizer))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Total optimisation steps; also sets the loss warm-up horizon.
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    pub bn_momentum: f64,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            bn_momentum: 0.1,
            seed: 7,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for batch normalisation".into()));
        }
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !(self.learning_rate > 0.0) || !unit(self.beta1) || !unit(self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("invalid optimiser hyper-parameters".into()));
        }
        if !(self.grad_clip > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("grad_clip must be positive and bn_momentum in [0,1]".into()));
        }
        Ok(())
    }
}

/// Scaled, padded training examples.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub x0: Vec<Vec<f64>>,
    pub valid_len: Vec<usize>,
    pub cond: Vec<[f64; CONDITION_DIM]>,
}

impl TrainingSet {
    pub fn new(slices: &[PathSlice], length: usize, return_scale: f64) -> Result<Self> {
        if slices.is_empty() {
            return Err(Error::Data("no training slices".into()));
        }
        let mut set = Self {
            x0: Vec::with_capacity(slices.len()),
            valid_len: Vec::with_capacity(slices.len()),
            cond: Vec::with_capacity(slices.len()),
        };
        for s in slices {
            if s.valid_len() > length || s.valid_len() == 0 {
                return Err(Error::Data(format!(
                    "slice at {} has {} returns; model length is {length}",
                    s.start_date,
                    s.valid_len()
                )));
            }
            let mut x = vec![0.0; length];
            for (d, r) in x.iter_mut().zip(&s.log_returns) {
                *d = r / return_scale;
            }
            set.x0.push(x);
            set.valid_len.push(s.valid_len());
            set.cond.push(s.condition.features());
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }
}

/// Random mini-batch for update `step`, drawn from its own stream so that
/// any step can be replayed independently of earlier ones.
pub fn draw_batch(
    data: &TrainingSet,
    model: &DiffusionModel,
    batch_size: usize,
    seed: u64,
    step: usize,
) -> Result<(DenoiserInput, LossBatch)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    let l = model.denoiser.config().input_length;
    let t_max = model.schedule.steps();
    let mut x0 = Tensor3::zeros(batch_size, 1, l);
    let mut x_t = Tensor3::zeros(batch_size, 1, l);
    let mut target = Tensor3::zeros(batch_size, 1, l);
    let mut steps = Vec::with_capacity(batch_size);
    let mut valid_len = Vec::with_capacity(batch_size);
    let mut cond = Vec::with_capacity(batch_size);
    for b in 0..batch_size {
        let i = rng.gen_range(0..data.len());
        let t = rng.gen_range(1..=t_max);
        let eps: Vec<f64> = (0..l).map(|_| StandardNormal.sample(&mut rng)).collect();
        let clean = &data.x0[i];
        x0.sample_mut(b).copy_from_slice(clean);
        x_t.sample_mut(b).copy_from_slice(&forward_diffuse(clean, t, &eps, &model.schedule)?);
        target
            .sample_mut(b)
            .copy_from_slice(&training_target(model.mode, clean, &eps, t, &model.schedule)?);
        steps.push(t);
        valid_len.push(data.valid_len[i]);
        cond.push(data.cond[i]);
    }
    let input = DenoiserInput {
        x: x_t.clone(),
        steps: steps.clone(),
        cond,
    };
    Ok((
        input,
        LossBatch {
            x0,
            x_t,
            target,
            steps,
            valid_len,
        },
    ))
}

/// Loss of the current parameters on one batch, without updating anything.
pub fn evaluate_loss(
    model: &DiffusionModel,
    data: &TrainingSet,
    weights: &LossWeights,
    batch_size: usize,
    seed: u64,
) -> Result<LossBreakdown> {
    let (input, batch) = draw_batch(data, model, batch_size, seed, 0)?;
    let out = model.denoiser.forward(&input, Mode::Train)?;
    // evaluated at saturated weights
    Ok(total_loss(&batch, &out, model.mode, &model.schedule, 1, 1, weights)?.0)
}

/// Called after each update with the step just completed.
pub trait TrainObserver {
    fn on_step(&mut self, step: usize, breakdown: &LossBreakdown, model: &DiffusionModel, optimizer: &AdamState) -> Result<()>;
}

impl TrainObserver for () {
    fn on_step(&mut self, _: usize, _: &LossBreakdown, _: &DiffusionModel, _: &AdamState) -> Result<()> {
        Ok(())
    }
}

/// Collects every breakdown in memory.
#[derive(Debug, Default)]
pub struct LossLog(pub Vec<(usize, LossBreakdown)>);

impl TrainObserver for LossLog {
    fn on_step(&mut self, step: usize, b: &LossBreakdown, _: &DiffusionModel, _: &AdamState) -> Result<()> {
        self.0.push((step, b.clone()));
        Ok(())
    }
}

impl LossLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        writeln!(w, "{}", LossBreakdown::CSV_HEADER)?;
        for (s, b) in &self.0 {
            writeln!(w, "{}", b.csv_row(*s))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One Adam update with global-norm clipping.
pub fn adam_update(params: &mut [f64], grad: &[f64], state: &mut AdamState, cfg: &TrainConfig) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let clip = if norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        let g = g * clip;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
    }
}

/// Train from `state.step` up to `until` (at most `cfg.steps`). Loss
/// weights anneal against `cfg.steps`, so stopping early and resuming
/// replays the uninterrupted run exactly.
pub fn train<O: TrainObserver + ?Sized>(
    model: &mut DiffusionModel,
    state: &mut AdamState,
    data: &TrainingSet,
    cfg: &TrainConfig,
    weights: &LossWeights,
    until: usize,
    observer: &mut O,
) -> Result<()> {
    cfg.validate()?;
    weights.validate()?;
    if state.m.len() != model.denoiser.num_params() {
        return Err(Error::Config("optimizer state does not match the model".into()));
    }
    let until = until.min(cfg.steps);
    while state.step < until {
        let step = state.step;
        let (input, batch) = draw_batch(data, model, cfg.batch_size, cfg.seed, step)?;
        let (mode, sched) = (model.mode, &model.schedule);
        let g = model.denoiser.gradient(&input, |out| {
            let (br, grad) = total_loss(&batch, out, mode, sched, step, cfg.steps, weights)?;
            Ok((br.total, grad, br))
        })?;
        if !g.grad.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient at step {step}")));
        }
        adam_update(model.denoiser.params_mut(), &g.grad, state, cfg);
        model.denoiser.update_running_stats(&g.bn_stats, cfg.bn_momentum);
        observer.on_step(step, &g.extra, model, state)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_paths::ConditionVector;
    use chrono::NaiveDate;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            base_channels: 4,
            depth: 1,
            time_embed_dim: 4,
            cond_embed_dim: 2,
            cond_hidden_dim: 4,
            input_length: 8,
        }
    }

    fn model() -> DiffusionModel {
        DiffusionModel::init(
            tiny(),
            ScheduleConfig {
                steps: 100,
                ..Default::default()
            },
            PredictionMode::V,
            0.015,
            3,
        )
        .unwrap()
    }

    fn slices() -> Vec<PathSlice> {
        (0..12)
            .map(|i| {
                let n = 6 + i % 3;
                let returns: Vec<f64> = (0..n).map(|k| 0.012 * ((i * 7 + k) as f64).sin()).collect();
                let mut mask = vec![false; 8];
                mask[..n].fill(true);
                PathSlice {
                    start_date: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap() + chrono::Days::new(i as u64),
                    s0: 100.0,
                    log_returns: returns,
                    mask,
                    condition: ConditionVector {
                        sigma_hist: 0.2,
                        r: 0.02,
                        t_calendar: 10.0 / 365.0,
                        t_trading: (n + 1) as f64 / 252.0,
                        n_trading: n,
                    },
                    window_calendar_days: 10,
                }
            })
            .collect()
    }

    fn train_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 8,
            learning_rate: 3e-3,
            ..Default::default()
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut m = model();
        m.denoiser.params_mut()[0] = 0.1 + 0.2;
        let opt = AdamState {
            step: 3,
            m: vec![1e-300; m.denoiser.num_params()],
            v: vec![std::f64::consts::PI; m.denoiser.num_params()],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt.json");
        Checkpoint::from_model(&m, Some(&opt)).save(&p).unwrap();
        let (back, back_opt) = Checkpoint::load(&p).unwrap().into_model().unwrap();
        assert_eq!(back, m);
        assert_eq!(back_opt, Some(opt));
    }

    #[test]
    fn checkpoint_mismatch_rejected() {
        let mut c = Checkpoint::from_model(&model(), None);
        c.denoiser.base_channels = 8;
        assert!(c.clone().into_model().is_err());
        let mut c = Checkpoint::from_model(&model(), None);
        c.param_index[0].name = "other".into();
        assert!(matches!(c.into_model(), Err(Error::Config(_))));
        let dir = tempfile::tempdir().unwrap();
        let missing = Checkpoint::load(&dir.path().join("nope.json")).unwrap_err();
        assert!(missing.to_string().contains("nope.json"));
    }

    #[test]
    fn zero_steps_leaves_initialisation() {
        let mut m = model();
        let init = m.clone();
        let data = TrainingSet::new(&slices(), 8, 0.015).unwrap();
        let mut st = AdamState::new(m.denoiser.num_params());
        train(&mut m, &mut st, &data, &train_cfg(0), &LossWeights::default(), 0, &mut ()).unwrap();
        assert_eq!(m, init);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = TrainingSet::new(&slices(), 8, 0.015).unwrap();
        let cfg = train_cfg(20);
        let w = LossWeights::default();
        let mut a = model();
        let mut sa = AdamState::new(a.denoiser.num_params());
        train(&mut a, &mut sa, &data, &cfg, &w, 20, &mut ()).unwrap();

        let mut b = model();
        let mut sb = AdamState::new(b.denoiser.num_params());
        train(&mut b, &mut sb, &data, &cfg, &w, 10, &mut ()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mid.json");
        Checkpoint::from_model(&b, Some(&sb)).save(&p).unwrap();
        let (mut c, sc) = Checkpoint::load(&p).unwrap().into_model().unwrap();
        let mut sc = sc.unwrap();
        train(&mut c, &mut sc, &data, &cfg, &w, 20, &mut ()).unwrap();
        assert_eq!(c, a);
        assert_eq!(sc, sa);
    }

    #[test]
    fn training_reduces_loss() {
        let data = TrainingSet::new(&slices(), 8, 0.015).unwrap();
        let cfg = train_cfg(200);
        let w = LossWeights::default();
        let mut m = model();
        let before = evaluate_loss(&m, &data, &w, 64, 99).unwrap().total;
        let mut st = AdamState::new(m.denoiser.num_params());
        let mut log = LossLog::default();
        train(&mut m, &mut st, &data, &cfg, &w, 200, &mut log).unwrap();
        let after = evaluate_loss(&m, &data, &w, 64, 99).unwrap().total;
        assert!(after < before, "{before} -> {after}");
        assert_eq!(log.0.len(), 200);
        assert_eq!(log.0[0].1.total, log.0[0].1.core);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let cfg = TrainConfig::default();
        let mut p = vec![1.0, -1.0];
        let mut st = AdamState::new(2);
        adam_update(&mut p, &[0.3, -0.4], &mut st, &cfg);
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn untrained_generator_stays_finite() {
        let m = model();
        let s = &slices()[0];
        let gen = DiffusionGenerator {
            model: &m,
            sampler: SamplerConfig {
                num_steps: 10,
                ..Default::default()
            },
        };
        let paths = gen.generate(s, 200, 5).unwrap();
        assert_eq!(paths.len(), 200);
        assert!(paths.iter().all(|p| p.len() == s.valid_len()));
        assert!(paths.iter().flatten().all(|v| v.is_finite()));
        assert_eq!(paths, gen.generate(s, 200, 5).unwrap());
    }
}
