//! Command-line entry points: prepare, train, sample, validate and game.
//!
//! Each command is a pure function of the resolved config, its input files
//! and the seeds therein; rerunning it rewrites byte-identical outputs.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{spread_indices, DataSource, PathModel, RunConfig};
use crate::error::{Error, Result};
use crate::market_paths::{
    read_rates_csv, read_series_csv, slice_dataset, synthesize_rates, synthesize_series, write_rates_csv,
    write_series_csv, PathSlice, SkipCounts, SlicedDataset,
};
use crate::model::{train, AdamState, Checkpoint, DiffusionGenerator, DiffusionModel, LossLog, TrainObserver, TrainingSet};
use crate::objectives::LossBreakdown;
use crate::path_stats::{compare_condition, MetricRow, ValidationReport};
use crate::pq_game::{default_levels, run_game, slice_seed, write_game_outputs, GameRun, GbmGenerator, PathGenerator, ReplayGenerator};
use crate::sampler::{write_paths_csv, PathManifest, SamplerConfig};

pub const DATASET_FILE: &str = "dataset.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const TABLE_FILE: &str = "table_5_1.csv";

#[derive(Debug, Parser)]
#[command(name = "pqlab", version, about = "Diffusion path generation, exotic pricing and the P-Q quoting game")]
pub struct Cli {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the configured output directory.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load or synthesise the series and cut it into conditioned slices.
    Prepare,
    /// Train the denoiser on the prepared training slices.
    Train {
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from a checkpoint that carries optimiser state.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many total steps (annealing still uses `steps`).
        #[arg(long)]
        stop_at: Option<usize>,
    },
    /// Generate paths for one test condition.
    Sample {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Index into the test slices.
        #[arg(long, default_value_t = 0)]
        slice: usize,
        #[arg(long)]
        n_paths: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare generated against realised returns on the test slices.
    Validate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Play the quoting game on the test slices.
    Game {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Restrict to one product (european, lookback, asian, accumulator, snowball).
        #[arg(long)]
        product: Option<String>,
        /// Comma-separated greediness levels.
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<f64>>,
    },
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::file(path, e))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))
}

/// Write the fully resolved config next to the command's outputs.
fn echo_config(cfg: &RunConfig, command: &str) -> Result<()> {
    ensure_dir(&cfg.output_dir)?;
    let p = cfg.output_dir.join(format!("config_{command}.toml"));
    std::fs::write(&p, cfg.to_toml()?).map_err(|e| Error::file(&p, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source: DataSource,
    pub series_days: usize,
    pub first_date: chrono::NaiveDate,
    pub last_date: chrono::NaiveDate,
    pub windows: Vec<u32>,
    pub split_date: chrono::NaiveDate,
    pub n_train: usize,
    pub n_test: usize,
    pub l_max: usize,
    pub skipped: SkipCounts,
}

pub fn cmd_prepare(cfg: &RunConfig) -> Result<DatasetManifest> {
    echo_config(cfg, "prepare")?;
    let d = &cfg.data;
    let (series, rates) = match d.source {
        DataSource::Csv => {
            let missing = || Error::Config("csv source needs data.series_csv and data.rates_csv".into());
            (
                read_series_csv(d.series_csv.as_ref().ok_or_else(missing)?)?,
                read_rates_csv(d.rates_csv.as_ref().ok_or_else(missing)?)?,
            )
        }
        DataSource::Synthetic => {
            let series = synthesize_series(&d.synthetic, d.synthetic_seed)?;
            let levels: Vec<(u32, f64)> = d.windows.iter().map(|w| (*w, d.synthetic_rate)).collect();
            let rates = synthesize_rates(&series, &levels)?;
            write_series_csv(cfg.output_dir.join("series.csv"), &series)?;
            write_rates_csv(cfg.output_dir.join("rates.csv"), &rates)?;
            (series, rates)
        }
    };
    let ds = slice_dataset(&series, &rates, &d.slice_config())?;
    let manifest = DatasetManifest {
        source: d.source,
        series_days: series.len(),
        first_date: series.first_date(),
        last_date: series.last_date(),
        windows: d.windows.clone(),
        split_date: d.split_date,
        n_train: ds.train.len(),
        n_test: ds.test.len(),
        l_max: ds.l_max,
        skipped: ds.skipped.clone(),
    };
    write_json(&cfg.output_dir.join(DATASET_FILE), &ds)?;
    write_json(&cfg.output_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn load_dataset(cfg: &RunConfig) -> Result<SlicedDataset> {
    read_json(&cfg.output_dir.join(DATASET_FILE))
}

/// Padded model length: the dataset length rounded up to the U-Net's unit.
pub fn model_length(l_max: usize, depth: usize) -> usize {
    let unit = 1usize << depth;
    l_max.div_ceil(unit) * unit
}

/// Writes periodic checkpoints and collects the loss log.
struct TrainRecorder<'a> {
    log: LossLog,
    every: usize,
    dir: &'a Path,
}

impl TrainObserver for TrainRecorder<'_> {
    fn on_step(&mut self, step: usize, b: &LossBreakdown, model: &DiffusionModel, opt: &AdamState) -> Result<()> {
        self.log.on_step(step, b, model, opt)?;
        let done = step + 1;
        if self.every > 0 && done % self.every == 0 {
            Checkpoint::from_model(model, Some(opt)).save(&self.dir.join(format!("step_{done}.json")))?;
        }
        Ok(())
    }
}

/// Summary returned by the train command.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps_done: usize,
    pub log: Vec<(usize, LossBreakdown)>,
}

pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>, stop_at: Option<usize>) -> Result<TrainSummary> {
    echo_config(cfg, "train")?;
    let ds = load_dataset(cfg)?;
    let (mut model, mut opt) = match resume {
        Some(p) => {
            let (m, o) = Checkpoint::load(p)?.into_model()?;
            let o = o.ok_or_else(|| Error::Config(format!("{} has no optimizer state to resume from", p.display())))?;
            (m, o)
        }
        None => {
            let mut dc = cfg.model.denoiser;
            dc.input_length = model_length(ds.l_max, dc.depth);
            let m = DiffusionModel::init(dc, cfg.schedule, cfg.model.mode, cfg.model.return_scale, cfg.model.init_seed)?;
            let n = m.denoiser.num_params();
            (m, AdamState::new(n))
        }
    };
    let data = TrainingSet::new(&ds.train, model.denoiser.config().input_length, model.return_scale)?;
    let ckpt_dir = cfg.output_dir.join("checkpoints");
    if cfg.train.checkpoint_every > 0 {
        ensure_dir(&ckpt_dir)?;
    }
    let start = opt.step;
    let mut rec = TrainRecorder {
        log: LossLog::default(),
        every: cfg.train.checkpoint_every,
        dir: &ckpt_dir,
    };
    let until = stop_at.unwrap_or(cfg.train.steps);
    train(&mut model, &mut opt, &data, &cfg.train, &cfg.loss, until, &mut rec)?;
    Checkpoint::from_model(&model, Some(&opt)).save(&cfg.output_dir.join(CHECKPOINT_FILE))?;

    // keep earlier rows when resuming so the log covers the whole run
    let log_path = cfg.output_dir.join(LOSS_LOG_FILE);
    let mut lines: Vec<String> = Vec::new();
    if start > 0 {
        if let Ok(text) = std::fs::read_to_string(&log_path) {
            lines.extend(text.lines().skip(1).filter(|l| {
                l.split(',').next().and_then(|s| s.parse::<usize>().ok()).is_some_and(|s| s < start)
            }).map(str::to_string));
        }
    }
    lines.extend(rec.log.0.iter().map(|(s, b)| b.csv_row(*s)));
    let mut w = create(&log_path)?;
    writeln!(w, "{}", LossBreakdown::CSV_HEADER)?;
    for l in lines {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(TrainSummary {
        steps_done: opt.step,
        log: rec.log.0,
    })
}

fn checkpoint_path(cfg: &RunConfig, explicit: Option<&Path>) -> PathBuf {
    explicit.map_or_else(|| cfg.output_dir.join(CHECKPOINT_FILE), Path::to_path_buf)
}

fn load_model(cfg: &RunConfig, explicit: Option<&Path>) -> Result<DiffusionModel> {
    Ok(Checkpoint::load(&checkpoint_path(cfg, explicit))?.into_model()?.0)
}

fn check_horizon(model: &DiffusionModel, slices: &[PathSlice]) -> Result<()> {
    let l = model.denoiser.config().input_length;
    if let Some(s) = slices.iter().find(|s| s.valid_len() > l) {
        return Err(Error::Data(format!(
            "slice at {} needs {} steps but the checkpoint generates {l}",
            s.start_date,
            s.valid_len()
        )));
    }
    Ok(())
}

/// Resolve the configured path source, loading the checkpoint if needed.
fn with_generator<T>(
    cfg: &RunConfig,
    kind: PathModel,
    checkpoint: Option<&Path>,
    slices: &[PathSlice],
    f: impl FnOnce(&dyn PathGenerator) -> Result<T>,
) -> Result<T> {
    match kind {
        PathModel::Replay => f(&ReplayGenerator),
        PathModel::Gbm => f(&GbmGenerator),
        PathModel::Diffusion => {
            let model = load_model(cfg, checkpoint)?;
            check_horizon(&model, slices)?;
            f(&DiffusionGenerator {
                model: &model,
                sampler: cfg.sampler,
            })
        }
    }
}

pub fn cmd_sample(cfg: &RunConfig, checkpoint: Option<&Path>, index: usize) -> Result<PathBuf> {
    echo_config(cfg, "sample")?;
    let ds = load_dataset(cfg)?;
    let slice = ds
        .test
        .get(index)
        .ok_or_else(|| Error::Data(format!("test slice {index} out of range ({} available)", ds.test.len())))?;
    let model = load_model(cfg, checkpoint)?;
    check_horizon(&model, std::slice::from_ref(slice))?;
    let paths = model.sample_returns(&cfg.sampler, slice)?;
    let out = cfg.output_dir.join(format!("paths_{index}.csv"));
    write_paths_csv(&out, &paths)?;
    write_json(
        &cfg.output_dir.join(format!("paths_{index}.json")),
        &PathManifest {
            condition: slice.condition,
            s0: slice.s0,
            sampler: cfg.sampler,
            n_paths: paths.len(),
        },
    )?;
    Ok(out)
}

pub fn cmd_validate(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<ValidationReport> {
    echo_config(cfg, "validate")?;
    let ds = load_dataset(cfg)?;
    let picked: Vec<&PathSlice> = spread_indices(ds.test.len(), cfg.validate.max_conditions)
        .into_iter()
        .map(|i| &ds.test[i])
        .collect();
    if picked.is_empty() {
        return Err(Error::Data("no test slices to validate on".into()));
    }
    let owned: Vec<PathSlice> = picked.iter().map(|s| (*s).clone()).collect();
    let v = &cfg.validate;
    let rows: Vec<MetricRow> = with_generator(cfg, v.p_model, checkpoint, &owned, |gen| {
        owned
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let generated = gen.generate(s, v.n_paths, slice_seed(v.seed, i))?;
                compare_condition(std::slice::from_ref(&s.log_returns), &generated)
            })
            .collect()
    })?;
    let report = ValidationReport::from_rows(&rows);
    report.write_csv(&cfg.output_dir.join(TABLE_FILE))?;
    let mut w = create(&cfg.output_dir.join("validation_rows.csv"))?;
    writeln!(w, "start_date,window,mean_diff,vol_diff,kurt_diff,ks_stat,ks_pvalue,wasserstein,qq_r2")?;
    let na = |x: Option<f64>| x.map_or("NA".to_string(), |v| v.to_string());
    for (s, r) in owned.iter().zip(&rows) {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            s.start_date,
            s.window_calendar_days,
            r.mean_diff,
            r.vol_diff,
            na(r.kurt_diff),
            r.ks_stat,
            r.ks_pvalue,
            r.wasserstein,
            na(r.qq_r2)
        )?;
    }
    w.flush()?;
    Ok(report)
}

pub fn cmd_game(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    product: Option<&str>,
    levels: Option<&[f64]>,
) -> Result<Vec<GameRun>> {
    echo_config(cfg, "game")?;
    let ds = load_dataset(cfg)?;
    let slices: Vec<PathSlice> = spread_indices(ds.test.len(), cfg.game.max_slices)
        .into_iter()
        .map(|i| ds.test[i].clone())
        .collect();
    if slices.is_empty() {
        return Err(Error::Data("no test slices to play on".into()));
    }
    let contracts: Vec<_> = cfg
        .game
        .products
        .iter()
        .filter(|c| product.map_or(true, |p| c.product() == p))
        .collect();
    if contracts.is_empty() {
        return Err(Error::Config(format!("no configured product matches {product:?}")));
    }
    let override_levels = levels.map(<[f64]>::to_vec).unwrap_or_else(|| cfg.game.levels.clone());
    with_generator(cfg, cfg.game.p_model, checkpoint, &slices, |gen| {
        contracts
            .iter()
            .map(|c| {
                let (default, mode) = default_levels(c);
                let lv = if override_levels.is_empty() { default } else { override_levels.clone() };
                let run = run_game(&slices, c, &lv, mode, &cfg.game.settings, gen)?;
                write_game_outputs(&cfg.output_dir, &run, mode)?;
                Ok(run)
            })
            .collect()
    })
}

/// Parse arguments, run the command, and map failures to exit codes.
pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = cli.output_dir {
        cfg.output_dir = dir;
    }
    match cli.command {
        Command::Prepare => {
            let m = cmd_prepare(&cfg)?;
            eprintln!("prepared {} train / {} test slices (l_max {})", m.n_train, m.n_test, m.l_max);
        }
        Command::Train { steps, resume, stop_at } => {
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            cfg.validate()?;
            let s = cmd_train(&cfg, resume.as_deref(), stop_at)?;
            if let Some((step, b)) = s.log.last() {
                eprintln!("step {step}: total {:.6} core {:.6}", b.total, b.core);
            }
            eprintln!("trained to step {}", s.steps_done);
        }
        Command::Sample {
            checkpoint,
            slice,
            n_paths,
            seed,
        } => {
            cfg.sampler = SamplerConfig {
                n_paths: n_paths.unwrap_or(cfg.sampler.n_paths),
                seed: seed.unwrap_or(cfg.sampler.seed),
                ..cfg.sampler
            };
            let out = cmd_sample(&cfg, checkpoint.as_deref(), slice)?;
            eprintln!("wrote {}", out.display());
        }
        Command::Validate { checkpoint } => {
            let r = cmd_validate(&cfg, checkpoint.as_deref())?;
            for m in &r.metrics {
                eprintln!("{:<12} mean {:?} std {:?}", m.metric, m.mean, m.std);
            }
        }
        Command::Game {
            checkpoint,
            product,
            levels,
        } => {
            for run in cmd_game(&cfg, checkpoint.as_deref(), product.as_deref(), levels.as_deref())? {
                let reports: Vec<_> = run.levels.iter().map(|(r, _)| r.clone()).collect();
                let (_, mode) = default_levels(
                    cfg.game.products.iter().find(|c| c.product() == run.product).expect("product came from config"),
                );
                eprint!("{}", crate::pq_game::format_table(&run.product, mode, &reports));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_length_rounds_to_unet_unit() {
        assert_eq!(model_length(24, 2), 24);
        assert_eq!(model_length(22, 2), 24);
        assert_eq!(model_length(24, 3), 24);
        assert_eq!(model_length(20, 3), 24);
    }

    #[test]
    fn cli_parses() {
        let c = Cli::try_parse_from(["pqlab", "--threads", "2", "game", "--levels", "0,0.1", "--product", "european"]).unwrap();
        assert_eq!(c.threads, Some(2));
        match c.command {
            Command::Game { levels, product, .. } => {
                assert_eq!(levels, Some(vec![0.0, 0.1]));
                assert_eq!(product.as_deref(), Some("european"));
            }
            _ => panic!("wrong command"),
        }
        assert!(Cli::try_parse_from(["pqlab", "frobnicate"]).is_err());
    }
}
