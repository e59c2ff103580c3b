//! Run configuration read from a single TOML file.
//!
//! Every section has fixed defaults, so an empty file describes a complete
//! synthetic run. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::diffusion_schedule::{PredictionMode, ScheduleConfig};
use crate::error::{Error, Result};
use crate::market_paths::{SliceConfig, SyntheticConfig};
use crate::model::{TrainConfig, DEFAULT_RETURN_SCALE};
use crate::objectives::LossWeights;
use crate::payoffs::ContractSpec;
use crate::pq_game::GameConfig;
use crate::sampler::SamplerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Csv,
    #[default]
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// `date,close,is_trading_day`; required for the csv source.
    pub series_csv: Option<PathBuf>,
    /// `date,tenor_days,rate`; required for the csv source.
    pub rates_csv: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
    pub synthetic_seed: u64,
    /// Constant risk-free rate for every window tenor of a synthetic run.
    pub synthetic_rate: f64,
    pub windows: Vec<u32>,
    pub split_date: NaiveDate,
    pub length_multiple: usize,
    pub history_returns: usize,
    pub min_history_returns: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let split = NaiveDate::from_ymd_opt(2022, 1, 1).expect("valid date");
        let s = SliceConfig::new(vec![30], split);
        Self {
            source: DataSource::Synthetic,
            series_csv: None,
            rates_csv: None,
            synthetic: SyntheticConfig::default(),
            synthetic_seed: 1,
            synthetic_rate: 0.02,
            windows: s.windows,
            split_date: s.split_date,
            length_multiple: s.length_multiple,
            history_returns: s.history_returns,
            min_history_returns: s.min_history_returns,
        }
    }
}

impl DataConfig {
    pub fn slice_config(&self) -> SliceConfig {
        SliceConfig {
            windows: self.windows.clone(),
            split_date: self.split_date,
            length_multiple: self.length_multiple,
            history_returns: self.history_returns,
            min_history_returns: self.min_history_returns,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: PredictionMode,
    pub return_scale: f64,
    pub init_seed: u64,
    /// Padded sequence length is taken from the prepared dataset.
    pub denoiser: DenoiserConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: PredictionMode::V,
            return_scale: DEFAULT_RETURN_SCALE,
            init_seed: 11,
            denoiser: DenoiserConfig::default(),
        }
    }
}

/// Where the trader's (and the validator's) paths come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathModel {
    #[default]
    Diffusion,
    /// Risk-neutral GBM at the condition's volatility.
    Gbm,
    /// The realised path itself.
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateConfig {
    pub p_model: PathModel,
    pub n_paths: usize,
    pub seed: u64,
    /// Evenly spaced subset of test conditions (0 = all).
    pub max_conditions: usize,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        Self {
            p_model: PathModel::Diffusion,
            n_paths: 100,
            seed: 21,
            max_conditions: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GameSection {
    pub p_model: PathModel,
    #[serde(flatten)]
    pub settings: GameConfig,
    /// Evenly spaced subset of test slices (0 = all).
    pub max_slices: usize,
    /// Overrides the product's default greediness grid when non-empty.
    pub levels: Vec<f64>,
    pub products: Vec<ContractSpec>,
}

impl Default for GameSection {
    fn default() -> Self {
        Self {
            p_model: PathModel::Diffusion,
            settings: GameConfig::default(),
            max_slices: 0,
            levels: Vec::new(),
            products: vec![
                ContractSpec::european(),
                ContractSpec::Lookback { strike_ratio: 1.0 },
                ContractSpec::Asian { strike_ratio: 1.0 },
                ContractSpec::Accumulator {
                    discount: 0.9,
                    ko_ratio: 1.2,
                    daily_units: 1.0,
                },
                ContractSpec::snowball(1.05, 0.9, 0.15),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub validate: ValidateConfig,
    pub game: GameSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("pqlab_out"),
            data: DataConfig::default(),
            schedule: ScheduleConfig::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            validate: ValidateConfig::default(),
            game: GameSection::default(),
        }
    }
}

impl RunConfig {
    /// Parse and validate. Relative data paths resolve against the config
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.series_csv, &mut cfg.data.rates_csv].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.source == DataSource::Csv {
            for (name, p) in [("series_csv", &self.data.series_csv), ("rates_csv", &self.data.rates_csv)] {
                match p {
                    None => return Err(Error::Config(format!("data.{name} is required for the csv source"))),
                    Some(p) if !p.exists() => {
                        return Err(Error::file(p, std::io::Error::from(std::io::ErrorKind::NotFound)))
                    }
                    _ => {}
                }
            }
        }
        if !(self.model.return_scale > 0.0) {
            return Err(Error::Config("model.return_scale must be positive".into()));
        }
        self.schedule.build()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.sampler.validate(self.schedule.steps)?;
        self.game.settings.validate()?;
        for c in &self.game.products {
            c.validate()?;
        }
        if self.game.levels.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("greediness levels must be >= 0".into()));
        }
        if self.validate.n_paths == 0 {
            return Err(Error::Config("validate.n_paths must be positive".into()));
        }
        Ok(())
    }
}

/// Evenly spaced indices selecting at most `max` of `n` items (0 = all).
pub fn spread_indices(n: usize, max: usize) -> Vec<usize> {
    if max == 0 || max >= n {
        return (0..n).collect();
    }
    (0..max).map(|i| i * n / max).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_a_complete_config() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn sections_parse() {
        let c = RunConfig::from_toml(
            r#"
            [data]
            windows = [30, 60]
            split_date = "2020-06-30"
            [model]
            mode = "eps"
            [game]
            threshold = 0.2
            levels = [0.0, 0.5]
            products = [{ kind = "european" }, { kind = "snowball", ko_ratio = 1.1, ki_ratio = 0.8, coupon_pa = 0.12 }]
            "#,
        )
        .unwrap();
        assert_eq!(c.data.windows, vec![30, 60]);
        assert_eq!(c.model.mode, PredictionMode::Eps);
        assert_eq!(c.game.settings.threshold, 0.2);
        assert_eq!(c.game.products.len(), 2);
    }

    #[test]
    fn bad_configs_are_config_errors() {
        assert_eq!(RunConfig::from_toml("bogus = 1").unwrap_err().exit_code(), 2);
        assert!(RunConfig::from_toml("[game]\nbogus = 1").is_err());
        assert_eq!(RunConfig::from_toml("[loss]\nlambda_jump = -1.0").unwrap().validate().unwrap_err().exit_code(), 2);
        let csv = RunConfig::from_toml("[data]\nsource = \"csv\"").unwrap();
        assert_eq!(csv.validate().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn missing_data_file_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.toml");
        std::fs::write(&cfg, "[data]\nsource = \"csv\"\nseries_csv = \"px.csv\"\nrates_csv = \"r.csv\"\n").unwrap();
        let err = RunConfig::load(&cfg).unwrap_err();
        assert!(err.to_string().contains("px.csv"), "{err}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn spread_selection() {
        assert_eq!(spread_indices(5, 0), vec![0, 1, 2, 3, 4]);
        assert_eq!(spread_indices(10, 3), vec![0, 3, 6]);
        assert_eq!(spread_indices(2, 5), vec![0, 1]);
    }
}
