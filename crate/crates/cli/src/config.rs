//! The run configuration: one TOML file with a section per component plus
//! `--set section.key=value` overrides.

use std::path::{Path, PathBuf};

use causalnet::granger::GrangerConfig;
use causalnet::ingest::{SplitFractions, DEFAULT_CANCELLATION_DELAY, DEFAULT_OUTLIER_QUANTILE};
use causalnet::model::{ModelConfig, Variant};
use causalnet::synth::SynthConfig;
use causalnet::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub granger: GrangerConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub run: RunOptions,
    pub gradcheck: GradcheckConfig,
}

/// Empty strings mean "not set".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Flight records read by `ingest`.
    pub flights: String,
    /// Optional `airport_id,lat,lon` CSV for the geographic graph.
    pub coords: String,
    /// Holds `delays.csv`, `mask.csv` and, for synthetic data, `ground_truth.json`.
    pub data_dir: String,
    /// Run directory for graphs, metrics, history, checkpoint and summary.
    pub out_dir: String,
    /// Defaults to `<out_dir>/checkpoint.bin`.
    pub checkpoint: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            flights: "flights.csv".into(),
            coords: String::new(),
            data_dir: "data".into(),
            out_dir: "run".into(),
            checkpoint: String::new(),
        }
    }
}

impl PathsConfig {
    pub fn data_dir(&self) -> PathBuf {
        PathBuf::from(&self.data_dir)
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out_dir)
    }

    pub fn checkpoint(&self) -> PathBuf {
        if self.checkpoint.is_empty() {
            self.out_dir().join("checkpoint.bin")
        } else {
            PathBuf::from(&self.checkpoint)
        }
    }

    pub fn coords(&self) -> Option<PathBuf> {
        (!self.coords.is_empty()).then(|| PathBuf::from(&self.coords))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Minutes charged per cancelled flight.
    pub cancellation_delay: f64,
    pub outlier_quantile: f64,
    /// Airport order of the matrix; empty takes the sorted ids in the records.
    pub airports: Vec<String>,
    /// RFC 3339 bounds of the binned span; empty derives them from the records.
    pub start: String,
    pub end: String,
    pub split: SplitFractions,
    /// Gaussian kernel width; 0 uses the std of pairwise distances.
    pub geo_sigma_km: f64,
    pub geo_cutoff_km: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            cancellation_delay: DEFAULT_CANCELLATION_DELAY,
            outlier_quantile: DEFAULT_OUTLIER_QUANTILE,
            airports: Vec::new(),
            start: String::new(),
            end: String::new(),
            split: SplitFractions::default(),
            geo_sigma_km: 0.0,
            geo_cutoff_km: f64::INFINITY,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunOptions {
    /// Seeds `train.seed .. train.seed + repetitions` for `ablate`.
    pub repetitions: usize,
    pub variants: Vec<Variant>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            repetitions: 1,
            variants: Variant::ALL.to_vec(),
        }
    }
}

/// The toy model used by `gradcheck`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub n_airports: usize,
    pub encoder_steps: usize,
    pub horizon: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub variant: Variant,
    pub epsilon: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            n_airports: 3,
            encoder_steps: 2,
            horizon: 2,
            hidden_dim: 8,
            embed_dim: 4,
            variant: Variant::Full,
            epsilon: 1e-6,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Reads `path`, applies overrides in order, then validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::from_io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: String| CliError::Config(e);
        self.synth.validate().map_err(|e| cfg(e.to_string()))?;
        self.granger.validate().map_err(|e| cfg(e.to_string()))?;
        self.model.validate().map_err(|e| cfg(e.to_string()))?;
        self.train.validate().map_err(|e| cfg(e.to_string()))?;
        let d = &self.data;
        if !(d.cancellation_delay >= 0.0 && d.cancellation_delay.is_finite()) {
            return Err(cfg("data.cancellation_delay must be finite and >= 0".into()));
        }
        if !(d.outlier_quantile > 0.0 && d.outlier_quantile < 1.0) {
            return Err(cfg("data.outlier_quantile must lie strictly between 0 and 1".into()));
        }
        if !(d.geo_sigma_km >= 0.0 && d.geo_sigma_km.is_finite()) || !(d.geo_cutoff_km > 0.0) {
            return Err(cfg("data.geo_sigma_km must be finite and >= 0, data.geo_cutoff_km > 0".into()));
        }
        if self.run.repetitions == 0 {
            return Err(cfg("run.repetitions must be at least 1".into()));
        }
        if self.run.variants.is_empty() {
            return Err(cfg("run.variants must name at least one variant".into()));
        }
        let g = &self.gradcheck;
        if g.n_airports < 1 || g.horizon < 1 || g.hidden_dim < 1 || g.embed_dim < 1 {
            return Err(cfg("gradcheck dimensions must be at least 1".into()));
        }
        if !(g.epsilon > 0.0 && g.tolerance > 0.0) {
            return Err(cfg("gradcheck.epsilon and gradcheck.tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// `section.key=value`; the value is parsed as a TOML value and falls back
/// to a plain string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key {key:?} is malformed")));
    }
    let value = parse_value(raw.trim());
    let (last, parents) = path.split_last().expect("non-empty");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {key:?}: {p} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
