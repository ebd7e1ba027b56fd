//! Run configuration: one TOML file covering model, training, evaluation
//! and the auxiliary protocols. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use dam::eval::{CostConfig, EvalProtocol, ImputationConfig};
use dam::model::ModelConfig;
use dam::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Base values the config file is layered over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Full-size model and pre-training schedule.
    #[default]
    Default,
    /// Full-size model, short low-rate schedule for adapting a checkpoint.
    FineTune,
    /// Small model and short schedule for smoke runs.
    Toy,
}

impl Preset {
    fn model(self) -> ModelConfig {
        match self {
            Preset::Toy => ModelConfig::toy(),
            _ => ModelConfig::default(),
        }
    }

    fn train(self) -> TrainConfig {
        match self {
            Preset::Default => TrainConfig::default(),
            Preset::FineTune => TrainConfig::fine_tune(),
            Preset::Toy => TrainConfig::toy(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneGrid {
    pub contexts: Vec<usize>,
    pub sigmas: Vec<f64>,
}

impl Default for TuneGrid {
    fn default() -> Self {
        Self {
            contexts: vec![180, 360, 720, 1440],
            sigmas: vec![180.0, 360.0, 720.0, 1440.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    /// Root seed: model init, training streams, imputation masks, sweeps.
    pub seed: u64,
    /// Dataset manifests; relative paths resolve against the config file.
    pub datasets: Vec<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Channel used by `sweep`.
    pub channel: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalProtocol,
    pub impute: ImputationConfig,
    pub tune: TuneGrid,
    pub sweep: CostConfig,
}

impl RunConfig {
    pub fn from_preset(preset: Preset) -> Self {
        Self {
            preset,
            seed: 42,
            datasets: Vec::new(),
            checkpoint: None,
            out: None,
            channel: 0,
            model: preset.model(),
            train: preset.train(),
            eval: EvalProtocol::default(),
            impute: ImputationConfig::default(),
            tune: TuneGrid::default(),
            sweep: CostConfig::default(),
        }
    }

    /// Reads a config file, layering its tables over the chosen preset.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in cfg.datasets.iter_mut().chain(cfg.checkpoint.iter_mut()).chain(cfg.out.iter_mut()) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let overlay: toml::Table = toml::from_str(text).map_err(|e| e.to_string())?;
        let preset = match overlay.get("preset") {
            Some(v) => Preset::deserialize(v.clone()).map_err(|e| e.to_string())?,
            None => Preset::Default,
        };
        let mut merged = toml::Table::try_from(Self::from_preset(preset)).map_err(|e| e.to_string())?;
        merge(&mut merged, overlay);
        let cfg: Self = toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.model.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        self.eval.validate().map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).unwrap_or_default()
    }
}

/// Recursive table merge; overlay keys replace base keys. Keys absent from
/// the base are kept so deserialisation can reject them.
fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
