//! Experiment configuration: one JSON document describing the world, the sweep
//! axes, training and the UPL pipeline. Every field is optional.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::Error;
use crate::instrumentation::{DEFAULT_CONFUSION_RUNS, DEFAULT_PROBE_SIZE};
use crate::losses::LossSpec;
use crate::methods::{MethodKind, MethodSpec, TrainConfig};
use crate::upl::UplConfig;
use crate::world::{NoiseSpec, WorldConfig};

pub const DEFAULT_NOISE_RATES: [f64; 4] = [0.0, 0.125, 0.25, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub methods: Vec<MethodSpec>,
    pub noise: Vec<NoiseSpec>,
    pub losses: Vec<LossSpec>,
    /// `train.loss` is only used where no loss axis applies.
    pub train: TrainConfig,
    pub upl: UplConfig,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub probe_size: usize,
    pub confusion_runs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            methods: vec![
                MethodSpec::new(MethodKind::PromptTuning),
                MethodSpec::new(MethodKind::ClassifierR),
            ],
            noise: DEFAULT_NOISE_RATES.iter().map(|&r| NoiseSpec::random(r)).collect(),
            losses: vec![LossSpec::ce(), LossSpec::gce(0.7)],
            train: TrainConfig::default(),
            upl: UplConfig::default(),
            output_dir: PathBuf::from("out"),
            seeds: vec![0, 1, 2, 3],
            probe_size: DEFAULT_PROBE_SIZE,
            confusion_runs: DEFAULT_CONFUSION_RUNS,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{field}`: {constraint}")]
    InvalidValue { field: String, constraint: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |field: &str, constraint: &str| {
            Err(ConfigError::InvalidValue {
                field: field.into(),
                constraint: constraint.into(),
            })
        };
        if self.seeds.is_empty() {
            return invalid("seeds", "must not be empty");
        }
        if self.methods.is_empty() {
            return invalid("methods", "must not be empty");
        }
        if self.noise.is_empty() {
            return invalid("noise", "must not be empty");
        }
        if self.losses.is_empty() {
            return invalid("losses", "must not be empty");
        }
        if self.probe_size == 0 {
            return invalid("probe_size", "must be >= 1");
        }
        if self.confusion_runs == 0 {
            return invalid("confusion_runs", "must be >= 1");
        }
        let max = self.world.encoder.context_len;
        let checks = std::iter::once(self.world.validate())
            .chain(self.methods.iter().map(|m| m.validate(max)))
            .chain(self.noise.iter().map(NoiseSpec::validate))
            .chain(self.losses.iter().map(LossSpec::validate))
            .chain([self.train.validate(), self.upl.validate()]);
        for check in checks {
            check.map_err(to_config_error)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn to_config_error(err: Error) -> ConfigError {
    match err {
        Error::InvalidValue { field, constraint } => ConfigError::InvalidValue { field, constraint },
        Error::InvalidQ(q) => ConfigError::InvalidValue {
            field: "q".into(),
            constraint: format!("must lie in (0, 1], got {q}"),
        },
        Error::TemperatureNonPositive(t) => ConfigError::InvalidValue {
            field: "world.encoder.temperature".into(),
            constraint: format!("must be positive, got {t}"),
        },
        other => ConfigError::InvalidValue {
            field: "config".into(),
            constraint: other.to_string(),
        },
    }
}

/// Parses and validates a config document, filling defaults for every
/// missing field.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ConfigError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let config: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let message = e.inner().to_string();
        match unknown_field(&message) {
            Some(key) => ConfigError::UnknownKey(join_path(&path, key)),
            None => ConfigError::InvalidValue {
                field: path,
                constraint: message,
            },
        }
    })?;
    config.validate()?;
    Ok(config)
}

pub fn read_config(path: &std::path::Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text)
}

fn unknown_field(message: &str) -> Option<&str> {
    let rest = message.strip_prefix("unknown field `")?;
    rest.split('`').next()
}

fn join_path(parent: &str, key: &str) -> String {
    // serde_path_to_error already ends the path at the offending key for maps.
    if parent == "." || parent.is_empty() {
        key.to_string()
    } else if parent.ends_with(key) {
        parent.to_string()
    } else {
        format!("{parent}.{key}")
    }
}
