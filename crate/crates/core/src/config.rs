//! Pipeline configuration, read from a TOML document with optional
//! `[fit]`, `[toy]`, `[steering]` and `[service]` tables. Missing keys take
//! their defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::FitConfig;
use crate::service::ServiceConfig;
use crate::steering::{SteeringDefaults, ToyParams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Parse { path: String, source: toml::de::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub fit: FitConfig,
    pub toy: ToyParams,
    pub steering: SteeringDefaults,
    pub service: ServiceConfig,
}

impl Config {
    pub fn parse(path_label: &str, text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: path_label.to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        Config::parse(&path.display().to_string(), &std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
