//! Service configuration.
//!
//! Values come from a TOML file, then `ETBOT_*` environment variables, then
//! command-line flags, each layer overriding the previous one.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use etbot_core::chat::Manual;
use etbot_core::knowledge::CatalogError;
use etbot_core::session::{Policies, PolicyError, ReminderPolicy, SuggestionPolicy};
use etbot_core::{Catalog, EngineConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wire::DEFAULT_MAX_FRAME_BYTES;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("environment variable {name}={value:?} is not valid")]
    Env { name: &'static str, value: String },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error("manual file {0} is empty")]
    EmptyManual(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub seed: u64,
    pub listen: String,
    pub store_path: PathBuf,
    pub attachment_dir: PathBuf,
    /// Defaults to the bundled catalog.
    pub catalog_path: Option<PathBuf>,
    /// Defaults to the bundled manual.
    pub manual_path: Option<PathBuf>,
    pub max_frame_bytes: usize,
    pub max_upload_bytes: usize,
    pub tick_ms: u64,
    pub reminders: Vec<f64>,
    pub suggestions: SuggestionPolicy,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            listen: "127.0.0.1:8080".into(),
            store_path: PathBuf::from("etbot-audit.jsonl"),
            attachment_dir: PathBuf::from("attachments"),
            catalog_path: None,
            manual_path: None,
            max_frame_bytes: DEFAULT_MAX_FRAME_BYTES,
            max_upload_bytes: 10 * 1024 * 1024,
            tick_ms: 1000,
            reminders: ReminderPolicy::default().fractions().to_vec(),
            suggestions: SuggestionPolicy::default(),
        }
    }
}

fn parse_env<T: std::str::FromStr>(name: &'static str, value: String) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::Env { name, value })
}

impl ServiceConfig {
    pub fn from_toml(source: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(source)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Applies `ETBOT_*` overrides read through `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = lookup("ETBOT_SEED") {
            self.seed = parse_env("ETBOT_SEED", v)?;
        }
        if let Some(v) = lookup("ETBOT_LISTEN") {
            self.listen = v;
        }
        if let Some(v) = lookup("ETBOT_STORE") {
            self.store_path = v.into();
        }
        if let Some(v) = lookup("ETBOT_ATTACHMENTS") {
            self.attachment_dir = v.into();
        }
        if let Some(v) = lookup("ETBOT_CATALOG") {
            self.catalog_path = Some(v.into());
        }
        if let Some(v) = lookup("ETBOT_MANUAL") {
            self.manual_path = Some(v.into());
        }
        if let Some(v) = lookup("ETBOT_MAX_FRAME_BYTES") {
            self.max_frame_bytes = parse_env("ETBOT_MAX_FRAME_BYTES", v)?;
        }
        Ok(())
    }

    pub fn policies(&self) -> Result<Policies, ConfigError> {
        Ok(Policies {
            reminders: ReminderPolicy::new(self.reminders.clone())?,
            suggestions: SuggestionPolicy::new(self.suggestions.min_gap_secs, self.suggestions.initial_delay_secs)?,
        })
    }

    pub fn engine_config(&self) -> Result<EngineConfig, ConfigError> {
        let catalog = match &self.catalog_path {
            Some(path) => Catalog::from_path(path)?,
            None => Catalog::seed(),
        };
        let manual = match &self.manual_path {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                Manual::new(text).map_err(|_| ConfigError::EmptyManual(path.display().to_string()))?
            }
            None => Manual::default(),
        };
        Ok(EngineConfig {
            catalog: Arc::new(catalog),
            manual,
            policies: self.policies()?,
            seed: self.seed,
        })
    }
}
