//! Service configuration file (TOML).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use kgnlq_core::eval::ScoringConfig;
use kgnlq_core::qgen::TemplateTable;
use kgnlq_core::sqlgen::{
    BackendRegistry, FaultKind, FaultSpec, FaultyBackend, HttpBackendConfig, HttpChatBackend, OracleBackend,
    PipelineConfig,
};
use serde::{Deserialize, Serialize};

/// One entry of the `[backends]` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendDef {
    /// Deterministic template inversion; needs no model.
    Oracle,
    /// Oracle output with an injected fault, for ablations.
    Faulty {
        fault: FaultKind,
        #[serde(default)]
        only_hops: Option<u8>,
        #[serde(default = "yes")]
        repairable: bool,
    },
    /// OpenAI-style chat-completions endpoint.
    Http(HttpBackendConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    pub db: PathBuf,
    /// Entity index cache file; rebuilt when stale or missing.
    #[serde(default)]
    pub index_cache: Option<PathBuf>,
    /// Generated datasets and evaluation reports live here.
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default)]
    pub templates: Option<PathBuf>,
    #[serde(default)]
    pub prompts_dir: Option<PathBuf>,
    #[serde(default)]
    pub defaults: PipelineConfig,
    #[serde(default)]
    pub scoring: ScoringConfig,
    /// Backends by name. An empty table means a single `oracle` backend.
    #[serde(default)]
    pub backends: BTreeMap<String, BackendDef>,
    /// Used when a request names no backend; defaults to the first name.
    #[serde(default)]
    pub default_backend: Option<String>,
    #[serde(default)]
    pub cors_origins: Vec<String>,
}

fn yes() -> bool {
    true
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("kgnlq-data")
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: String,
        source: toml::de::Error,
    },
}

impl AppConfig {
    /// A configuration with defaults for everything but the database.
    pub fn new(db: impl Into<PathBuf>) -> Self {
        AppConfig {
            db: db.into(),
            index_cache: None,
            data_dir: default_data_dir(),
            templates: None,
            prompts_dir: None,
            defaults: PipelineConfig::default(),
            scoring: ScoringConfig::default(),
            backends: BTreeMap::new(),
            default_backend: None,
            cors_origins: Vec::new(),
        }
    }

    /// Reads `path`; relative paths inside are taken relative to the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut config: AppConfig = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut config.db);
        rebase(&mut config.data_dir);
        for p in [&mut config.index_cache, &mut config.templates, &mut config.prompts_dir]
            .into_iter()
            .flatten()
        {
            rebase(p);
        }
        Ok(config)
    }

    pub fn build_backends(&self, table: &TemplateTable) -> BackendRegistry {
        let mut registry = BackendRegistry::new();
        if self.backends.is_empty() {
            registry.insert("oracle", Arc::new(OracleBackend::new(table)));
        }
        for (name, def) in &self.backends {
            match def {
                BackendDef::Oracle => registry.insert(name, Arc::new(OracleBackend::new(table))),
                BackendDef::Faulty {
                    fault,
                    only_hops,
                    repairable,
                } => {
                    let spec = FaultSpec {
                        kind: *fault,
                        only_hops: *only_hops,
                        repairable: *repairable,
                    };
                    registry.insert(name, Arc::new(FaultyBackend::new(table, spec)))
                }
                BackendDef::Http(config) => {
                    registry.insert(name, Arc::new(HttpChatBackend::new(name, config.clone())))
                }
            }
        }
        registry
    }
}
