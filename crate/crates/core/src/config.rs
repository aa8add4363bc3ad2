//! TOML configuration file.
//!
//! ```toml
//! [source]
//! kind = "file"
//! path = "ledger.jsonl"
//! follow = true
//!
//! [sync]
//! poll_interval_ms = 2000
//!
//! [api]
//! listen_address = "127.0.0.1:8080"
//! ```

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;

use crate::ingest::{IngestOptions, DEFAULT_QUEUE_CAPACITY};
use crate::query::MAX_PAGE_LIMIT;
use crate::source::SourceConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyncSection {
    pub poll_interval_ms: u64,
    pub queue_capacity: usize,
}

impl Default for SyncSection {
    fn default() -> Self {
        SyncSection {
            poll_interval_ms: 2000,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApiSection {
    pub listen_address: String,
    pub cors_allowed_origins: Vec<String>,
    pub page_limit_max: u64,
    pub max_concurrent_requests: usize,
}

impl Default for ApiSection {
    fn default() -> Self {
        ApiSection {
            listen_address: "127.0.0.1:8080".into(),
            cors_allowed_origins: Vec::new(),
            page_limit_max: MAX_PAGE_LIMIT,
            max_concurrent_requests: 64,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerConfig {
    /// Store directory.
    pub db: Option<PathBuf>,
    pub source: Option<SourceConfig>,
    pub sync: SyncSection,
    pub api: ApiSection,
}

impl RefinerConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RefinerConfig = toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.sync.poll_interval_ms == 0 {
            return Err(ConfigError::Invalid("sync.poll_interval_ms must be positive".into()));
        }
        if self.sync.queue_capacity == 0 {
            return Err(ConfigError::Invalid("sync.queue_capacity must be positive".into()));
        }
        if self.api.page_limit_max == 0 {
            return Err(ConfigError::Invalid("api.page_limit_max must be at least 1".into()));
        }
        if self.api.max_concurrent_requests == 0 {
            return Err(ConfigError::Invalid("api.max_concurrent_requests must be positive".into()));
        }
        Ok(())
    }

    pub fn ingest_options(&self) -> IngestOptions {
        IngestOptions {
            queue_capacity: self.sync.queue_capacity,
            poll_interval: Duration::from_millis(self.sync.poll_interval_ms),
        }
    }
}
