use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use voxsnap_core::dataset::Category;
use voxsnap_core::projection::SnapOverrides;

pub const ENV_PREFIX: &str = "VOXSNAP_";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("invalid {name}={value:?}")]
    Env { name: String, value: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    /// Directory holding `models.json`; no models are loaded when unset.
    pub model_dir: Option<PathBuf>,
    /// Requests doing network work at once; the rest wait in FIFO order.
    pub max_concurrent: usize,
    pub body_limit: usize,
    pub timeout_secs: f64,
    /// Served at `/` when set, e.g. the built editor.
    pub static_dir: Option<PathBuf>,
    /// Per-category changes to the bundle's own snap defaults.
    pub snap: BTreeMap<Category, SnapOverrides>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            model_dir: None,
            max_concurrent: 4,
            body_limit: 8 * 1024 * 1024,
            timeout_secs: 30.0,
            static_dir: None,
            snap: BTreeMap::new(),
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.into(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Applies `VOXSNAP_*` variables found through `lookup` over the current values.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        let get = |key: &str| {
            let name = format!("{ENV_PREFIX}{key}");
            lookup(&name).map(|v| (name, v))
        };
        fn parse<T: std::str::FromStr>((name, value): (String, String)) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::Env { name, value })
        }
        if let Some((_, v)) = get("BIND") {
            self.bind = v;
        }
        if let Some((_, v)) = get("MODEL_DIR") {
            self.model_dir = Some(v.into());
        }
        if let Some((_, v)) = get("STATIC_DIR") {
            self.static_dir = Some(v.into());
        }
        if let Some(kv) = get("MAX_CONCURRENT") {
            self.max_concurrent = parse(kv)?;
        }
        if let Some(kv) = get("BODY_LIMIT") {
            self.body_limit = parse(kv)?;
        }
        if let Some(kv) = get("TIMEOUT_SECS") {
            self.timeout_secs = parse(kv)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_concurrent == 0 {
            return Err(ConfigError::Invalid("max_concurrent must be >= 1".into()));
        }
        if self.body_limit == 0 {
            return Err(ConfigError::Invalid("body_limit must be >= 1".into()));
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(ConfigError::Invalid("timeout_secs must be positive".into()));
        }
        Ok(())
    }
}
