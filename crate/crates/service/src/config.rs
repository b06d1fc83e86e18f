use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use teachloop::teaching::TeachingConfig;

use crate::StartError;

pub const CONFIG_SCHEMA: &str = "service/v1";

/// Service settings. Read from a TOML file, then overridden by
/// `TEACHLOOP_*` environment variables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub schema_version: String,
    pub host: String,
    pub port: u16,
    /// Directory of domain pools, one subdirectory per domain.
    pub pool: PathBuf,
    /// Where session logs live; replayed on startup.
    pub log_dir: PathBuf,
    /// Client bundle, served when the directory exists.
    pub static_dir: Option<PathBuf>,
    /// Session `k` created without an explicit seed gets `seed + k`.
    pub seed: u64,
    /// Template for every session; mode and seed are set per session.
    pub teaching: TeachingConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA.into(),
            host: "127.0.0.1".into(),
            port: 8080,
            pool: "data/domains".into(),
            log_dir: "sessions".into(),
            static_dir: Some("ui/dist".into()),
            seed: 0,
            teaching: TeachingConfig::default(),
        }
    }
}

const ENV: [&str; 6] = [
    "TEACHLOOP_HOST",
    "TEACHLOOP_PORT",
    "TEACHLOOP_POOL",
    "TEACHLOOP_LOG_DIR",
    "TEACHLOOP_STATIC_DIR",
    "TEACHLOOP_SEED",
];

impl ServiceConfig {
    pub fn from_file(path: &Path) -> Result<Self, StartError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| StartError::Config(vec![format!("{}: {e}", path.display())]))?;
        toml::from_str(&text).map_err(|e| StartError::Config(vec![format!("{}: {e}", path.display())]))
    }

    /// Applies overrides from `vars` (normally the process environment).
    pub fn with_env(mut self, vars: impl Fn(&str) -> Option<String>) -> Result<Self, StartError> {
        let mut errs = Vec::new();
        for key in ENV {
            let Some(v) = vars(key) else { continue };
            match key {
                "TEACHLOOP_HOST" => self.host = v,
                "TEACHLOOP_PORT" => match v.parse() {
                    Ok(p) => self.port = p,
                    Err(_) => errs.push(format!("{key}={v:?} is not a port")),
                },
                "TEACHLOOP_POOL" => self.pool = v.into(),
                "TEACHLOOP_LOG_DIR" => self.log_dir = v.into(),
                "TEACHLOOP_STATIC_DIR" => self.static_dir = (!v.is_empty()).then(|| v.into()),
                "TEACHLOOP_SEED" => match v.parse() {
                    Ok(s) => self.seed = s,
                    Err(_) => errs.push(format!("{key}={v:?} is not an unsigned integer")),
                },
                _ => unreachable!(),
            }
        }
        if errs.is_empty() {
            Ok(self)
        } else {
            Err(StartError::Config(errs))
        }
    }

    pub fn from_process_env(self) -> Result<Self, StartError> {
        self.with_env(|k| std::env::var(k).ok())
    }

    pub fn validate(&self) -> Result<(), StartError> {
        let mut errs = Vec::new();
        if self.schema_version != CONFIG_SCHEMA {
            errs.push(format!("unsupported schema_version {:?}, expected {CONFIG_SCHEMA}", self.schema_version));
        }
        if !self.pool.is_dir() {
            errs.push(format!("pool directory {} does not exist", self.pool.display()));
        }
        if let Err(teachloop::Error::InvalidConfig(mut e)) = self.teaching.validate() {
            errs.append(&mut e);
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(StartError::Config(errs))
        }
    }
}
