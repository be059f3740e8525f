//! TOML service configuration.
//!
//! ```toml
//! artifacts_dir = "artifacts"
//! registry = "registry.json"          # optional; defaults to the sample registry
//! stub_fixtures = "stubs.json"        # optional
//!
//! [backend]
//! kind = "scripted"                   # or "http"
//! script = "script.json"
//!
//! [controller]
//! max_retries = 2
//! demos = { count = 3 }
//!
//! [selection]
//! k = 5
//!
//! [executor]
//! concurrency = 8
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::ServiceError;
use crate::controller::{ControllerConfig, HttpBackend, HttpBackendConfig, LlmBackend, ScriptedBackend};
use crate::executor::ExecutorConfig;
use crate::registry::SelectionConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    Scripted {
        #[serde(default)]
        script: Option<PathBuf>,
    },
    Http(HttpBackendConfig),
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Scripted { script: None }
    }
}

/// Reply of the scripted backend when no script is configured.
pub const EMPTY_SCRIPT_REPLY: &str = "[]";

impl BackendConfig {
    /// Builds the backend. Relative paths are taken from `base`.
    pub fn build(&self, base: &Path) -> Result<Arc<dyn LlmBackend>, ServiceError> {
        match self {
            BackendConfig::Scripted { script: None } => Ok(Arc::new(ScriptedBackend::new(EMPTY_SCRIPT_REPLY))),
            BackendConfig::Scripted { script: Some(p) } => ScriptedBackend::load(&base.join(p))
                .map(|b| Arc::new(b) as Arc<dyn LlmBackend>)
                .map_err(|e| ServiceError::Config(e.to_string())),
            BackendConfig::Http(cfg) => HttpBackend::new(cfg.clone())
                .map(|b| Arc::new(b) as Arc<dyn LlmBackend>)
                .map_err(|e| ServiceError::Config(e.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub artifacts_dir: PathBuf,
    pub registry: Option<PathBuf>,
    pub stub_fixtures: Option<PathBuf>,
    pub prompts_dir: Option<PathBuf>,
    pub backend: BackendConfig,
    pub controller: ControllerConfig,
    pub selection: SelectionConfig,
    pub executor: ExecutorConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            artifacts_dir: PathBuf::from("artifacts"),
            registry: None,
            stub_fixtures: None,
            prompts_dir: None,
            backend: BackendConfig::default(),
            controller: ControllerConfig::default(),
            selection: SelectionConfig::default(),
            executor: ExecutorConfig::default(),
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, ServiceError> {
        toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}
