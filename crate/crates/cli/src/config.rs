//! TOML configuration shared by the subcommands.
//!
//! ```toml
//! [model]      # architecture, any ModelConfig field
//! [train]      # any TrainConfig field
//! [columns]    # raw-log header names, e.g. press = "PRESS_TIME"
//! [service]
//! model = "model.ckpt"
//! store = "templates.log"
//! bind = "127.0.0.1:8080"
//! threshold = 0.12          # optional; default is the checkpoint's
//! cors_origins = ["http://localhost:5173"]
//! ```

use std::path::{Path, PathBuf};

use keyformer_core::data::ColumnSchema;
use keyformer_core::model::ModelConfig;
use keyformer_core::train::TrainConfig;
use keyformer_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const ENV_MODEL: &str = "KEYFORMER_MODEL";
pub const ENV_STORE: &str = "KEYFORMER_STORE";
pub const ENV_BIND: &str = "KEYFORMER_BIND";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
    pub columns: ColumnSchema,
    pub service: ServiceConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub model: Option<PathBuf>,
    pub store: PathBuf,
    pub bind: String,
    /// Fixed global threshold; `None` uses the one stored in the checkpoint.
    pub threshold: Option<f64>,
    pub cors_origins: Vec<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            model: None,
            store: PathBuf::from("templates.log"),
            bind: "127.0.0.1:8080".into(),
            threshold: None,
            cors_origins: Vec::new(),
        }
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

impl ServiceConfig {
    /// Applies `KEYFORMER_*` variables read through `var`.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) {
        if let Some(v) = var(ENV_MODEL) {
            self.model = Some(PathBuf::from(v));
        }
        if let Some(v) = var(ENV_STORE) {
            self.store = PathBuf::from(v);
        }
        if let Some(v) = var(ENV_BIND) {
            self.bind = v;
        }
    }
}
