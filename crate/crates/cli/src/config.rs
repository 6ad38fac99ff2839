//! TOML run configuration. Both sections are optional and every key has a
//! default; unknown keys are errors.
//!
//! ```toml
//! [train]
//! iterations = 5000
//! seed = 0
//! [train.densify]
//! omega_g = 1e-4
//! [eval]
//! tsdf_resolution = 128
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use splatsurf::study::EvalConfig;
use splatsurf::trainer::TrainConfig;

use crate::output::{CliResult, Failure};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train: Option<TrainConfig>,
    pub eval: Option<EvalConfig>,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| Failure::Usage(format!("config {origin}: {e}")))
    }

    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text, &p.display().to_string())
            }
        }
    }

    pub fn eval(&self) -> EvalConfig {
        self.eval.clone().unwrap_or_default()
    }

    /// Rejects a `[train]` section for commands that do not train.
    pub fn eval_only(self, command: &str) -> CliResult<Self> {
        if self.train.is_some() {
            return Err(Failure::Usage(format!("`{command}` takes only an [eval] section; training settings come from the checkpoint")));
        }
        Ok(self)
    }
}
