use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationSettings;
use crate::decision::DecisionConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::perturb::{standard_suite, PerturbationSpec, Side};
use crate::rapta::RaptaConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Deterministic hand-crafted features; no model weights needed.
    #[default]
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub dim: usize,
    pub seed: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Synthetic,
            dim: crate::features::DEFAULT_DIM,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustnessConfig {
    pub side: Side,
    /// Attack list; the standard ten when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attacks: Option<Vec<PerturbationSpec>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub k: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { k: 5 }
    }
}

/// Everything a command needs, merged from defaults, the config file and flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 picks the machine default.
    pub workers: usize,
    pub backend: BackendConfig,
    pub fusion: FusionConfig,
    pub decision: DecisionConfig,
    pub calibration: CalibrationSettings,
    pub rapta: RaptaConfig,
    pub robustness: RobustnessConfig,
    pub retrieval: RetrievalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                Error::config(format!("{}: config file not found", path.display()))
            }
            _ => Error::io(path, e),
        })?;
        Self::from_toml(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn attacks(&self) -> Vec<PerturbationSpec> {
        self.robustness
            .attacks
            .clone()
            .unwrap_or_else(|| standard_suite(self.seed))
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        self.decision.check()?;
        self.rapta.validate()?;
        self.calibration.tau_grid.values()?;
        if !(self.calibration.weight_step > 0.0 && self.calibration.weight_step <= 1.0) {
            return Err(Error::config(format!(
                "calibration.weight_step = {} outside (0, 1]",
                self.calibration.weight_step
            )));
        }
        if self.backend.dim != self.fusion.input_dim {
            return Err(Error::config(format!(
                "backend.dim = {} but fusion.input_dim = {}",
                self.backend.dim, self.fusion.input_dim
            )));
        }
        if self.retrieval.k == 0 {
            return Err(Error::config("retrieval.k must be at least 1"));
        }
        if let Some(attacks) = &self.robustness.attacks {
            if attacks.is_empty() {
                return Err(Error::config("robustness.attacks is empty"));
            }
            for a in attacks {
                a.attack.validate()?;
            }
        }
        Ok(())
    }
}
