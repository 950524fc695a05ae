use std::path::{Path, PathBuf};

use pipetbench_core::correction::NoisyOracleModel;
use pipetbench_core::kinematics::ArmParams;
use pipetbench_core::sim::{
    BounceParams, CorrectionSection, PlannerSection, PlatesSection, RackSection, Scenario, SceneSection,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

/// Where and what to write.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Used when `--out-dir` is not given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Per-tip 8x12 CSV grids for simulation batches.
    #[serde(default = "yes")]
    pub grids: bool,
    /// Every run's per-tip records in the metrics JSON, not just aggregates.
    #[serde(default)]
    pub per_run: bool,
}

fn yes() -> bool {
    true
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: None,
            grids: true,
            per_run: false,
        }
    }
}

/// The whole config file. Mirrors [`Scenario`] plus an output section; every
/// section may be omitted and takes its defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub arm: ArmParams,
    #[serde(default)]
    pub scene: SceneSection,
    #[serde(default)]
    pub rack: RackSection,
    #[serde(default)]
    pub plates: PlatesSection,
    #[serde(default)]
    pub classifier: NoisyOracleModel,
    #[serde(default)]
    pub correction: CorrectionSection,
    #[serde(default)]
    pub planner: PlannerSection,
    #[serde(default)]
    pub bounce: BounceParams,
    #[serde(default)]
    pub output: OutputSection,
}

impl ScenarioConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.scenario().validate().map_err(|e| ConfigError::Invalid {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn scenario(&self) -> Scenario {
        let mut s = Scenario {
            arm: self.arm.clone(),
            scene: self.scene.clone(),
            rack: self.rack.clone(),
            plates: self.plates,
            classifier: self.classifier,
            correction: self.correction,
            planner: self.planner,
            bounce: self.bounce,
            ..Scenario::default()
        };
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        s
    }
}
