//! Pipeline configuration: one JSON document with a section per stage.
//!
//! Defaults are the reference hyperparameters. The `desk` profile overlays
//! smaller networks and budgets so the whole pipeline runs on a laptop CPU.
//! A user file is overlaid last, key by key.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::behavior::BehaviorConfig;
use crate::dynmodel::DynamicsConfig;
use crate::env::CrawlerParams;
use crate::graph::GraphConfig;
use crate::mpc::MpcConfig;
use crate::orchestrator::RunConfig;

const DESK_PROFILE: &str = include_str!("../profiles/desk.json");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("unknown profile `{0}` (expected `paper` or `desk`)")]
    UnknownProfile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Profile {
    Paper,
    #[default]
    Desk,
}

impl FromStr for Profile {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(ConfigError::UnknownProfile(other.to_string())),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Body {
    #[default]
    Crawler,
    Point,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub body: Body,
    /// Bundled maze name, or a path to a maze file.
    pub maze: String,
    pub crawler: CrawlerParams,
    /// Largest per-step displacement of the point body.
    pub point_max_step: f64,
    /// Half-width of the open square used for behavior training resets.
    pub training_extent: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            body: Body::Crawler,
            maze: "cross".into(),
            crawler: CrawlerParams::default(),
            point_max_step: 0.25,
            training_extent: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub env: EnvConfig,
    pub behavior: BehaviorConfig,
    pub dynamics: DynamicsConfig,
    pub mpc: MpcConfig,
    pub graph: GraphConfig,
    pub run: RunConfig,
}

/// Recursively overlays `patch` onto `base`; objects merge key by key, any
/// other value replaces.
pub fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

impl PipelineConfig {
    pub fn profile(profile: Profile) -> Self {
        Self::layered(profile, None).expect("bundled profiles are valid")
    }

    /// Profile defaults with an optional JSON overlay.
    pub fn layered(profile: Profile, overlay: Option<&Value>) -> Result<Self, ConfigError> {
        let mut doc = serde_json::to_value(PipelineConfig::default()).expect("config serializes");
        if profile == Profile::Desk {
            let desk: Value = serde_json::from_str(DESK_PROFILE).expect("desk profile is JSON");
            merge(&mut doc, &desk);
        }
        if let Some(o) = overlay {
            if !o.is_object() {
                return Err(ConfigError::Invalid("config root must be a JSON object".into()));
            }
            merge(&mut doc, o);
        }
        let cfg: PipelineConfig = serde_json::from_value(doc).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(profile: Profile, text: &str) -> Result<Self, ConfigError> {
        let v: Value = serde_json::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Self::layered(profile, Some(&v))
    }

    pub fn load(profile: Profile, path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            None => Self::layered(profile, None),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.display().to_string(),
                    source,
                })?;
                Self::from_json(profile, &text)
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.graph.validate().map_err(ConfigError::Invalid)?;
        self.run
            .validate(self.graph.spacing())
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.dynamics.horizon == 0 {
            return Err(ConfigError::Invalid("dynamics.horizon must be at least 1".into()));
        }
        self.mpc.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(lr) = self.dynamics.final_learning_rate {
            if !(lr > 0.0 && lr <= self.dynamics.learning_rate) {
                return Err(ConfigError::Invalid("dynamics.final_learning_rate must lie in (0, learning_rate]".into()));
            }
        }
        if !(self.behavior.step_magnitude > 0.0) {
            return Err(ConfigError::Invalid("behavior.step_magnitude must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
