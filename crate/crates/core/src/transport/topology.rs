use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dehaze::DehazeConfig;
use crate::pipeline::Stage;

/// Overrides the listen address of the local process.
pub const BIND_ENV: &str = "HZL_BIND";

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("reading topology: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing topology: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid topology: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Source,
    Stage(Stage),
    Monitor,
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "source" => Ok(Role::Source),
            "monitor" => Ok(Role::Monitor),
            _ => match s.strip_prefix("stage:") {
                Some(name) => name.parse().map(Role::Stage),
                None => Err(format!("unknown role `{s}` (expected source, monitor or stage:<name>)")),
            },
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Source => f.write_str("source"),
            Role::Monitor => f.write_str("monitor"),
            Role::Stage(s) => write!(f, "stage:{s}"),
        }
    }
}

impl Serialize for Role {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Role {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEndpoints {
    pub transmission: Vec<String>,
    pub airlight: Vec<String>,
    pub generator: Vec<String>,
}

impl StageEndpoints {
    pub fn get(&self, stage: Stage) -> &[String] {
        match stage {
            Stage::Transmission => &self.transmission,
            Stage::Airlight => &self.airlight,
            Stage::Generator => &self.generator,
        }
    }
}

/// Who listens where, and which part this process plays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyAssignment {
    pub stages: StageEndpoints,
    /// Address the monitor listens on for a remote source.
    pub monitor: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    /// Component parameters shared by every endpoint.
    #[serde(default)]
    pub dehaze: DehazeConfig,
}

impl TopologyAssignment {
    pub fn new(stages: StageEndpoints, monitor: impl Into<String>) -> Self {
        Self { stages, monitor: monitor.into(), role: None, dehaze: DehazeConfig::default() }
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        for stage in Stage::ALL {
            if self.stages.get(stage).is_empty() {
                return Err(TopologyError::Invalid(format!("stage {stage} has no endpoints")));
            }
        }
        if self.monitor.trim().is_empty() {
            return Err(TopologyError::Invalid("monitor address is empty".into()));
        }
        self.dehaze.validate().map_err(|e| TopologyError::Invalid(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, TopologyError> {
        let topo: Self = serde_json::from_str(text)?;
        topo.validate()?;
        Ok(topo)
    }

    pub fn load(path: &Path) -> Result<Self, TopologyError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("topology is plain data")
    }

    /// Address this process should listen on for `role`, honouring `HZL_BIND`.
    pub fn listen_address(&self, role: Role) -> Option<String> {
        if let Ok(addr) = std::env::var(BIND_ENV) {
            if !addr.is_empty() {
                return Some(addr);
            }
        }
        match role {
            Role::Monitor => Some(self.monitor.clone()),
            Role::Stage(stage) => self.stages.get(stage).first().cloned(),
            Role::Source => None,
        }
    }
}
