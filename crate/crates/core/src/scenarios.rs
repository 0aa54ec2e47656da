//! Bundled demo scenarios.

use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, SimConfig};
use crate::workload::WorkloadSpec;

/// A named, fully populated arena config. Battleground presets also carry
/// the second arena's config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub config: SimConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_b: Option<SimConfig>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScenarioError {
    #[error("unknown scenario `{0}` (bundled: {list})", list = BUNDLED.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", "))]
    UnknownScenario(String),
    #[error("scenario `{name}`: {source}")]
    Invalid { name: String, source: ConfigError },
}

const BUNDLED: &[(&str, &str)] = &[
    (
        "cold-start-burst",
        include_str!("../scenarios/cold-start-burst.json"),
    ),
    (
        "steady-state",
        include_str!("../scenarios/steady-state.json"),
    ),
    (
        "node-failure-drill",
        include_str!("../scenarios/node-failure-drill.json"),
    ),
    (
        "strategy-duel",
        include_str!("../scenarios/strategy-duel.json"),
    ),
];

pub fn bundled_names() -> impl Iterator<Item = &'static str> {
    BUNDLED.iter().map(|(n, _)| *n)
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario, ScenarioError> {
        let invalid = |name: &str, e: String| ScenarioError::Invalid {
            name: name.to_string(),
            source: ConfigError(e),
        };
        let s: Scenario = serde_json::from_str(text).map_err(|e| invalid("?", e.to_string()))?;
        for cfg in std::iter::once(&s.config).chain(s.config_b.as_ref()) {
            cfg.validate().map_err(|e| invalid(&s.name, e.0))?;
        }
        Ok(s)
    }

    pub fn workload(&self) -> &WorkloadSpec {
        &self.config.workload
    }
}

/// Looks up a bundled scenario by name.
pub fn load_scenario(name: &str) -> Result<Scenario, ScenarioError> {
    let (_, text) = BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| ScenarioError::UnknownScenario(name.to_string()))?;
    Scenario::from_json(text)
}
