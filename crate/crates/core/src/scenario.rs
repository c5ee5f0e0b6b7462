//! Scenario and input-script files.

use std::collections::BTreeSet;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affect::{AffectWeights, Metric, PreferenceProfile};
use crate::world::{Block, RewardConfig, WorldState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("{field}: {message}")]
    Schema { field: String, message: String },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

fn schema(field: &str, message: impl ToString) -> ScenarioError {
    ScenarioError::Schema { field: field.to_string(), message: message.to_string() }
}

/// Parses JSON, reporting the path of the first offending field.
fn parse<T: DeserializeOwned>(json: &str) -> Result<T, ScenarioError> {
    let de = &mut serde_json::Deserializer::from_str(json);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "<root>".to_string() } else { path };
        schema(&field, e.into_inner())
    })
}

fn read(path: &Path) -> Result<String, ScenarioError> {
    std::fs::read_to_string(path)
        .map_err(|e| ScenarioError::Io { path: path.display().to_string(), message: e.to_string() })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialPredicates {
    #[serde(default)]
    pub on: Vec<(Block, Block)>,
    pub ontable: Vec<Block>,
    #[serde(default)]
    pub tower3_formed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub blocks: Vec<Block>,
    pub initial: InitialPredicates,
    pub profile: PreferenceProfile,
    #[serde(default)]
    pub weights: AffectWeights,
    #[serde(default)]
    pub reward: RewardConfig,
    /// Start executing as soon as the run begins.
    #[serde(default = "yes")]
    pub autostart: bool,
}

fn yes() -> bool {
    true
}

impl Default for Scenario {
    /// All six blocks on the table; the simulated human prefers green.
    fn default() -> Self {
        Scenario {
            blocks: Block::ALL.to_vec(),
            initial: InitialPredicates { on: Vec::new(), ontable: Block::ALL.to_vec(), tower3_formed: false },
            profile: PreferenceProfile::prefers(Block::Green),
            weights: AffectWeights::default(),
            reward: RewardConfig::default(),
            autostart: true,
        }
    }
}

impl Scenario {
    pub fn from_json(json: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = parse(json)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        Self::from_json(&read(path.as_ref())?)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let distinct: BTreeSet<Block> = self.blocks.iter().copied().collect();
        if self.blocks.len() != Block::ALL.len() || distinct.len() != Block::ALL.len() {
            return Err(schema("blocks", "must list each of the six blocks exactly once"));
        }
        self.initial_state()?;
        self.reward.validate().map_err(|e| schema("reward", e))?;
        self.profile.validate().map_err(|e| schema("profile", e))?;
        for (name, w) in [("weights.w_excitement", self.weights.w_excitement), ("weights.w_stress", self.weights.w_stress)]
        {
            if !(w.is_finite() && w >= 0.0) {
                return Err(schema(name, "must be a non-negative number"));
            }
        }
        Ok(())
    }

    pub fn initial_state(&self) -> Result<WorldState, ScenarioError> {
        let i = &self.initial;
        WorldState::from_predicates(&i.on, &i.ontable, i.tower3_formed).map_err(|e| schema("initial", e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlCommand {
    Start,
    Stop,
    Resume,
}

/// One operator input, as sent by the console or a script.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Input {
    Claim { block: Block },
    Release { block: Block },
    Blink,
    AffectOverride { metric: Metric, value: f64 },
    Control { command: ControlCommand },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub at_ms: u64,
    #[serde(flatten)]
    pub input: Input,
}

/// Timestamped inputs replayed in place of a live console.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    /// Simulated run length; defaults to 2 s past the last input.
    #[serde(default)]
    pub duration_ms: Option<u64>,
    pub events: Vec<ScriptEntry>,
}

impl Script {
    pub fn from_json(json: &str) -> Result<Self, ScenarioError> {
        let mut s: Script = parse(json)?;
        for (i, e) in s.events.iter().enumerate() {
            if let Input::AffectOverride { value, .. } = e.input {
                if !(0.0..=1.0).contains(&value) {
                    return Err(schema(&format!("events[{i}].value"), "must lie in [0, 1]"));
                }
            }
        }
        // stable: equal timestamps keep file order
        s.events.sort_by_key(|e| e.at_ms);
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        Self::from_json(&read(path.as_ref())?)
    }

    pub fn duration_ms(&self) -> u64 {
        self.duration_ms.unwrap_or_else(|| self.events.last().map_or(0, |e| e.at_ms) + 2000)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "blocks": ["blue", "green", "orange", "purple", "red", "yellow"],
        "initial": {"ontable": ["blue", "green", "orange", "purple", "red", "yellow"]},
        "profile": {"preferred_block": "green"}
    }"#;

    #[test]
    fn minimal_scenario_uses_defaults() {
        let s = Scenario::from_json(MINIMAL).unwrap();
        assert_eq!(s, Scenario::default());
        assert_eq!(s.initial_state().unwrap(), WorldState::all_on_table());
    }

    #[test]
    fn schema_error_names_field() {
        let bad = MINIMAL.replace(r#""preferred_block": "green""#, r#""preferred_block": "teal""#);
        match Scenario::from_json(&bad) {
            Err(ScenarioError::Schema { field, .. }) => assert_eq!(field, "profile.preferred_block"),
            other => panic!("{other:?}"),
        }
        let missing = r#"{"blocks": [], "profile": {"preferred_block": "green"}}"#;
        assert!(matches!(Scenario::from_json(missing), Err(ScenarioError::Schema { .. })));
    }

    #[test]
    fn duplicate_blocks_rejected() {
        let bad = MINIMAL.replace(r#"["blue", "green", "orange", "purple", "red", "yellow"],
        "initial""#, r#"["blue", "blue", "orange", "purple", "red", "yellow"],
        "initial""#);
        assert!(matches!(Scenario::from_json(&bad), Err(ScenarioError::Schema { field, .. }) if field == "blocks"));
    }

    #[test]
    fn inconsistent_initial_state_rejected() {
        let bad = MINIMAL.replace(r#""initial": {"ontable""#, r#""initial": {"on": [["red", "red"]], "ontable""#);
        assert!(matches!(Scenario::from_json(&bad), Err(ScenarioError::Schema { field, .. }) if field == "initial"));
    }

    #[test]
    fn script_parses_and_sorts() {
        let s = Script::from_json(
            r#"{"events": [
                {"at_ms": 3000, "action": "blink"},
                {"at_ms": 1000, "action": "claim", "block": "green"},
                {"at_ms": 2000, "action": "affect_override", "metric": "stress", "value": 1.0},
                {"at_ms": 4000, "action": "control", "command": "resume"}
            ]}"#,
        )
        .unwrap();
        assert_eq!(s.events[0].input, Input::Claim { block: Block::Green });
        assert_eq!(s.events[3].input, Input::Control { command: ControlCommand::Resume });
        assert_eq!(s.duration_ms(), 6000);
    }

    #[test]
    fn script_value_out_of_range() {
        let r = Script::from_json(r#"{"events": [{"at_ms": 0, "action": "affect_override", "metric": "stress", "value": 2}]}"#);
        assert!(matches!(r, Err(ScenarioError::Schema { field, .. }) if field == "events[0].value"));
    }
}
