use std::collections::BTreeMap;

use super::{AgentHyperparams, Algorithm, HandlerKind};
use crate::error::{Error, Result};

/// Final tuned configurations, keyed by experiment name and obstacle setting.
pub const PRESETS_JSON: &str = include_str!("../../presets/agents.json");

type Table = BTreeMap<String, BTreeMap<String, AgentHyperparams>>;

fn table() -> Result<Table> {
    Ok(serde_json::from_str(PRESETS_JSON)?)
}

fn key(algorithm: Algorithm, handler: HandlerKind) -> Result<String> {
    algorithm.check_handler(handler)?;
    Ok(match (algorithm, handler) {
        (Algorithm::Pam, _) | (Algorithm::MpsTd3, _) => algorithm.name().to_string(),
        (_, HandlerKind::Penalty) => algorithm.name().to_string(),
        (_, HandlerKind::RandomReplacement) => format!("{algorithm}-replacement"),
        (_, h) => format!("{algorithm}-{}", h.name().replace('_', "-")),
    })
}

/// Shipped hyperparameters for an algorithm/handler pair.
pub fn preset(algorithm: Algorithm, handler: HandlerKind, with_obstacles: bool) -> Result<AgentHyperparams> {
    let name = key(algorithm, handler)?;
    let setting = if with_obstacles {
        "with_obstacles"
    } else {
        "without_obstacles"
    };
    table()?
        .remove(&name)
        .and_then(|mut m| m.remove(setting))
        .ok_or_else(|| Error::InvalidArgument(format!("no preset {name}/{setting}")))
}

/// Experiment names present in the preset table.
pub fn preset_names() -> Result<Vec<String>> {
    Ok(table()?.into_keys().collect())
}
