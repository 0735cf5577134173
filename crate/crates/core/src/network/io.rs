use std::path::Path;

use serde::{Deserialize, Serialize};

use super::phases::PhaseOverrides;
use super::{NetworkError, TrafficNetwork};

/// On-disk network description (JSON).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    pub nodes: Vec<NodeRecord>,
    pub links: Vec<LinkRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phases: Option<PhaseOverrides>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub right_on_any_phase: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeRecord {
    pub id: String,
    pub x_m: f64,
    pub y_m: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkRecord {
    pub id: String,
    pub from: String,
    pub to: String,
    pub length_m: f64,
    pub lanes: usize,
    /// Normal capacity; derived from length when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    #[serde(default)]
    pub c_ec: f64,
    pub v_free_mps: f64,
    pub v_emv_mps: f64,
}

pub fn load_network(path: impl AsRef<Path>) -> Result<TrafficNetwork, NetworkError> {
    let text = std::fs::read_to_string(path)?;
    let file: NetworkFile = serde_json::from_str(&text)?;
    TrafficNetwork::from_file(file)
}

pub fn save_network(net: &TrafficNetwork, path: impl AsRef<Path>) -> Result<(), NetworkError> {
    let mut text = serde_json::to_string_pretty(net.to_file())?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
