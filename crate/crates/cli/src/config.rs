use std::collections::BTreeMap;
use std::path::Path;

use pathmpc::guidance::ControllerKind;
use pathmpc::model::{ModelParameters, CLOSED_LOOP_NAMES, OPEN_LOOP_NAMES};
use pathmpc::path::PathPreset;
use pathmpc::sim::Scenario;
use pathmpc::sysid::{FitOptions, ManeuverSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Top-level configuration file. Every section is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub scenario: Scenario,
    pub compare: CompareConfig,
    pub sysid: SysIdConfig,
    pub sweep: SweepConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub paths: Vec<String>,
    pub controllers: Vec<String>,
    /// Per-path replacement of the CR-MPC reference rate.
    pub psi_dot_ref: BTreeMap<String, f64>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            paths: PathPreset::ALL.iter().map(|p| p.name().to_string()).collect(),
            controllers: ControllerKind::ALL.iter().map(|k| k.name().to_string()).collect(),
            psi_dot_ref: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SysIdConfig {
    /// Required whenever a `[sysid]` table is present.
    pub maneuvers: Option<ManeuverSpec>,
    #[serde(default)]
    pub fit: FitOptions,
    /// Parameters that generate the synthetic data.
    #[serde(default)]
    pub truth: ModelParameters,
    /// Starting point of the fit; the truth moved by `guess_offset` when absent.
    #[serde(default)]
    pub initial_guess: Option<ModelParameters>,
    #[serde(default = "default_guess_offset")]
    pub guess_offset: f64,
}

fn default_guess_offset() -> f64 {
    0.2
}

impl Default for SysIdConfig {
    fn default() -> Self {
        Self {
            maneuvers: Some(ManeuverSpec::standard()),
            fit: FitOptions::default(),
            truth: ModelParameters::default(),
            initial_guess: None,
            guess_offset: default_guess_offset(),
        }
    }
}

impl SysIdConfig {
    /// Explicit guess, or every fitted parameter of the truth scaled by
    /// `1 +/- guess_offset`, alternating.
    pub fn guess(&self) -> ModelParameters {
        if let Some(g) = self.initial_guess {
            return g;
        }
        let mut p = self.truth;
        for (i, name) in CLOSED_LOOP_NAMES.iter().chain(&OPEN_LOOP_NAMES).enumerate() {
            let s = if i % 2 == 0 { 1.0 + self.guess_offset } else { 1.0 - self.guess_offset };
            let v = self.truth.get(name).unwrap_or_default();
            let _ = p.set(name, v * s);
        }
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub horizons: Vec<usize>,
    /// Simulated seconds per horizon.
    pub duration: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            horizons: vec![10, 25, 50, 75, 100],
            duration: 30.0,
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// SHA-256 of the effective configuration, after command-line overrides.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("configuration serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

pub fn parse_list(text: &str) -> Vec<String> {
    text.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

pub fn presets(names: &[String]) -> Result<Vec<PathPreset>, CliError> {
    if names.is_empty() {
        return Err(CliError::Config("no paths selected".into()));
    }
    names
        .iter()
        .map(|n| PathPreset::from_name(n).map_err(|e| CliError::Config(e.to_string())))
        .collect()
}

pub fn controllers(names: &[String]) -> Result<Vec<ControllerKind>, CliError> {
    if names.is_empty() {
        return Err(CliError::Config("no controllers selected".into()));
    }
    names
        .iter()
        .map(|n| ControllerKind::from_name(n).map_err(|e| CliError::Config(e.to_string())))
        .collect()
}
