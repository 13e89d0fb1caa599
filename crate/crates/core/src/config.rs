//! TOML lab configuration shared by the CLI subcommands.
//!
//! One file carries the steering hyperparameters (`T`, `alpha`, `beta`,
//! `sigma`, `delta`, `energy`, `layers`, `head_reduction`, `seed`), the
//! edit-attention coefficient (`eta`), and harness knobs. Every key has a
//! default, so an empty file (or no file) is valid.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SteerError};
use crate::steering::{EnergyKind, HeadReduction, LayerSet, SteeringConfig, TOY_ALPHA};

/// Which visual prompt variant harness scenarios carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    #[default]
    Box,
    Mask,
    Scribble,
    Point,
}

impl PromptKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PromptKind::Box => "box",
            PromptKind::Mask => "mask",
            PromptKind::Scribble => "scribble",
            PromptKind::Point => "point",
        }
    }
}

/// `layers` accepts the string `"all"` or an explicit index list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayersField {
    Name(String),
    Indices(Vec<usize>),
}

impl Default for LayersField {
    fn default() -> Self {
        LayersField::Name("all".into())
    }
}

impl LayersField {
    fn to_layer_set(&self) -> Result<LayerSet> {
        match self {
            LayersField::Name(s) if s == "all" => Ok(LayerSet::All),
            LayersField::Name(other) => Err(SteerError::Config(format!(
                "layers must be \"all\" or an index list, got {other:?}"
            ))),
            LayersField::Indices(idx) => Ok(LayerSet::Indices(idx.clone())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    /// Steering iteration cap.
    #[serde(rename = "T")]
    pub t: usize,
    pub alpha: f64,
    pub beta: f64,
    pub sigma: f64,
    pub delta: f64,
    pub energy: EnergyKind,
    pub layers: LayersField,
    pub head_reduction: HeadReduction,
    pub seed: u64,
    /// Edit-attention coefficient.
    pub eta: f64,
    /// Bias every row instead of only text rows.
    pub bias_all_rows: bool,
    /// Forward with the raw latent instead of the EMA shadow.
    pub raw_forward: bool,
    /// Experimental highlight-row pooling (indices into the text prompt).
    pub text_rows: Option<Vec<usize>>,
    /// Scenario prompt variant for the harness.
    pub prompt: PromptKind,
}

impl Default for LabConfig {
    fn default() -> Self {
        LabConfig {
            t: 4,
            alpha: TOY_ALPHA,
            beta: 0.5,
            sigma: 0.1,
            delta: 0.25,
            energy: EnergyKind::Hard,
            layers: LayersField::default(),
            head_reduction: HeadReduction::Mean,
            seed: 7,
            eta: 10.0,
            bias_all_rows: false,
            raw_forward: false,
            text_rows: None,
            prompt: PromptKind::Box,
        }
    }
}

impl LabConfig {
    pub fn from_toml(text: &str) -> Result<LabConfig> {
        let config: LabConfig =
            toml::from_str(text).map_err(|e| SteerError::Config(e.to_string()))?;
        config.steering()?; // surfaces range errors early
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<LabConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| SteerError::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text)
    }

    pub fn steering(&self) -> Result<SteeringConfig> {
        let config = SteeringConfig {
            iterations: self.t,
            alpha: self.alpha,
            beta: self.beta,
            sigma: self.sigma,
            delta: self.delta,
            energy: self.energy,
            layers: self.layers.to_layer_set()?,
            head_reduction: self.head_reduction,
            raw_forward: self.raw_forward,
            text_rows: self.text_rows.clone(),
        };
        config.validate()?;
        Ok(config)
    }
}
