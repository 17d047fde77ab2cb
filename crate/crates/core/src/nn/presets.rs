//! Reference CDE-function architectures.
//!
//! Each preset fixes the layer count, widths and activation placement: a
//! plain affine input layer, ReLU hidden layers and a tanh output layer of
//! width `hidden × path_dim`. Widths can be scaled down for small runs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Activation, LayerSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArchPreset {
    #[serde(rename = "char-traj-f")]
    CharTrajF,
    #[serde(rename = "char-traj-g")]
    CharTrajG,
    #[serde(rename = "sepsis-f")]
    SepsisF,
    #[serde(rename = "sepsis-g")]
    SepsisG,
    #[serde(rename = "stock-f")]
    StockF,
    #[serde(rename = "stock-g")]
    StockG,
}

impl ArchPreset {
    pub const ALL: [ArchPreset; 6] = [
        ArchPreset::CharTrajF,
        ArchPreset::CharTrajG,
        ArchPreset::SepsisF,
        ArchPreset::SepsisG,
        ArchPreset::StockF,
        ArchPreset::StockG,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArchPreset::CharTrajF => "char-traj-f",
            ArchPreset::CharTrajG => "char-traj-g",
            ArchPreset::SepsisF => "sepsis-f",
            ArchPreset::SepsisG => "sepsis-g",
            ArchPreset::StockF => "stock-f",
            ArchPreset::StockG => "stock-g",
        }
    }

    /// Widths of the layers between input and output.
    fn hidden_widths(self) -> &'static [usize] {
        match self {
            ArchPreset::CharTrajF => &[10, 20, 20, 20],
            ArchPreset::CharTrajG => &[40, 40, 40],
            ArchPreset::SepsisF => &[20, 20, 20, 20],
            ArchPreset::SepsisG => &[49, 49, 49, 49],
            ArchPreset::StockF => &[8, 4, 4, 4],
            ArchPreset::StockG => &[32, 32, 32],
        }
    }

    /// `(hidden, path_dim)` of the published full-size configuration.
    pub fn reference_dims(self) -> (usize, usize) {
        match self {
            ArchPreset::CharTrajF => (4, 4),
            ArchPreset::CharTrajG => (40, 4),
            ArchPreset::SepsisF => (69, 69),
            ArchPreset::SepsisG => (49, 69),
            ArchPreset::StockF => (7, 7),
            ArchPreset::StockG => (32, 7),
        }
    }

    /// Reported best learning rate for the dataset the preset belongs to.
    pub fn learning_rate(self) -> f64 {
        match self {
            ArchPreset::CharTrajF | ArchPreset::CharTrajG => 1.0e-3,
            ArchPreset::SepsisF | ArchPreset::SepsisG => 1.0e-5,
            ArchPreset::StockF | ArchPreset::StockG => 1.0e-3,
        }
    }

    /// Layer list for a CDE function with the given hidden and path widths.
    pub fn layers(self, hidden: usize, path_dim: usize, width_scale: f64) -> Result<Vec<LayerSpec>> {
        if !(width_scale > 0.0) {
            return Err(Error::Validation("width scale must be positive".into()));
        }
        let widths: Vec<usize> = self
            .hidden_widths()
            .iter()
            .map(|&w| ((w as f64 * width_scale).round() as usize).max(1))
            .collect();
        Ok(custom_layers(hidden, &widths, hidden * path_dim))
    }
}

/// Affine input layer, ReLU on every later hidden layer, tanh output.
pub fn custom_layers(input: usize, widths: &[usize], output: usize) -> Vec<LayerSpec> {
    let mut layers = Vec::with_capacity(widths.len() + 1);
    let mut prev = input;
    for (i, &w) in widths.iter().enumerate() {
        let act = if i == 0 { Activation::None } else { Activation::Relu };
        layers.push(LayerSpec::new(prev, w, act));
        prev = w;
    }
    layers.push(LayerSpec::new(prev, output, Activation::Tanh));
    layers
}

impl fmt::Display for ArchPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArchPreset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown architecture preset `{s}`")))
    }
}
