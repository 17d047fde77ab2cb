//! Run configuration: a JSON document validated before any work starts.

use std::path::{Path, PathBuf};

use ancde::data::synthetic::{Ar1Spec, SineSpec};
use ancde::data::{DropMode, ShortPolicy, WindowSpec};
use ancde::model::AttentionVariant;
use ancde::nn::presets::{custom_layers, ArchPreset};
use ancde::nn::LayerSpec;
use ancde::solver::{Method, SolverConfig};
use ancde::train::Metric;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    #[serde(default)]
    pub solver: SolverSection,
    pub train: TrainSection,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum Source {
    /// `series_id,t,v1..vD` observations plus an optional label/target file.
    Csv {
        observations: PathBuf,
        #[serde(default)]
        labels: Option<PathBuf>,
    },
    Sine(SineSpec),
    Ar1(Ar1Spec),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: Source,
    #[serde(default)]
    pub drop_rate: f64,
    #[serde(default)]
    pub drop_mode: DropMode,
    #[serde(default)]
    pub short_series: ShortPolicy,
    /// Append the running observation count as an extra channel.
    #[serde(default)]
    pub intensity: bool,
    #[serde(default = "yes")]
    pub time_augment: bool,
    /// Turn series into one-step forecasting windows.
    #[serde(default)]
    pub windows: Option<WindowSpec>,
    pub split: SplitSection,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    #[serde(default)]
    pub stratify: bool,
}

/// Hidden layers of a CDE function: a named reference preset or explicit widths.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum Arch {
    Preset(ArchPreset),
    Widths(Vec<usize>),
}

impl Arch {
    pub fn layers(&self, hidden: usize, path_dim: usize, width_scale: f64) -> Result<Vec<LayerSpec>, CliError> {
        match self {
            Arch::Preset(p) => Ok(p.layers(hidden, path_dim, width_scale)?),
            Arch::Widths(w) => Ok(custom_layers(hidden, w, hidden * path_dim)),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub variant: AttentionVariant,
    /// Width of h; element-wise variants default to (and require) the path dimension.
    #[serde(default)]
    pub bottom_hidden: Option<usize>,
    pub top_hidden: usize,
    pub bottom_arch: Arch,
    pub top_arch: Arch,
    /// Multiplies preset widths; ignored for explicit widths.
    #[serde(default = "unit")]
    pub width_scale: f64,
    #[serde(default = "tau_increment")]
    pub tau_increment: f64,
}

fn unit() -> f64 {
    1.0
}

fn tau_increment() -> f64 {
    0.12
}

/// Solver settings; omitted fields fall back to the library defaults.
/// Giving `step_size` without `substeps_per_interval` selects a uniform step.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default)]
    pub method: Option<Method>,
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default)]
    pub substeps_per_interval: Option<usize>,
    #[serde(default)]
    pub rtol: Option<f64>,
    #[serde(default)]
    pub atol: Option<f64>,
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub min_step: Option<f64>,
}

impl SolverSection {
    pub fn build(&self) -> SolverConfig<f64> {
        let mut cfg = SolverConfig::<f64>::default();
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(h) = self.step_size {
            cfg.step_size = h;
            cfg.substeps_per_interval = None;
        }
        if let Some(n) = self.substeps_per_interval {
            cfg.substeps_per_interval = Some(n);
        }
        if cfg.method == Method::Dopri5 {
            cfg.substeps_per_interval = None;
        }
        cfg.rtol = self.rtol.unwrap_or(cfg.rtol);
        cfg.atol = self.atol.unwrap_or(cfg.atol);
        cfg.max_steps = self.max_steps.unwrap_or(cfg.max_steps);
        cfg.min_step = self.min_step.unwrap_or(cfg.min_step);
        cfg
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Iterations of the others → f → g cycle.
    pub epochs: usize,
    pub lr: f64,
    #[serde(default)]
    pub lr_others: Option<f64>,
    #[serde(default)]
    pub lr_f: Option<f64>,
    #[serde(default)]
    pub lr_g: Option<f64>,
    #[serde(default = "batch_size")]
    pub batch_size: usize,
    /// Defaults to accuracy for classification and MSE for forecasting.
    #[serde(default)]
    pub metric: Option<Metric>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "clip_norm")]
    pub clip_norm: f64,
    #[serde(default)]
    pub log_wall_time: bool,
}

fn batch_size() -> usize {
    32
}

fn clip_norm() -> f64 {
    10.0
}

/// A parsed config with its identity.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    /// Hex SHA-256 of the config file bytes.
    pub hash: String,
    /// Effective seed (`ANCDE_SEED` wins over the file).
    pub seed: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn seed_override() -> Result<Option<u64>, CliError> {
    match std::env::var("ANCDE_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::config(format!("ANCDE_SEED must be an unsigned integer, got `{v}`"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(CliError::config(format!("ANCDE_SEED: {e}"))),
    }
}

pub fn load(path: &Path) -> Result<Loaded, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
    let config: RunConfig =
        serde_json::from_slice(&bytes).map_err(|e| CliError::config(format!("invalid config {}: {e}", path.display())))?;
    config.validate()?;
    let seed = seed_override()?.unwrap_or(config.train.seed);
    Ok(Loaded {
        hash: sha256_hex(&bytes),
        seed,
        config,
    })
}

impl RunConfig {
    /// Checks that need no data.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: &str| Err(CliError::config(msg.to_string()));
        let d = &self.data;
        if !(0.0..1.0).contains(&d.drop_rate) {
            return bad("data.drop_rate must be in [0, 1)");
        }
        let s = &d.split;
        if [s.train, s.val, s.test].iter().any(|v| !(0.0..=1.0).contains(v)) || s.train <= 0.0 || s.val <= 0.0 {
            return bad("data.split fractions must lie in [0, 1], with positive train and val");
        }
        if ((s.train + s.val + s.test) - 1.0).abs() > 1e-9 {
            return bad("data.split fractions must sum to 1");
        }
        if matches!(d.source, Source::Ar1(_)) && d.windows.is_none() {
            return bad("an unlabelled source needs data.windows");
        }
        if let Some(w) = &d.windows {
            if w.input_len < 2 || w.horizon == 0 {
                return bad("data.windows needs input_len >= 2 and horizon >= 1");
            }
        }
        let m = &self.model;
        if m.top_hidden == 0 || m.bottom_hidden == Some(0) {
            return bad("model hidden widths must be positive");
        }
        if !(m.width_scale > 0.0) || !(m.tau_increment >= 0.0) {
            return bad("model.width_scale must be positive and tau_increment non-negative");
        }
        for arch in [&m.bottom_arch, &m.top_arch] {
            if let Arch::Widths(w) = arch {
                if w.contains(&0) {
                    return bad("layer widths must be positive");
                }
            }
        }
        let t = &self.train;
        let lrs = [Some(t.lr), t.lr_others, t.lr_f, t.lr_g];
        if lrs.iter().flatten().any(|lr| !(*lr > 0.0) || !lr.is_finite()) {
            return bad("learning rates must be positive and finite");
        }
        if t.batch_size == 0 {
            return bad("train.batch_size must be positive");
        }
        if !(t.clip_norm > 0.0) {
            return bad("train.clip_norm must be positive");
        }
        let solver = self.solver.build();
        solver.validate()?;
        if !solver.method.is_fixed_step() {
            return bad("training needs a fixed-step solver (euler or rk4)");
        }
        Ok(())
    }
}
