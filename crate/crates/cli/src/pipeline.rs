//! Config → datasets → model.

use std::fs;
use std::path::Path;

use ancde::data::synthetic::{ar1, sine_phase};
use ancde::data::{
    add_observation_intensity, drop_observations, load_csv, make_forecast_windows, split_raw, write_csv, Dataset,
    Example, Normalization, SplitSpec, Splits, Task,
};
use ancde::model::{AncdeModel, HeadMode, ModelConfig};
use ancde::train::Metric;

use crate::config::{RunConfig, Source};
use crate::CliError;

pub struct Prepared {
    /// Splits before normalization (after dropping, windowing and intensity).
    pub raw: Splits<f64>,
    pub norm: Normalization,
    pub train: Vec<Example<f64>>,
    pub val: Vec<Example<f64>>,
    pub test: Vec<Example<f64>>,
    pub task: Task,
    /// Channels seen by the model, including the time channel.
    pub path_dim: usize,
}

fn load_source(cfg: &RunConfig) -> Result<Dataset<f64>, CliError> {
    Ok(match &cfg.data.source {
        Source::Csv { observations, labels } => load_csv(observations, labels.as_deref())?,
        Source::Sine(spec) => sine_phase(spec)?,
        Source::Ar1(spec) => ar1(spec)?,
    })
}

pub fn prepare(cfg: &RunConfig, seed: u64) -> Result<Prepared, CliError> {
    let d = &cfg.data;
    let mut data = load_source(cfg)?;
    if d.drop_rate > 0.0 {
        data = drop_observations(&data, d.drop_rate, seed, d.drop_mode, d.short_series)?;
    }
    if let Some(spec) = &d.windows {
        let (windows, report) = make_forecast_windows(&data, spec)?;
        if report.skipped_series + report.skipped_windows > 0 {
            eprintln!(
                "windows: {} built, {} series too short, {} windows with missing targets skipped",
                report.windows, report.skipped_series, report.skipped_windows
            );
        }
        data = windows;
    }
    if d.intensity {
        data = add_observation_intensity(&data)?;
    }
    let task = data.task.clone();
    if task == Task::Unlabeled {
        return Err(CliError::config("the data has no labels or targets; add a label file or data.windows".into()));
    }
    let spec = SplitSpec {
        train: d.split.train,
        val: d.split.val,
        test: d.split.test,
        seed,
        stratify: d.split.stratify,
    };
    let raw = split_raw(&data, &spec)?;
    if raw.train.is_empty() || raw.val.is_empty() {
        return Err(CliError::config("train and validation splits must be non-empty".into()));
    }
    let provenance = format!("train split (seed {seed}, {} samples)", raw.train.len());
    let norm = Normalization::fit(&raw.train, &provenance)?;
    let examples = |ds: &Dataset<f64>| -> Result<Vec<Example<f64>>, CliError> {
        Ok(norm.apply(ds)?.examples(d.time_augment)?)
    };
    let (train, val, test) = (examples(&raw.train)?, examples(&raw.val)?, examples(&raw.test)?);
    let path_dim = raw.train.dim().unwrap_or(0) + usize::from(d.time_augment);
    Ok(Prepared {
        train,
        val,
        test,
        task,
        path_dim,
        norm,
        raw,
    })
}

pub fn head_for(task: &Task) -> Result<HeadMode, CliError> {
    match task {
        Task::Classify { classes } => Ok(HeadMode::Classify { classes: *classes }),
        Task::Forecast { target_channels } => Ok(HeadMode::Regress {
            targets: target_channels.len(),
        }),
        Task::Unlabeled => Err(CliError::config("unlabelled data cannot train a model".into())),
    }
}

pub fn default_metric(task: &Task) -> Metric {
    match task {
        Task::Classify { .. } => Metric::Accuracy,
        _ => Metric::Mse,
    }
}

pub fn build_model(cfg: &RunConfig, path_dim: usize, task: &Task, seed: u64) -> Result<AncdeModel<f64>, CliError> {
    let m = &cfg.model;
    let hf = match (m.bottom_hidden, m.variant.is_elementwise()) {
        (Some(h), _) => h,
        (None, true) => path_dim,
        (None, false) => return Err(CliError::config("model.bottom_hidden is required for time-wise attention".into())),
    };
    let config = ModelConfig {
        path_dim,
        bottom_hidden: hf,
        top_hidden: m.top_hidden,
        variant: m.variant,
        bottom_layers: m.bottom_arch.layers(hf, path_dim, m.width_scale)?,
        top_layers: m.top_arch.layers(m.top_hidden, path_dim, m.width_scale)?,
        head: head_for(task)?,
        tau_increment: m.tau_increment,
        seed,
    };
    Ok(AncdeModel::new(config)?)
}

/// The comment line that stamps every CSV artifact.
pub fn stamp(hash: &str, seed: u64) -> String {
    format!("# config_sha256={hash} seed={seed}\n")
}

/// Write `text` to `path` with the stamp line in front.
pub fn write_stamped(path: &Path, stamp_line: &str, text: &str) -> Result<(), CliError> {
    fs::write(path, format!("{stamp_line}{text}"))?;
    Ok(())
}

/// Observations go to `<name>.csv`, labels/targets to `<name>_labels.csv`.
pub fn write_split(dir: &Path, name: &str, data: &Dataset<f64>, stamp_line: &str) -> Result<(), CliError> {
    let obs = dir.join(format!("{name}.csv"));
    let labels = dir.join(format!("{name}_labels.csv"));
    write_csv(data, &obs, Some(&labels))?;
    for p in [obs, labels] {
        if p.exists() {
            let text = fs::read_to_string(&p)?;
            write_stamped(&p, stamp_line, &text)?;
        }
    }
    Ok(())
}
