//! Irregular time-series datasets: CSV I/O, observation dropping, the
//! observation-intensity channel, forecasting windows, splits and
//! train-only normalization.

pub mod synthetic;

use std::collections::HashMap;
use std::path::Path;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::path::{fit_natural_cubic_spline, SplinePath, TimeSeries};
use crate::scalar::Scalar;

/// What the samples are labelled with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Unlabeled,
    Classify { classes: usize },
    /// One-step forecasting of the listed input channels.
    Forecast { target_channels: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target<T> {
    Class(usize),
    Values(Vec<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub id: String,
    pub series: TimeSeries<T>,
    pub target: Option<Target<T>>,
}

/// Per-channel z-score statistics and where they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Identifies the split the statistics were fitted on.
    pub fitted_on: String,
}

impl Normalization {
    /// Fit on every observed cell of `data`; zero-variance channels get std 1.
    pub fn fit<T: Scalar>(data: &Dataset<T>, provenance: &str) -> Result<Self> {
        let d = data.dim().ok_or_else(|| Error::Validation("cannot fit normalization on an empty dataset".into()))?;
        let mut sum = vec![0.0; d];
        let mut count = vec![0usize; d];
        for s in &data.samples {
            for row in s.series.values() {
                for (c, v) in row.iter().enumerate() {
                    if let Some(v) = v {
                        sum[c] += v.to_f64_lossy();
                        count[c] += 1;
                    }
                }
            }
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| if n > 0 { s / n as f64 } else { 0.0 }).collect();
        let mut sq = vec![0.0; d];
        for s in &data.samples {
            for row in s.series.values() {
                for (c, v) in row.iter().enumerate() {
                    if let Some(v) = v {
                        sq[c] += (v.to_f64_lossy() - mean[c]).powi(2);
                    }
                }
            }
        }
        let std = sq
            .iter()
            .zip(&count)
            .map(|(s, &n)| {
                let sd = if n > 0 { (s / n as f64).sqrt() } else { 0.0 };
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self {
            mean,
            std,
            fitted_on: provenance.to_string(),
        })
    }

    fn scale<T: Scalar>(&self, c: usize, v: T) -> T {
        (v - T::lit(self.mean[c])) / T::lit(self.std[c])
    }

    /// Normalized copy of `data` (targets of forecast tasks use their source channel's stats).
    pub fn apply<T: Scalar>(&self, data: &Dataset<T>) -> Result<Dataset<T>> {
        if let Some(d) = data.dim() {
            if d != self.mean.len() {
                return Err(Error::Validation(format!(
                    "normalization has {} channels, data has {d}",
                    self.mean.len()
                )));
            }
        }
        let samples = data
            .samples
            .iter()
            .map(|s| {
                let values = s
                    .series
                    .values()
                    .iter()
                    .map(|row| row.iter().enumerate().map(|(c, v)| v.map(|v| self.scale(c, v))).collect())
                    .collect();
                let target = match (&s.target, &data.task) {
                    (Some(Target::Values(y)), Task::Forecast { target_channels }) => Some(Target::Values(
                        y.iter().zip(target_channels).map(|(&v, &c)| self.scale(c, v)).collect(),
                    )),
                    (t, _) => t.clone(),
                };
                Ok(Sample {
                    id: s.id.clone(),
                    series: rebuild(&s.series, s.series.times().to_vec(), values)?,
                    target,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            samples,
            task: data.task.clone(),
            normalization: Some(self.clone()),
        })
    }
}

fn rebuild<T: Scalar>(like: &TimeSeries<T>, times: Vec<T>, values: Vec<Vec<Option<T>>>) -> Result<TimeSeries<T>> {
    let s = TimeSeries::new(times, values)?;
    match like.channel_names() {
        Some(names) if names.len() == s.dim() => s.with_channel_names(names.to_vec()),
        _ => Ok(s),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub samples: Vec<Sample<T>>,
    pub task: Task,
    /// Statistics already applied to these samples, if any.
    pub normalization: Option<Normalization>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(samples: Vec<Sample<T>>, task: Task) -> Result<Self> {
        let ds = Self {
            samples,
            task,
            normalization: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(d) = self.dim() {
            if let Some(s) = self.samples.iter().find(|s| s.series.dim() != d) {
                return Err(Error::Validation(format!(
                    "sample `{}` has {} channels, expected {d}",
                    s.id,
                    s.series.dim()
                )));
            }
        }
        for s in &self.samples {
            match (&self.task, &s.target) {
                (Task::Unlabeled, _) => {}
                (Task::Classify { classes }, Some(Target::Class(c))) if c < classes => {}
                (Task::Classify { classes }, Some(Target::Class(c))) => {
                    return Err(Error::Validation(format!(
                        "sample `{}` has label {c} outside 0..{classes}",
                        s.id
                    )))
                }
                (Task::Forecast { target_channels }, Some(Target::Values(v))) if v.len() == target_channels.len() => {}
                _ => return Err(Error::Validation(format!("sample `{}` has a missing or mismatched target", s.id))),
            }
        }
        if let (Task::Forecast { target_channels }, Some(d)) = (&self.task, self.dim()) {
            if target_channels.iter().any(|&c| c >= d) {
                return Err(Error::Validation("forecast target channel out of range".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Channel count, `None` for an empty dataset.
    pub fn dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.series.dim())
    }

    /// Class index per sample (classification only).
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.samples
            .iter()
            .map(|s| match s.target {
                Some(Target::Class(c)) => Some(c),
                _ => None,
            })
            .collect()
    }

    /// Spline paths plus targets, ready for training or evaluation.
    pub fn examples(&self, time_augment: bool) -> Result<Vec<Example<T>>> {
        self.samples
            .iter()
            .map(|s| {
                let target = s
                    .target
                    .clone()
                    .ok_or_else(|| Error::Validation(format!("sample `{}` has no target", s.id)))?;
                Ok(Example {
                    id: s.id.clone(),
                    path: fit_natural_cubic_spline(&s.series, time_augment)?,
                    target,
                })
            })
            .collect()
    }
}

/// A sample turned into a control path.
#[derive(Debug, Clone, PartialEq)]
pub struct Example<T> {
    pub id: String,
    pub path: SplinePath<T>,
    pub target: Target<T>,
}

#[derive(Debug, Deserialize)]
struct LabelRow {
    series_id: String,
    label: usize,
}

fn parse_cell<T: Scalar>(cell: &str, what: &str) -> Result<T> {
    cell.trim()
        .parse::<f64>()
        .map(T::lit)
        .map_err(|_| Error::Format(format!("cannot parse {what} `{cell}`")))
}

/// Read observations (`series_id,t,v1..vD`, empty cell = missing) and an
/// optional label file: `series_id,label` for classification or
/// `series_id,y1..yK` for regression targets (target channels `0..K`).
pub fn load_csv<T: Scalar>(observations: &Path, labels: Option<&Path>) -> Result<Dataset<T>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_path(observations)?;
    let header = rdr.headers()?.clone();
    if header.len() < 3 || &header[0] != "series_id" || &header[1] != "t" {
        return Err(Error::Format("observations header must be `series_id,t,v1..vD`".into()));
    }
    let names: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
    let d = names.len();
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(T, Vec<Option<T>>)>> = HashMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != d + 2 {
            return Err(Error::Format(format!("row {}: expected {} fields", line + 2, d + 2)));
        }
        let id = rec[0].to_string();
        let t = parse_cell(&rec[1], "timestamp")?;
        let values = (0..d)
            .map(|c| {
                let cell = &rec[c + 2];
                if cell.is_empty() {
                    Ok(None)
                } else {
                    parse_cell(cell, "value").map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.entry(id.clone())
            .or_insert_with(|| {
                order.push(id.clone());
                Vec::new()
            })
            .push((t, values));
    }

    let mut samples = Vec::with_capacity(order.len());
    for id in order {
        let mut obs = rows.remove(&id).expect("grouped id");
        obs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
        if let Some(w) = obs.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Format(format!("duplicate observation of `{id}` at t = {}", w[0].0)));
        }
        let (times, values) = obs.into_iter().unzip();
        let series = TimeSeries::new(times, values)
            .map_err(|e| Error::Format(format!("series `{id}`: {e}")))?
            .with_channel_names(names.clone())?;
        samples.push(Sample {
            id,
            series,
            target: None,
        });
    }

    let task = match labels {
        None => Task::Unlabeled,
        Some(path) => attach_labels(&mut samples, path)?,
    };
    Dataset::new(samples, task)
}

fn attach_labels<T: Scalar>(samples: &mut [Sample<T>], path: &Path) -> Result<Task> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_path(path)?;
    let header = rdr.headers()?.clone();
    if header.len() < 2 || &header[0] != "series_id" {
        return Err(Error::Format("label header must start with `series_id`".into()));
    }
    let task;
    let mut targets: HashMap<String, Target<T>> = HashMap::new();
    if header.len() == 2 && &header[1] == "label" {
        let mut classes = 0;
        for row in rdr.deserialize::<LabelRow>() {
            let row = row?;
            classes = classes.max(row.label + 1);
            if targets.insert(row.series_id.clone(), Target::Class(row.label)).is_some() {
                return Err(Error::Format(format!("duplicate label for `{}`", row.series_id)));
            }
        }
        task = Task::Classify { classes: classes.max(2) };
    } else {
        let k = header.len() - 1;
        for rec in rdr.records() {
            let rec = rec?;
            let y = (1..=k).map(|c| parse_cell(&rec[c], "target")).collect::<Result<Vec<T>>>()?;
            if targets.insert(rec[0].to_string(), Target::Values(y)).is_some() {
                return Err(Error::Format(format!("duplicate target for `{}`", &rec[0])));
            }
        }
        task = Task::Forecast {
            target_channels: (0..k).collect(),
        };
    }
    for s in samples.iter_mut() {
        s.target = Some(
            targets
                .remove(&s.id)
                .ok_or_else(|| Error::Format(format!("series `{}` has no label", s.id)))?,
        );
    }
    Ok(task)
}

/// Write observations and (when labelled) the matching label/target file.
pub fn write_csv<T: Scalar>(data: &Dataset<T>, observations: &Path, labels: Option<&Path>) -> Result<()> {
    let d = data.dim().unwrap_or(0);
    let mut w = csv::Writer::from_path(observations)?;
    let names: Vec<String> = match data.samples.first().and_then(|s| s.series.channel_names()) {
        Some(n) => n.to_vec(),
        None => (1..=d).map(|c| format!("v{c}")).collect(),
    };
    let mut header = vec!["series_id".to_string(), "t".to_string()];
    header.extend(names);
    w.write_record(&header)?;
    for s in &data.samples {
        for (t, row) in s.series.times().iter().zip(s.series.values()) {
            let mut rec = vec![s.id.clone(), format!("{t}")];
            rec.extend(row.iter().map(|v| v.map_or(String::new(), |v| format!("{v}"))));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;

    if let Some(path) = labels {
        let mut w = csv::Writer::from_path(path)?;
        match &data.task {
            Task::Classify { .. } => w.write_record(["series_id", "label"])?,
            Task::Forecast { target_channels } => {
                let mut h = vec!["series_id".to_string()];
                h.extend((1..=target_channels.len()).map(|k| format!("y{k}")));
                w.write_record(&h)?;
            }
            Task::Unlabeled => return Err(Error::Usage("unlabeled data has no label file".into())),
        }
        for s in &data.samples {
            let mut rec = vec![s.id.clone()];
            match &s.target {
                Some(Target::Class(c)) => rec.push(c.to_string()),
                Some(Target::Values(y)) => rec.extend(y.iter().map(|v| format!("{v}"))),
                None => return Err(Error::Validation(format!("sample `{}` has no target", s.id))),
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    Ok(())
}

/// What the dropping protocol removes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropMode {
    /// Whole timestamps.
    #[default]
    Timestamps,
    /// Individual cells, independently per channel.
    Cells,
}

/// What to do with a sample too short to drop from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShortPolicy {
    #[default]
    Error,
    Skip,
}

fn drop_count(rate: f64, n: usize) -> usize {
    // The small slack keeps e.g. 0.7 · 10 from flooring to 6.
    (rate * n as f64 + 1e-9).floor() as usize
}

fn sample_rng(seed: u64, i: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Indices kept after removing `k` random interior points of `0..n`.
fn keep_indices(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut removed = vec![false; n];
    for i in index::sample(rng, n - 2, k) {
        removed[i + 1] = true;
    }
    (0..n).filter(|&i| !removed[i]).collect()
}

/// Remove `⌊rate·n⌋` interior observations per sample; endpoints always survive.
pub fn drop_observations<T: Scalar>(
    data: &Dataset<T>,
    rate: f64,
    seed: u64,
    mode: DropMode,
    short: ShortPolicy,
) -> Result<Dataset<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Validation(format!("drop rate must be in [0, 1), got {rate}")));
    }
    let mut samples = Vec::with_capacity(data.len());
    for (i, s) in data.samples.iter().enumerate() {
        let mut rng = sample_rng(seed, i);
        let series = &s.series;
        let new_series = match mode {
            DropMode::Timestamps => {
                let n = series.len();
                let k = drop_count(rate, n);
                if n < 2 || k > n - 2 {
                    match short {
                        ShortPolicy::Skip => continue,
                        ShortPolicy::Error => {
                            return Err(Error::Validation(format!(
                                "sample `{}` has {n} observations, cannot drop {k}",
                                s.id
                            )))
                        }
                    }
                }
                let keep = keep_indices(n, k, &mut rng);
                rebuild(
                    series,
                    keep.iter().map(|&j| series.times()[j]).collect(),
                    keep.iter().map(|&j| series.values()[j].clone()).collect(),
                )?
            }
            DropMode::Cells => {
                let mut values = series.values().to_vec();
                let mut ok = true;
                for c in 0..series.dim() {
                    let observed: Vec<usize> = (0..series.len()).filter(|&j| values[j][c].is_some()).collect();
                    let n = observed.len();
                    let k = drop_count(rate, n);
                    if n < 2 || k > n - 2 {
                        ok = false;
                        break;
                    }
                    let keep = keep_indices(n, k, &mut rng);
                    let mut kept = vec![false; n];
                    for j in keep {
                        kept[j] = true;
                    }
                    for (pos, &j) in observed.iter().enumerate() {
                        if !kept[pos] {
                            values[j][c] = None;
                        }
                    }
                }
                if !ok {
                    match short {
                        ShortPolicy::Skip => continue,
                        ShortPolicy::Error => {
                            return Err(Error::Validation(format!("sample `{}` is too short to drop from", s.id)))
                        }
                    }
                }
                // Timestamps left with no observed cell carry no information.
                let (times, values): (Vec<T>, Vec<_>) = series
                    .times()
                    .iter()
                    .zip(values)
                    .filter(|(_, row)| row.iter().any(Option::is_some))
                    .map(|(&t, row)| (t, row))
                    .unzip();
                rebuild(series, times, values)?
            }
        };
        samples.push(Sample {
            id: s.id.clone(),
            series: new_series,
            target: s.target.clone(),
        });
    }
    Ok(Dataset {
        samples,
        task: data.task.clone(),
        normalization: data.normalization.clone(),
    })
}

/// Append a channel holding the running observation index `1..n`.
pub fn add_observation_intensity<T: Scalar>(data: &Dataset<T>) -> Result<Dataset<T>> {
    let samples = data
        .samples
        .iter()
        .map(|s| {
            let values = s
                .series
                .values()
                .iter()
                .enumerate()
                .map(|(i, row)| {
                    let mut r = row.clone();
                    r.push(Some(T::from_usize_lossy(i + 1)));
                    r
                })
                .collect();
            let mut series = TimeSeries::new(s.series.times().to_vec(), values)?;
            if let Some(names) = s.series.channel_names() {
                let mut n = names.to_vec();
                n.push(format!("intensity{}", names.len()));
                series = series.with_channel_names(n)?;
            }
            Ok(Sample {
                id: s.id.clone(),
                series,
                target: s.target.clone(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        samples,
        task: data.task.clone(),
        normalization: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    #[serde(default = "default_input_len")]
    pub input_len: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    /// Channels to forecast; all channels when absent.
    #[serde(default)]
    pub targets: Option<Vec<usize>>,
}

fn default_input_len() -> usize {
    24
}

fn default_horizon() -> usize {
    1
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            input_len: default_input_len(),
            horizon: default_horizon(),
            targets: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WindowReport {
    pub windows: usize,
    /// Series shorter than `input_len + horizon`.
    pub skipped_series: usize,
    /// Windows dropped because a target cell was missing.
    pub skipped_windows: usize,
}

/// Sliding windows of `input_len` observations, each targeting the
/// observation `horizon` steps after the window.
///
/// Window times are shifted to start at 0 so every window shares the same
/// time scale; the window id is `<series_id>#<k>`.
pub fn make_forecast_windows<T: Scalar>(data: &Dataset<T>, spec: &WindowSpec) -> Result<(Dataset<T>, WindowReport)> {
    if spec.input_len < 2 || spec.horizon == 0 {
        return Err(Error::Validation("windows need input_len ≥ 2 and horizon ≥ 1".into()));
    }
    let d = data.dim().unwrap_or(0);
    let targets = spec.targets.clone().unwrap_or_else(|| (0..d).collect());
    if targets.is_empty() || targets.iter().any(|&c| c >= d.max(1)) {
        return Err(Error::Validation("forecast target channels out of range".into()));
    }
    let mut report = WindowReport::default();
    let mut samples = Vec::new();
    for s in &data.samples {
        let n = s.series.len();
        if n < spec.input_len + spec.horizon {
            report.skipped_series += 1;
            continue;
        }
        for k in 0..=n - spec.input_len - spec.horizon {
            let target_row = &s.series.values()[k + spec.input_len + spec.horizon - 1];
            let Some(y) = targets.iter().map(|&c| target_row[c]).collect::<Option<Vec<T>>>() else {
                report.skipped_windows += 1;
                continue;
            };
            let t0 = s.series.times()[k];
            let times = s.series.times()[k..k + spec.input_len].iter().map(|&t| t - t0).collect();
            let values = s.series.values()[k..k + spec.input_len].to_vec();
            samples.push(Sample {
                id: format!("{}#{k}", s.id),
                series: rebuild(&s.series, times, values)?,
                target: Some(Target::Values(y)),
            });
            report.windows += 1;
        }
    }
    let out = Dataset {
        samples,
        task: Task::Forecast {
            target_channels: targets,
        },
        normalization: data.normalization.clone(),
    };
    out.validate()?;
    Ok((out, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    #[serde(default)]
    pub seed: u64,
    /// Split each class separately (classification only).
    #[serde(default)]
    pub stratify: bool,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 || self.train <= 0.0 {
            return Err(Error::Validation(
                "split fractions must be non-negative, sum to 1, with a positive train share".into(),
            ));
        }
        Ok(())
    }
}

/// The three parts of a split.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits<T> {
    pub train: Dataset<T>,
    pub val: Dataset<T>,
    pub test: Dataset<T>,
}

fn partition_sizes(n: usize, spec: &SplitSpec) -> (usize, usize) {
    let val = (spec.val * n as f64).round() as usize;
    let test = ((spec.test * n as f64).round() as usize).min(n - val.min(n));
    (val.min(n), test)
}

/// Seeded shuffle into train/val/test, without normalization.
pub fn split_raw<T: Scalar>(data: &Dataset<T>, spec: &SplitSpec) -> Result<Splits<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let groups: Vec<Vec<usize>> = match (&data.task, spec.stratify) {
        (Task::Classify { classes }, true) => {
            let labels = data.labels().ok_or_else(|| Error::Validation("stratified split needs labels".into()))?;
            (0..*classes)
                .map(|c| (0..data.len()).filter(|&i| labels[i] == c).collect())
                .collect()
        }
        (_, true) => return Err(Error::Validation("stratified split needs a classification task".into())),
        _ => vec![(0..data.len()).collect()],
    };
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for mut g in groups {
        g.shuffle(&mut rng);
        let (nv, nt) = partition_sizes(g.len(), spec);
        va.extend_from_slice(&g[..nv]);
        te.extend_from_slice(&g[nv..nv + nt]);
        tr.extend_from_slice(&g[nv + nt..]);
    }
    for (name, part, frac) in [("train", &tr, spec.train), ("val", &va, spec.val), ("test", &te, spec.test)] {
        if frac > 0.0 && part.is_empty() {
            return Err(Error::Validation(format!("{name} split is empty")));
        }
    }
    let take = |idx: &[usize]| Dataset {
        samples: idx.iter().map(|&i| data.samples[i].clone()).collect(),
        task: data.task.clone(),
        normalization: data.normalization.clone(),
    };
    Ok(Splits {
        train: take(&tr),
        val: take(&va),
        test: take(&te),
    })
}

/// Split, fit z-score statistics on the train part and apply them to all parts.
pub fn split<T: Scalar>(data: &Dataset<T>, spec: &SplitSpec) -> Result<Splits<T>> {
    let raw = split_raw(data, spec)?;
    let provenance = format!("train split (seed {}, {} samples)", spec.seed, raw.train.len());
    let norm = Normalization::fit(&raw.train, &provenance)?;
    Ok(Splits {
        train: norm.apply(&raw.train)?,
        val: norm.apply(&raw.val)?,
        test: norm.apply(&raw.test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::synthetic::{ar1, sine_phase, Ar1Spec, SineSpec};
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use std::fs;

    fn dense(id: &str, times: &[f64], rows: &[&[f64]], target: Option<Target<f64>>) -> Sample<f64> {
        Sample {
            id: id.into(),
            series: TimeSeries::from_dense(times.to_vec(), rows.iter().map(|r| r.to_vec()).collect()).unwrap(),
            target,
        }
    }

    fn series_n(n: usize) -> Dataset<f64> {
        let times: Vec<f64> = (0..n).map(|k| k as f64).collect();
        let rows: Vec<Vec<f64>> = (0..n).map(|k| vec![k as f64 * 10.0, -(k as f64)]).collect();
        Dataset::new(
            vec![Sample {
                id: "a".into(),
                series: TimeSeries::from_dense(times, rows).unwrap(),
                target: None,
            }],
            Task::Unlabeled,
        )
        .unwrap()
    }

    #[test]
    fn load_single_series() {
        let dir = tempfile::tempdir().unwrap();
        let obs = dir.path().join("obs.csv");
        fs::write(&obs, "series_id,t,v1\nx,0.5,2\nx,0.0,1\n").unwrap();
        let ds: Dataset<f64> = load_csv(&obs, None).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.samples[0].series.times(), &[0.0, 0.5]);
        assert_eq!(ds.samples[0].series.values(), &[vec![Some(1.0)], vec![Some(2.0)]]);
    }

    #[test]
    fn load_matches_manual_construction() {
        let dir = tempfile::tempdir().unwrap();
        let obs = dir.path().join("obs.csv");
        let lab = dir.path().join("labels.csv");
        fs::write(
            &obs,
            "series_id,t,v1,v2\nb,0,1,\nb,1,2,3\na,0.0,0.5,0.25\na,2,,1\nb,0.5,1.5,2\nc,0,0,0\nc,1,1,1\na,1,1,0.75\n",
        )
        .unwrap();
        fs::write(&lab, "series_id,label\na,0\nb,2\nc,1\n").unwrap();
        let ds: Dataset<f64> = load_csv(&obs, Some(&lab)).unwrap();
        let names = vec!["v1".to_string(), "v2".to_string()];
        let mk = |id: &str, times: Vec<f64>, values: Vec<Vec<Option<f64>>>, label| Sample {
            id: id.to_string(),
            series: TimeSeries::new(times, values).unwrap().with_channel_names(names.clone()).unwrap(),
            target: Some(Target::Class(label)),
        };
        let expected = Dataset::new(
            vec![
                mk("b", vec![0.0, 0.5, 1.0], vec![vec![Some(1.0), None], vec![Some(1.5), Some(2.0)], vec![Some(2.0), Some(3.0)]], 2),
                mk("a", vec![0.0, 1.0, 2.0], vec![vec![Some(0.5), Some(0.25)], vec![Some(1.0), Some(0.75)], vec![None, Some(1.0)]], 0),
                mk("c", vec![0.0, 1.0], vec![vec![Some(0.0), Some(0.0)], vec![Some(1.0), Some(1.0)]], 1),
            ],
            Task::Classify { classes: 3 },
        )
        .unwrap();
        assert_eq!(ds, expected);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let obs = dir.path().join("obs.csv");
        let lab = dir.path().join("labels.csv");
        fs::write(&obs, "series_id,t,v1\nx,0,1\nx,0,2\n").unwrap();
        assert!(matches!(load_csv::<f64>(&obs, None), Err(Error::Format(_))));
        fs::write(&obs, "series_id,t,v1\nx,0,1\nx,1,2\ny,0,1\ny,1,1\n").unwrap();
        fs::write(&lab, "series_id,label\nx,1\n").unwrap();
        assert!(matches!(load_csv::<f64>(&obs, Some(&lab)), Err(Error::Format(_))));
        fs::write(&obs, "id,time,v1\nx,0,1\n").unwrap();
        assert!(matches!(load_csv::<f64>(&obs, None), Err(Error::Format(_))));
        fs::write(&obs, "series_id,t,v1\nx,0,abc\nx,1,2\n").unwrap();
        assert!(matches!(load_csv::<f64>(&obs, None), Err(Error::Format(_))));
    }

    #[test]
    fn write_read_round_trip_keeps_missing_cells() {
        let dir = tempfile::tempdir().unwrap();
        let obs = dir.path().join("obs.csv");
        let lab = dir.path().join("labels.csv");
        let series = TimeSeries::new(
            vec![0.0, 0.1 + 0.2, 1.0 / 3.0],
            vec![vec![Some(1.0), None], vec![None, Some(-2.5e-7)], vec![Some(std::f64::consts::PI), Some(4.0)]],
        )
        .unwrap()
        .with_channel_names(vec!["p".into(), "q".into()])
        .unwrap();
        let ds = Dataset::new(
            vec![
                Sample {
                    id: "s".into(),
                    series: series.clone(),
                    target: Some(Target::Values(vec![0.5, 0.1])),
                },
                Sample {
                    id: "u".into(),
                    series,
                    target: Some(Target::Values(vec![1.0, 2.0])),
                },
            ],
            Task::Forecast {
                target_channels: vec![0, 1],
            },
        )
        .unwrap();
        write_csv(&ds, &obs, Some(&lab)).unwrap();
        let back: Dataset<f64> = load_csv(&obs, Some(&lab)).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn dropping_examples() {
        let ds = series_n(10);
        assert_eq!(drop_observations(&ds, 0.0, 1, DropMode::Timestamps, ShortPolicy::Error).unwrap(), ds);
        for (rate, left) in [(0.3, 7), (0.5, 5), (0.7, 3)] {
            let d = drop_observations(&ds, rate, 1, DropMode::Timestamps, ShortPolicy::Error).unwrap();
            let s = &d.samples[0].series;
            assert_eq!(s.len(), left);
            assert_eq!(s.times()[0], 0.0);
            assert_eq!(s.times()[left - 1], 9.0);
            for (t, row) in s.times().iter().zip(s.values()) {
                assert_eq!(row[0], Some(t * 10.0));
            }
        }
        let a = drop_observations(&ds, 0.5, 9, DropMode::Timestamps, ShortPolicy::Error).unwrap();
        let b = drop_observations(&ds, 0.5, 9, DropMode::Timestamps, ShortPolicy::Error).unwrap();
        assert_eq!(a, b);
        let short = series_n(2);
        assert!(drop_observations(&series_n(3), 0.7, 0, DropMode::Timestamps, ShortPolicy::Error).is_err());
        assert!(drop_observations(&short, 0.5, 0, DropMode::Timestamps, ShortPolicy::Skip).unwrap().is_empty());
        assert!(drop_observations(&ds, 1.0, 0, DropMode::Timestamps, ShortPolicy::Error).is_err());
    }

    #[test]
    fn cell_dropping_keeps_channel_endpoints() {
        let ds = series_n(20);
        let d = drop_observations(&ds, 0.5, 3, DropMode::Cells, ShortPolicy::Error).unwrap();
        let s = &d.samples[0].series;
        for c in 0..2 {
            let (t, _) = s.channel(c);
            assert_eq!(t.len(), 10);
            assert_eq!(t[0], 0.0);
            assert_eq!(*t.last().unwrap(), 19.0);
        }
    }

    #[test]
    fn intensity_channel() {
        let ds = series_n(3);
        let once = add_observation_intensity(&ds).unwrap();
        assert_eq!(once.dim(), Some(3));
        let (_, v) = once.samples[0].series.channel(2);
        assert_eq!(v, vec![1.0, 2.0, 3.0]);
        let twice = add_observation_intensity(&once).unwrap();
        assert_eq!(twice.dim(), Some(4));
        assert_eq!(twice.samples[0].series.channel(3).1, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn window_counts_and_targets() {
        let spec = WindowSpec::default();
        let (w, r) = make_forecast_windows(&series_n(25), &spec).unwrap();
        assert_eq!((w.len(), r.windows), (1, 1));
        let (w, _) = make_forecast_windows(&series_n(100), &spec).unwrap();
        assert_eq!(w.len(), 76);
        let (_, r) = make_forecast_windows(&series_n(24), &spec).unwrap();
        assert_eq!((r.windows, r.skipped_series), (0, 1));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 60;
        let times: Vec<f64> = (0..n).map(|k| k as f64 * 0.5).collect();
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect();
        let src = Dataset::new(
            vec![Sample {
                id: "r".into(),
                series: TimeSeries::from_dense(times, rows.clone()).unwrap(),
                target: None,
            }],
            Task::Unlabeled,
        )
        .unwrap();
        let spec = WindowSpec {
            input_len: 10,
            horizon: 1,
            targets: Some(vec![2, 0]),
        };
        let (w, _) = make_forecast_windows(&src, &spec).unwrap();
        assert_eq!(w.len(), n - 10);
        for (k, s) in w.samples.iter().enumerate() {
            assert_eq!(s.target, Some(Target::Values(vec![rows[k + 10][2], rows[k + 10][0]])));
            assert_eq!(s.series.times()[0], 0.0);
            assert_eq!(s.series.values()[0][1], Some(rows[k][1]));
        }
    }

    fn labelled(n: usize, classes: usize) -> Dataset<f64> {
        let samples = (0..n)
            .map(|i| dense(&format!("s{i}"), &[0.0, 1.0], &[&[i as f64], &[1.0]], Some(Target::Class(i % classes))))
            .collect();
        Dataset::new(samples, Task::Classify { classes }).unwrap()
    }

    #[test]
    fn split_examples() {
        let ds = labelled(30, 3);
        let all = split_raw(&ds, &SplitSpec { train: 1.0, val: 0.0, test: 0.0, seed: 1, stratify: false }).unwrap();
        assert_eq!(all.train.len(), 30);
        assert!(all.val.is_empty() && all.test.is_empty());

        let spec = SplitSpec { train: 0.6, val: 0.2, test: 0.2, seed: 5, stratify: false };
        let s = split_raw(&ds, &spec).unwrap();
        let mut ids: Vec<String> = [&s.train, &s.val, &s.test]
            .iter()
            .flat_map(|d| d.samples.iter().map(|x| x.id.clone()))
            .collect();
        assert_eq!(ids.len(), 30);
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 30);
        assert_eq!(split_raw(&ds, &spec).unwrap(), s);

        assert!(matches!(
            split_raw(&labelled(2, 2), &SplitSpec { train: 0.8, val: 0.1, test: 0.1, seed: 0, stratify: false }),
            Err(Error::Validation(_))
        ));
        assert!(SplitSpec { train: 0.5, val: 0.2, test: 0.2, seed: 0, stratify: false }.validate().is_err());
    }

    #[test]
    fn stratified_split_preserves_ratios() {
        let samples = (0..57)
            .map(|i| {
                let label = if i < 40 { 0 } else if i < 50 { 1 } else { 2 };
                dense(&format!("s{i}"), &[0.0, 1.0], &[&[0.0], &[1.0]], Some(Target::Class(label)))
            })
            .collect();
        let ds = Dataset::new(samples, Task::Classify { classes: 3 }).unwrap();
        let spec = SplitSpec { train: 0.6, val: 0.2, test: 0.2, seed: 3, stratify: true };
        let s = split_raw(&ds, &spec).unwrap();
        for (part, frac) in [(&s.train, 0.6), (&s.val, 0.2), (&s.test, 0.2)] {
            let labels = part.labels().unwrap();
            for (c, total) in [(0, 40.0), (1, 10.0), (2, 7.0)] {
                let count = labels.iter().filter(|&&l| l == c).count() as f64;
                assert!((count - frac * total).abs() <= 1.0, "class {c}: {count} vs {}", frac * total);
            }
        }
    }

    #[test]
    fn normalization_is_fitted_on_train_only() {
        let ds: Dataset<f64> = sine_phase(&SineSpec::new(50, 3)).unwrap();
        let spec = SplitSpec { train: 0.6, val: 0.2, test: 0.2, seed: 1, stratify: true };
        let raw = split_raw(&ds, &spec).unwrap();
        let s = split(&ds, &spec).unwrap();
        let norm = Normalization::fit(&raw.train, "x").unwrap();
        for part in [&s.train, &s.val, &s.test] {
            let n = part.normalization.as_ref().unwrap();
            assert_eq!(n.mean, norm.mean);
            assert_eq!(n.std, norm.std);
            assert!(n.fitted_on.starts_with("train"));
        }
        let refit = Normalization::fit(&s.train, "x").unwrap();
        for (m, sd) in refit.mean.iter().zip(&refit.std) {
            assert!(m.abs() < 1e-12 && (sd - 1.0).abs() < 1e-12);
        }
        let v0 = raw.val.samples[0].series.values()[0][1].unwrap();
        let n0 = s.val.samples[0].series.values()[0][1].unwrap();
        assert!(((v0 - norm.mean[1]) / norm.std[1] - n0).abs() < 1e-15);
    }

    #[test]
    fn forecast_targets_use_source_channel_stats() {
        let raw: Dataset<f64> = ar1(&Ar1Spec::new(80, 1)).unwrap();
        let (w, _) = make_forecast_windows(&raw, &WindowSpec { input_len: 8, horizon: 1, targets: Some(vec![3]) }).unwrap();
        let norm = Normalization::fit(&w, "all").unwrap();
        let n = norm.apply(&w).unwrap();
        let (Some(Target::Values(a)), Some(Target::Values(b))) = (&w.samples[0].target, &n.samples[0].target) else {
            panic!("targets expected")
        };
        assert!(((a[0] - norm.mean[3]) / norm.std[3] - b[0]).abs() < 1e-15);
    }

    #[test]
    fn synthetic_generators() {
        let ds: Dataset<f64> = sine_phase(&SineSpec::new(40, 7)).unwrap();
        assert_eq!(ds.len(), 40);
        assert_eq!(ds.dim(), Some(3));
        for s in &ds.samples {
            assert!((18..=40).contains(&s.series.len()));
            assert!(s.series.times().iter().all(|t| (0.0..=1.0).contains(t)));
        }
        assert_eq!(ds, sine_phase(&SineSpec::new(40, 7)).unwrap());
        let a: Dataset<f64> = ar1(&Ar1Spec::new(100, 2)).unwrap();
        assert_eq!(a.dim(), Some(5));
        assert_eq!(a.samples[0].series.len(), 100);
        let ex = ds.examples(true).unwrap();
        assert_eq!(crate::path::ControlPath::channels(&ex[0].path), 4);
    }

    proptest! {
        #[test]
        fn dropping_never_alters_kept_values(n in 4usize..40, rate in prop::sample::select(vec![0.3, 0.5, 0.7]), seed in any::<u64>()) {
            let ds = series_n(n);
            if let Ok(d) = drop_observations(&ds, rate, seed, DropMode::Timestamps, ShortPolicy::Error) {
                let s = &d.samples[0].series;
                prop_assert_eq!(s.len(), n - drop_count(rate, n));
                prop_assert_eq!(s.times()[0], 0.0);
                prop_assert_eq!(s.times()[s.len() - 1], (n - 1) as f64);
                for (t, row) in s.times().iter().zip(s.values()) {
                    prop_assert_eq!(row[0], Some(t * 10.0));
                    prop_assert_eq!(row[1], Some(-t));
                }
            }
        }
    }
}
