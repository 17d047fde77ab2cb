//! Synthetic datasets with known structure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample, Target, Task};
use crate::error::{Error, Result};
use crate::path::TimeSeries;
use crate::scalar::Scalar;

/// Two-class phase discrimination: class 0 follows `sin(2πt)`, class 1
/// `sin(2πt + π/2)`, on random timestamps in `[0, 1]`.
///
/// Timestamps are uniform subject to a minimum spacing `min_gap`: a spline
/// through noisy values at nearly coincident times has slopes of order
/// noise/gap, which swamp the signal in the control path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SineSpec {
    pub samples: usize,
    #[serde(default = "three")]
    pub channels: usize,
    #[serde(default = "sine_noise")]
    pub noise: f64,
    #[serde(default = "min_len")]
    pub min_len: usize,
    #[serde(default = "max_len")]
    pub max_len: usize,
    #[serde(default = "min_gap")]
    pub min_gap: f64,
    #[serde(default)]
    pub seed: u64,
}

fn three() -> usize {
    3
}
fn sine_noise() -> f64 {
    0.1
}
fn min_len() -> usize {
    20
}
fn max_len() -> usize {
    40
}
fn min_gap() -> f64 {
    0.01
}

impl SineSpec {
    pub fn new(samples: usize, seed: u64) -> Self {
        Self {
            samples,
            channels: 3,
            noise: 0.1,
            min_len: 20,
            max_len: 40,
            min_gap: min_gap(),
            seed,
        }
    }
}

fn normal(sd: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, sd).map_err(|e| Error::Validation(format!("noise level: {e}")))
}

/// Labels alternate 0, 1, 0, … so the classes are balanced.
pub fn sine_phase<T: Scalar>(spec: &SineSpec) -> Result<Dataset<T>> {
    let slack = 1.0 - (spec.max_len as f64 - 1.0) * spec.min_gap;
    if spec.min_len < 2 || spec.max_len < spec.min_len || spec.channels == 0 || !(spec.min_gap >= 0.0) || !(slack > 0.0) {
        return Err(Error::Validation("invalid sine dataset spec".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = normal(spec.noise)?;
    let samples = (0..spec.samples)
        .map(|i| {
            let label = i % 2;
            let phase = if label == 0 { 0.0 } else { std::f64::consts::FRAC_PI_2 };
            let n = rng.random_range(spec.min_len..=spec.max_len);
            // sorted uniforms on the shrunk interval, then spread by the gap:
            // uniform over all configurations with spacing >= min_gap
            let span = 1.0 - (n as f64 - 1.0) * spec.min_gap;
            let mut times: Vec<f64> = (0..n).map(|_| span * rng.random::<f64>()).collect();
            times.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            for (k, t) in times.iter_mut().enumerate() {
                *t += k as f64 * spec.min_gap;
            }
            times.dedup();
            let rows = times
                .iter()
                .map(|&t| {
                    let clean = (2.0 * std::f64::consts::PI * t + phase).sin();
                    (0..spec.channels).map(|_| T::lit(clean + noise.sample(&mut rng))).collect()
                })
                .collect();
            Ok(Sample {
                id: format!("s{i}"),
                series: TimeSeries::from_dense(times.into_iter().map(T::lit).collect(), rows)?,
                target: Some(Target::Class(label)),
            })
        })
        .collect::<Result<_>>()?;
    Dataset::new(samples, Task::Classify { classes: 2 })
}

/// A vector AR(1) process `x_{k+1} = Φ x_k + ε` observed with additive noise
/// on a regular grid of spacing `dt`. `Φ` has `phi` on the diagonal and
/// `coupling` on the first sub-diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ar1Spec {
    #[serde(default = "five")]
    pub channels: usize,
    pub length: usize,
    #[serde(default = "one")]
    pub series: usize,
    #[serde(default = "phi")]
    pub phi: f64,
    #[serde(default = "coupling")]
    pub coupling: f64,
    #[serde(default = "innovation")]
    pub innovation: f64,
    #[serde(default = "obs_noise")]
    pub obs_noise: f64,
    #[serde(default = "dt")]
    pub dt: f64,
    #[serde(default)]
    pub seed: u64,
}

fn five() -> usize {
    5
}
fn one() -> usize {
    1
}
fn phi() -> f64 {
    0.8
}
fn coupling() -> f64 {
    0.15
}
fn innovation() -> f64 {
    0.3
}
fn obs_noise() -> f64 {
    0.05
}
fn dt() -> f64 {
    0.05
}

impl Ar1Spec {
    pub fn new(length: usize, seed: u64) -> Self {
        Self {
            channels: 5,
            length,
            series: 1,
            phi: phi(),
            coupling: coupling(),
            innovation: innovation(),
            obs_noise: obs_noise(),
            dt: dt(),
            seed,
        }
    }
}

/// Unlabelled series; pair with `make_forecast_windows`.
pub fn ar1<T: Scalar>(spec: &Ar1Spec) -> Result<Dataset<T>> {
    if spec.length < 2 || spec.channels == 0 || !(spec.dt > 0.0) {
        return Err(Error::Validation("invalid AR(1) spec".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let eps = normal(spec.innovation)?;
    let obs = normal(spec.obs_noise)?;
    let d = spec.channels;
    let burn_in = 50;
    let samples = (0..spec.series)
        .map(|s| {
            let mut x = vec![0.0; d];
            let mut rows = Vec::with_capacity(spec.length);
            for k in 0..burn_in + spec.length {
                let prev = x.clone();
                for i in 0..d {
                    let cross = if i > 0 { spec.coupling * prev[i - 1] } else { 0.0 };
                    x[i] = spec.phi * prev[i] + cross + eps.sample(&mut rng);
                }
                if k >= burn_in {
                    rows.push(x.iter().map(|&v| T::lit(v + obs.sample(&mut rng))).collect());
                }
            }
            let times = (0..spec.length).map(|k| T::lit(k as f64 * spec.dt)).collect();
            Ok(Sample {
                id: format!("ar{s}"),
                series: TimeSeries::from_dense(times, rows)?,
                target: None,
            })
        })
        .collect::<Result<_>>()?;
    Dataset::new(samples, Task::Unlabeled)
}
