//! Losses, gradients, alternating training and evaluation metrics.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Example, Target};
use crate::error::{Error, Result};
use crate::model::{softmax, AncdeModel, HeadMode, ParamGroup};
use crate::nn::{clip_global_norm, Adam, CdeFunc};
use crate::path::ControlPath;
use crate::scalar::{all_finite, Scalar};
use crate::solver::{adjoint_backward, check_control_domain, solve_with_breakpoints, time_grid, CdeField, SolverConfig};

const PROB_FLOOR: f64 = 1e-12;

/// `−log p[label]` with `p[label]` floored at `1e-12`.
pub fn loss_cross_entropy<T: Scalar>(probs: &[T], label: usize) -> Result<T> {
    let p = probs
        .get(label)
        .ok_or_else(|| Error::Validation(format!("label {label} out of range for {} classes", probs.len())))?;
    Ok(-p.max(T::lit(PROB_FLOOR)).ln())
}

/// Mean of squared componentwise differences.
pub fn loss_mse<T: Scalar>(pred: &[T], target: &[T]) -> Result<T> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Validation(format!(
            "prediction has {} values, target {}",
            pred.len(),
            target.len()
        )));
    }
    let n = T::from_usize_lossy(pred.len());
    Ok(pred.iter().zip(target).map(|(&p, &y)| (p - y) * (p - y)).sum::<T>() / n)
}

/// Loss of one raw head output and its gradient with respect to that output.
///
/// Classification applies softmax then cross-entropy (gradient `p − onehot`);
/// regression uses MSE (gradient `2(p − y)/n`).
pub fn loss_and_output_grad<T: Scalar>(head: HeadMode, raw: &[T], target: &Target<T>) -> Result<(T, Vec<T>)> {
    match (head, target) {
        (HeadMode::Classify { .. }, Target::Class(label)) => {
            let p = softmax(raw);
            let loss = loss_cross_entropy(&p, *label)?;
            let mut g = p;
            g[*label] -= T::one();
            Ok((loss, g))
        }
        (HeadMode::Regress { .. }, Target::Values(y)) => {
            let loss = loss_mse(raw, y)?;
            let scale = T::lit(2.0) / T::from_usize_lossy(y.len());
            Ok((loss, raw.iter().zip(y).map(|(&p, &t)| scale * (p - t)).collect()))
        }
        _ => Err(Error::Validation("target kind does not match the model head".into())),
    }
}

/// Loss of one example and its gradient over the whole flat parameter vector.
pub fn example_loss_and_grad<T: Scalar>(
    model: &AncdeModel<T>,
    example: &Example<T>,
    solver: &SolverConfig<T>,
) -> Result<(T, Vec<T>)> {
    let tape = model.forward_taped(&example.path, solver)?;
    let (loss, cot) = loss_and_output_grad(model.head_mode(), tape.raw_output(), &example.target)?;
    let grad = model.backward(&example.path, &tape, &cot)?;
    Ok((loss, grad))
}

/// Mean loss and mean gradient over a batch, all parameter groups.
///
/// Examples run in parallel; their results are summed in batch order, so
/// the outcome does not depend on thread scheduling.
pub fn batch_loss_and_grad<T: Scalar>(
    model: &AncdeModel<T>,
    batch: &[Example<T>],
    solver: &SolverConfig<T>,
) -> Result<(T, Vec<T>)> {
    let refs: Vec<&Example<T>> = batch.iter().collect();
    batch_refs_loss_and_grad(model, &refs, solver)
}

fn batch_refs_loss_and_grad<T: Scalar>(
    model: &AncdeModel<T>,
    batch: &[&Example<T>],
    solver: &SolverConfig<T>,
) -> Result<(T, Vec<T>)> {
    if batch.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let parts: Vec<Result<(T, Vec<T>)>> = batch.par_iter().map(|ex| example_loss_and_grad(model, ex, solver)).collect();
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); model.num_params()];
    for part in parts {
        let (l, g) = part?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += *b;
        }
    }
    let n = T::from_usize_lossy(batch.len());
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

/// Batch gradient restricted to one group: every other slot is exactly zero.
pub fn grads_backprop<T: Scalar>(
    model: &AncdeModel<T>,
    batch: &[Example<T>],
    phase: ParamGroup,
    solver: &SolverConfig<T>,
) -> Result<(T, Vec<T>)> {
    let (loss, mut grad) = batch_loss_and_grad(model, batch, solver)?;
    let keep = model.group_range(phase);
    for (i, g) in grad.iter_mut().enumerate() {
        if !keep.contains(&i) {
            *g = T::zero();
        }
    }
    Ok((loss, grad))
}

/// Continuous-adjoint gradient of a loss through a single CDE with a fixed
/// control. `loss_grad_at_t1` is `∂L/∂z(t1)`; returns `(∂L/∂θ, ∂L/∂z0)`.
pub fn grads_adjoint<T: Scalar, P: ControlPath<T>>(
    func: &CdeFunc<T>,
    control: &P,
    z0: &[T],
    loss_grad_at_t1: &[T],
    cfg: &SolverConfig<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    cfg.validate()?;
    if !cfg.method.is_fixed_step() {
        return Err(Error::Unsupported("the adjoint uses a fixed-step grid".into()));
    }
    let (t0, t1) = control.domain();
    check_control_domain(control, t0, t1)?;
    let field = CdeField::new(func, control)?;
    let breakpoints = control.breakpoints();
    let traj = solve_with_breakpoints(&field, z0, t0, t1, &[], &breakpoints, cfg)?;
    let grid = time_grid(t0, t1, &breakpoints, &[], cfg)?;
    let (gz0, gp) = adjoint_backward(&field, traj.last(), loss_grad_at_t1, &grid)?;
    if !all_finite(&gp) || !all_finite(&gz0) {
        return Err(Error::Numerical("adjoint produced non-finite gradients".into()));
    }
    Ok((gp, gz0))
}

/// Validation / evaluation metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "acc", alias = "accuracy")]
    Accuracy,
    #[serde(rename = "auc", alias = "aucroc")]
    AucRoc,
    #[serde(rename = "mse")]
    Mse,
    #[serde(rename = "mae")]
    Mae,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Self::Accuracy => "acc",
            Self::AucRoc => "auc",
            Self::Mse => "mse",
            Self::Mae => "mae",
        }
    }

    pub fn higher_is_better(self) -> bool {
        matches!(self, Self::Accuracy | Self::AucRoc)
    }

    /// Whether `candidate` strictly improves on `incumbent`.
    pub fn improves(self, candidate: f64, incumbent: f64) -> bool {
        if !candidate.is_finite() {
            return false;
        }
        if !incumbent.is_finite() {
            return true;
        }
        if self.higher_is_better() {
            candidate > incumbent
        } else {
            candidate < incumbent
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "acc" | "accuracy" => Ok(Self::Accuracy),
            "auc" | "aucroc" => Ok(Self::AucRoc),
            "mse" => Ok(Self::Mse),
            "mae" => Ok(Self::Mae),
            _ => Err(Error::Validation(format!("unknown metric `{s}`"))),
        }
    }
}

/// Fraction of predicted classes equal to the labels.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.len() != labels.len() || labels.is_empty() {
        return Err(Error::Validation("accuracy needs equally long, non-empty inputs".into()));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Area under the ROC curve: the probability that a random positive scores
/// above a random negative, ties counting ½ (Mann–Whitney with mid-ranks).
pub fn auc_roc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Validation("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numerical("NaN score".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUCROC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the mid-rank keeps everything an exact integer.
    let mut pos_rank_sum2 = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u64;
        pos_rank_sum2 += twice_mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as u64;
        i = j + 1;
    }
    let p = n_pos as u64;
    let twice_u = pos_rank_sum2 - p * (p + 1);
    Ok(twice_u as f64 / 2.0 / (n_pos as f64 * n_neg as f64))
}

fn check_regression(pred: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<usize> {
    if pred.len() != targets.len() || pred.is_empty() {
        return Err(Error::Validation("regression metric needs equally long, non-empty inputs".into()));
    }
    let mut n = 0;
    for (p, t) in pred.iter().zip(targets) {
        if p.len() != t.len() {
            return Err(Error::Validation("prediction and target widths differ".into()));
        }
        n += p.len();
    }
    Ok(n)
}

/// Mean squared error over every target component.
pub fn mse(pred: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    let n = check_regression(pred, targets)?;
    let s: f64 = pred.iter().zip(targets).flat_map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b))).sum();
    Ok(s / n as f64)
}

/// Mean absolute error over every target component.
pub fn mae(pred: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    let n = check_regression(pred, targets)?;
    let s: f64 = pred.iter().zip(targets).flat_map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b).abs())).sum();
    Ok(s / n as f64)
}

/// `counts[true][predicted]`.
pub fn confusion_matrix(predicted: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut m = vec![vec![0; classes]; classes];
    for (&p, &l) in predicted.iter().zip(labels) {
        if p >= classes || l >= classes {
            return Err(Error::Validation("class index out of range".into()));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Model predictions (probabilities or regression values) as `f64`.
pub fn predict_all<T: Scalar>(model: &AncdeModel<T>, data: &[Example<T>], solver: &SolverConfig<T>) -> Result<Vec<Vec<f64>>> {
    let out: Vec<Result<Vec<f64>>> = data
        .par_iter()
        .map(|ex| {
            let o = model.forward(&ex.path, solver)?;
            Ok(o.prediction.iter().map(|p| p.to_f64_lossy()).collect())
        })
        .collect();
    out.into_iter().collect()
}

/// A metric computed from precomputed predictions.
pub fn metric_from_predictions<T: Scalar>(preds: &[Vec<f64>], data: &[Example<T>], metric: Metric) -> Result<f64> {
    match metric {
        Metric::Accuracy | Metric::AucRoc => {
            let labels = data
                .iter()
                .map(|ex| match ex.target {
                    Target::Class(c) => Ok(c),
                    _ => Err(Error::Validation(format!("{metric} needs class labels"))),
                })
                .collect::<Result<Vec<_>>>()?;
            if metric == Metric::Accuracy {
                let predicted: Vec<usize> = preds.iter().map(|p| argmax(p)).collect();
                accuracy(&predicted, &labels)
            } else {
                if preds.iter().any(|p| p.len() != 2) {
                    return Err(Error::Unsupported("AUCROC is defined for binary classification".into()));
                }
                let scores: Vec<f64> = preds.iter().map(|p| p[1]).collect();
                let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
                auc_roc(&scores, &pos)
            }
        }
        Metric::Mse | Metric::Mae => {
            let targets = data
                .iter()
                .map(|ex| match &ex.target {
                    Target::Values(y) => Ok(y.iter().map(|v| v.to_f64_lossy()).collect()),
                    _ => Err(Error::Validation(format!("{metric} needs regression targets"))),
                })
                .collect::<Result<Vec<Vec<f64>>>>()?;
            if metric == Metric::Mse {
                mse(preds, &targets)
            } else {
                mae(preds, &targets)
            }
        }
    }
}

/// Evaluate `metric` of `model` on `data`.
pub fn evaluate<T: Scalar>(model: &AncdeModel<T>, data: &[Example<T>], metric: Metric, solver: &SolverConfig<T>) -> Result<f64> {
    let preds = predict_all(model, data, solver)?;
    metric_from_predictions(&preds, data, metric)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig<T> {
    /// Iterations of the others → f → g cycle; each phase is one epoch.
    pub max_iter: usize,
    pub batch_size: usize,
    pub lr_others: T,
    pub lr_f: T,
    pub lr_g: T,
    pub solver: SolverConfig<T>,
    pub metric: Metric,
    #[serde(default)]
    pub seed: u64,
    /// Global gradient-norm bound per step.
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// Record real wall-clock time in the log; off keeps logs reproducible.
    #[serde(default)]
    pub log_wall_time: bool,
}

fn default_clip() -> f64 {
    10.0
}

impl<T: Scalar> TrainConfig<T> {
    pub fn new(max_iter: usize, lr: T, metric: Metric) -> Self {
        Self {
            max_iter,
            batch_size: 32,
            lr_others: lr,
            lr_f: lr,
            lr_g: lr,
            solver: SolverConfig::default(),
            metric,
            seed: 0,
            clip_norm: default_clip(),
            log_wall_time: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be positive".into()));
        }
        for lr in [self.lr_others, self.lr_f, self.lr_g] {
            if !(lr > T::zero()) || !lr.is_finite() {
                return Err(Error::Validation("learning rates must be positive".into()));
            }
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Validation("clip_norm must be positive".into()));
        }
        self.solver.validate()?;
        if !self.solver.method.is_fixed_step() {
            return Err(Error::Unsupported("training needs a fixed-step solver".into()));
        }
        Ok(())
    }

    fn lr(&self, group: ParamGroup) -> T {
        match group {
            ParamGroup::Others => self.lr_others,
            ParamGroup::F => self.lr_f,
            ParamGroup::G => self.lr_g,
        }
    }
}

/// The best parameters seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct BestState<T> {
    pub params_f: Vec<T>,
    pub params_g: Vec<T>,
    pub params_others: Vec<T>,
    pub metric: f64,
    /// 0 for the initial parameters.
    pub iteration: usize,
    pub tau: T,
}

impl<T: Scalar> BestState<T> {
    fn capture(model: &AncdeModel<T>, metric: f64, iteration: usize) -> Self {
        Self {
            params_f: model.group_params(ParamGroup::F),
            params_g: model.group_params(ParamGroup::G),
            params_others: model.group_params(ParamGroup::Others),
            metric,
            iteration,
            tau: model.attention().tau,
        }
    }

    /// Load these parameters (and τ) into `model`.
    pub fn restore(&self, model: &mut AncdeModel<T>) -> Result<()> {
        model.set_group_params(ParamGroup::F, &self.params_f)?;
        model.set_group_params(ParamGroup::G, &self.params_g)?;
        model.set_group_params(ParamGroup::Others, &self.params_others)?;
        let mut a = *model.attention();
        a.tau = self.tau;
        model.set_attention(a)
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub loss_others: f64,
    pub loss_f: f64,
    pub loss_g: f64,
    pub val_metric: f64,
    pub tau: f64,
    pub wall_ms: u64,
}

pub const LOG_HEADER: &str = "iter,loss_others,loss_f,loss_g,val_metric,tau,wall_ms";

impl LogRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iter, self.loss_others, self.loss_f, self.loss_g, self.val_metric, self.tau, self.wall_ms
        )
    }
}

pub fn write_log_csv<W: Write>(mut out: W, rows: &[LogRow]) -> Result<()> {
    writeln!(out, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv_line())?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<T> {
    pub best: BestState<T>,
    pub log: Vec<LogRow>,
    /// Validation metric of the initial parameters.
    pub initial_metric: f64,
}

/// Training stopped early; carries what was achieved before the failure.
#[derive(Debug)]
pub struct TrainFailure<T> {
    pub error: Error,
    pub partial: Option<TrainOutcome<T>>,
}

impl<T> From<Error> for TrainFailure<T> {
    fn from(error: Error) -> Self {
        Self { error, partial: None }
    }
}

impl<T> fmt::Display for TrainFailure<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.error.fmt(f)
    }
}

/// One epoch of minibatch Adam steps on a single parameter group; returns the
/// mean pre-step loss. Parameters outside `group` are left untouched.
pub fn train_phase<T: Scalar>(
    model: &mut AncdeModel<T>,
    data: &[Example<T>],
    group: ParamGroup,
    opt: &mut Adam<T>,
    cfg: &TrainConfig<T>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let range = model.group_range(group);
    let mut total = 0.0;
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<&Example<T>> = chunk.iter().map(|&i| &data[i]).collect();
        let (loss, grad) = batch_refs_loss_and_grad(model, &batch, &cfg.solver)?;
        let loss = loss.to_f64_lossy();
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss in phase `{}`", group.name())));
        }
        total += loss * chunk.len() as f64;
        let mut g = grad[range.clone()].to_vec();
        if !all_finite(&g) {
            return Err(Error::Numerical(format!("non-finite gradient in phase `{}`", group.name())));
        }
        clip_global_norm(&mut g, T::lit(cfg.clip_norm));
        let mut p = model.group_params(group);
        opt.update(&mut p, &g, cfg.lr(group))?;
        model.set_group_params(group, &p)?;
    }
    Ok(total / data.len() as f64)
}

/// Alternating training: each iteration trains θ_others, then θ_f, then θ_g
/// (one epoch each, the other groups frozen), anneals τ, validates, and keeps
/// the best parameters. On return `model` holds the best parameters.
pub fn train_alternating<T: Scalar>(
    model: &mut AncdeModel<T>,
    train: &[Example<T>],
    val: &[Example<T>],
    cfg: &TrainConfig<T>,
) -> std::result::Result<TrainOutcome<T>, TrainFailure<T>> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Validation("training and validation sets must be non-empty".into()).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opts: Vec<Adam<T>> = ParamGroup::ORDER
        .iter()
        .map(|&g| Adam::new(model.group_range(g).len()))
        .collect();
    model.anneal_temperature(0);
    let initial_metric = evaluate(model, val, cfg.metric, &cfg.solver)?;
    let mut best = BestState::capture(model, initial_metric, 0);
    let mut log = Vec::with_capacity(cfg.max_iter);
    let start = Instant::now();

    for iter in 1..=cfg.max_iter {
        model.anneal_temperature(iter - 1);
        let mut losses = [0.0; 3];
        for (k, &group) in ParamGroup::ORDER.iter().enumerate() {
            match train_phase(model, train, group, &mut opts[k], cfg, &mut rng) {
                Ok(l) => losses[k] = l,
                Err(error) => {
                    best.restore(model)?;
                    return Err(TrainFailure {
                        error,
                        partial: Some(TrainOutcome {
                            best,
                            log,
                            initial_metric,
                        }),
                    });
                }
            }
        }
        let val_metric = evaluate(model, val, cfg.metric, &cfg.solver)?;
        if cfg.metric.improves(val_metric, best.metric) {
            best = BestState::capture(model, val_metric, iter);
        }
        log.push(LogRow {
            iter,
            loss_others: losses[0],
            loss_f: losses[1],
            loss_g: losses[2],
            val_metric,
            tau: model.attention().tau.to_f64_lossy(),
            wall_ms: if cfg.log_wall_time {
                start.elapsed().as_millis() as u64
            } else {
                0
            },
        });
    }
    best.restore(model)?;
    Ok(TrainOutcome {
        best,
        log,
        initial_metric,
    })
}
