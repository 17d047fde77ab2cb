use std::fs;
use std::path::{Path, PathBuf};

use ancde::data::{load_csv, Dataset, Example, Normalization, Target, Task};
use ancde::model::{uniform_grid, write_attention_csv, AncdeModel, Gate, ModelConfig, ParamGroup};
use ancde::nn::checkpoint;
use ancde::path::{fit_natural_cubic_spline, ControlPath};
use ancde::solver::{solve_grid_with_tape, time_grid, CdeField, SolverConfig};
use ancde::train::{
    argmax, confusion_matrix, grads_adjoint, loss_and_output_grad, metric_from_predictions, predict_all,
    train_alternating, write_log_csv, LogRow, Metric, TrainConfig, TrainOutcome,
};
use serde::{Deserialize, Serialize};

use crate::config::{self, Loaded};
use crate::pipeline::{build_model, default_metric, prepare, stamp, write_split, write_stamped};
use crate::CliError;

/// Sidecar of `model.bin`: everything needed to rebuild and feed the model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub tau: f64,
    pub task: Task,
    pub normalization: Normalization,
    pub time_augment: bool,
    pub intensity: bool,
    pub solver: SolverConfig<f64>,
    pub metric: Metric,
    pub best_iteration: usize,
    pub best_metric: f64,
    pub config_sha256: String,
    pub seed: u64,
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    status: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    metric: Metric,
    best_metric: Option<f64>,
    best_iteration: Option<usize>,
    initial_metric: Option<f64>,
    iterations: usize,
    train_metric: Option<f64>,
    val_metric: Option<f64>,
    test_metric: Option<f64>,
    samples: [usize; 3],
    parameters: usize,
    seed: u64,
    config_sha256: &'a str,
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(value).map_err(ancde::Error::from)? + "\n")?;
    Ok(())
}

fn write_log(path: &Path, stamp_line: &str, rows: &[LogRow]) -> Result<(), CliError> {
    let mut buf = Vec::new();
    write_log_csv(&mut buf, rows)?;
    write_stamped(path, stamp_line, &String::from_utf8_lossy(&buf))
}

fn score(model: &AncdeModel<f64>, data: &[Example<f64>], metric: Metric, solver: &SolverConfig<f64>) -> Option<f64> {
    if data.is_empty() {
        return None;
    }
    predict_all(model, data, solver)
        .and_then(|p| metric_from_predictions(&p, data, metric))
        .ok()
}

pub fn train(config_path: &Path) -> Result<(), CliError> {
    let Loaded { config: cfg, hash, seed } = config::load(config_path)?;
    let prep = prepare(&cfg, seed)?;
    let mut model = build_model(&cfg, prep.path_dim, &prep.task, seed)?;
    let metric = cfg.train.metric.unwrap_or_else(|| default_metric(&prep.task));
    if metric == Metric::AucRoc && prep.task != (Task::Classify { classes: 2 }) {
        return Err(CliError::config("auc needs a two-class task".into()));
    }
    if matches!(prep.task, Task::Forecast { .. }) && !matches!(metric, Metric::Mse | Metric::Mae) {
        return Err(CliError::config("forecasting is scored with mse or mae".into()));
    }
    let solver = cfg.solver.build();
    let t = &cfg.train;
    let tc = TrainConfig {
        max_iter: t.epochs,
        batch_size: t.batch_size,
        lr_others: t.lr_others.unwrap_or(t.lr),
        lr_f: t.lr_f.unwrap_or(t.lr),
        lr_g: t.lr_g.unwrap_or(t.lr),
        solver,
        metric,
        seed,
        clip_norm: t.clip_norm,
        log_wall_time: t.log_wall_time,
    };
    tc.validate()?;

    let out = &cfg.output_dir;
    let splits_dir = out.join("splits");
    fs::create_dir_all(&splits_dir)?;
    let stamp_line = stamp(&hash, seed);
    write_split(&splits_dir, "train", &prep.raw.train, &stamp_line)?;
    write_split(&splits_dir, "val", &prep.raw.val, &stamp_line)?;
    write_split(&splits_dir, "test", &prep.raw.test, &stamp_line)?;

    let sizes = [prep.train.len(), prep.val.len(), prep.test.len()];
    let params = model.num_params();
    let summary = |status, error, outcome: Option<&TrainOutcome<f64>>, scores: [Option<f64>; 3]| Summary {
        status,
        error,
        metric,
        best_metric: outcome.map(|o| o.best.metric),
        best_iteration: outcome.map(|o| o.best.iteration),
        initial_metric: outcome.map(|o| o.initial_metric),
        iterations: outcome.map_or(0, |o| o.log.len()),
        train_metric: scores[0],
        val_metric: scores[1],
        test_metric: scores[2],
        samples: sizes,
        parameters: params,
        seed,
        config_sha256: &hash,
    };

    let outcome = match train_alternating(&mut model, &prep.train, &prep.val, &tc) {
        Ok(o) => o,
        Err(failure) => {
            let rows = failure.partial.as_ref().map_or(&[][..], |p| &p.log[..]);
            write_log(&out.join("train_log.csv"), &stamp_line, rows)?;
            let s = summary("aborted", Some(failure.error.to_string()), failure.partial.as_ref(), [None; 3]);
            write_json(&out.join("summary.json"), &s)?;
            return Err(failure.error.into());
        }
    };

    let meta = CheckpointMeta {
        model: model.config().clone(),
        tau: model.attention().tau,
        task: prep.task.clone(),
        normalization: prep.norm.clone(),
        time_augment: cfg.data.time_augment,
        intensity: cfg.data.intensity,
        solver,
        metric,
        best_iteration: outcome.best.iteration,
        best_metric: outcome.best.metric,
        config_sha256: hash.clone(),
        seed,
    };
    checkpoint::save(&out.join("model"), &model.flat_params_f64(), &meta)?;
    write_log(&out.join("train_log.csv"), &stamp_line, &outcome.log)?;
    let scores = [
        score(&model, &prep.train, metric, &solver),
        score(&model, &prep.val, metric, &solver),
        score(&model, &prep.test, metric, &solver),
    ];
    write_json(&out.join("summary.json"), &summary("ok", None, Some(&outcome), scores))?;
    println!(
        "best {metric} {} at iteration {} (test {}); artifacts in {}",
        outcome.best.metric,
        outcome.best.iteration,
        scores[2].map_or("n/a".to_string(), |v| v.to_string()),
        out.display()
    );
    Ok(())
}

/// `run/model`, `run/model.bin` and `run/model.json` all name the same checkpoint.
fn checkpoint_stem(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("bin" | "json") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

fn load_checkpoint(path: &Path) -> Result<(AncdeModel<f64>, CheckpointMeta), CliError> {
    let stem = checkpoint_stem(path);
    let (params, meta): (Vec<f64>, CheckpointMeta) = checkpoint::load(&stem)
        .map_err(|e| CliError::config(format!("cannot load checkpoint {}: {e}", stem.display())))?;
    let mut model = AncdeModel::from_parts(meta.model.clone(), &params)?;
    let mut attn = *model.attention();
    attn.tau = meta.tau;
    model.set_attention(attn)?;
    Ok((model, meta))
}

/// Labels default to the `<stem>_labels.csv` file written next to split observations.
fn labels_for(data: &Path, explicit: Option<&Path>) -> Option<PathBuf> {
    if let Some(p) = explicit {
        return Some(p.to_path_buf());
    }
    let stem = data.file_stem()?.to_str()?;
    let sibling = data.with_file_name(format!("{stem}_labels.csv"));
    sibling.exists().then_some(sibling)
}

/// Load data for a checkpoint, check its shape and normalize it.
fn load_for(meta: &CheckpointMeta, data: &Path, labels: Option<&Path>) -> Result<Dataset<f64>, CliError> {
    let mut ds: Dataset<f64> = load_csv(data, labels)?;
    let want = meta.normalization.mean.len();
    if let Some(d) = ds.dim() {
        if d != want {
            return Err(CliError::config(format!(
                "data has {d} channels but the checkpoint expects {want}{}",
                if meta.intensity { " (including the intensity channel)" } else { "" }
            )));
        }
    }
    if ds.task != Task::Unlabeled {
        let compatible = matches!(
            (&ds.task, &meta.task),
            (Task::Classify { .. }, Task::Classify { .. })
        ) || matches!((&ds.task, &meta.task), (Task::Forecast { target_channels: a }, Task::Forecast { target_channels: b }) if a.len() == b.len());
        if !compatible {
            return Err(CliError::config("label file does not match the checkpoint's task".into()));
        }
        ds.task = meta.task.clone();
        ds.validate()?;
    }
    Ok(meta.normalization.apply(&ds)?)
}

#[derive(Debug, Serialize)]
struct EvalReport {
    metric: Metric,
    value: f64,
    samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    class_counts: Option<Vec<usize>>,
    /// `confusion[true][predicted]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    confusion: Option<Vec<Vec<usize>>>,
    checkpoint_config_sha256: String,
    seed: u64,
}

pub fn eval(ckpt: &Path, data: &Path, labels: Option<&Path>, metric: Metric, report: Option<&Path>) -> Result<(), CliError> {
    let (model, meta) = load_checkpoint(ckpt)?;
    let labels = labels_for(data, labels);
    if labels.is_none() {
        return Err(CliError::config(format!("no labels found for {}", data.display())));
    }
    let ds = load_for(&meta, data, labels.as_deref())?;
    let examples = ds.examples(meta.time_augment)?;
    let preds = predict_all(&model, &examples, &meta.solver)?;
    let value = metric_from_predictions(&preds, &examples, metric)?;
    let (class_counts, confusion) = match meta.task {
        Task::Classify { classes } => {
            let truth: Vec<usize> = examples
                .iter()
                .map(|e| match e.target {
                    Target::Class(c) => c,
                    Target::Values(_) => unreachable!("validated classification targets"),
                })
                .collect();
            let predicted: Vec<usize> = preds.iter().map(|p| argmax(p)).collect();
            let mut counts = vec![0; classes];
            truth.iter().for_each(|&c| counts[c] += 1);
            (Some(counts), Some(confusion_matrix(&predicted, &truth, classes)?))
        }
        _ => (None, None),
    };
    let rep = EvalReport {
        metric,
        value,
        samples: examples.len(),
        class_counts,
        confusion,
        checkpoint_config_sha256: meta.config_sha256.clone(),
        seed: meta.seed,
    };
    println!("{metric} {value}");
    let json = serde_json::to_string_pretty(&rep).map_err(ancde::Error::from)?;
    match report {
        Some(p) => fs::write(p, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct AttentionManifest {
    variant: String,
    grid: usize,
    /// One entry per sample, in input order.
    files: Vec<AttentionFile>,
    config_sha256: String,
    seed: u64,
}

#[derive(Debug, Serialize)]
struct AttentionFile {
    id: String,
    file: String,
    /// Mean attention per column over the grid.
    mean: Vec<f64>,
}

fn file_safe(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

pub fn attn_export(ckpt: &Path, data: &Path, grid: usize, out: Option<&Path>) -> Result<(), CliError> {
    if grid == 0 {
        return Err(CliError::config("--grid must be at least 1".into()));
    }
    let (model, meta) = load_checkpoint(ckpt)?;
    let ds = load_for(&meta, data, None)?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| {
        checkpoint_stem(ckpt).parent().unwrap_or(Path::new(".")).join("attention")
    });
    fs::create_dir_all(&out)?;
    let stamp_line = stamp(&meta.config_sha256, meta.seed);
    let mut files = Vec::new();
    for (i, s) in ds.samples.iter().enumerate() {
        let path = fit_natural_cubic_spline(&s.series, meta.time_augment)?;
        let (t0, t1) = path.domain();
        let times = uniform_grid(t0, t1, grid);
        let rows = model.export_attention(&path, &times, &meta.solver)?;
        let mut buf = Vec::new();
        write_attention_csv(&mut buf, &times, &rows)?;
        let name = format!("{i:04}_{}.csv", file_safe(&s.id));
        write_stamped(&out.join(&name), &stamp_line, &String::from_utf8_lossy(&buf))?;
        let cols = rows.first().map_or(0, Vec::len);
        let mean = (0..cols)
            .map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / rows.len() as f64)
            .collect();
        files.push(AttentionFile {
            id: s.id.clone(),
            file: name,
            mean,
        });
    }
    let manifest = AttentionManifest {
        variant: meta.model.variant.to_string(),
        grid,
        files,
        config_sha256: meta.config_sha256.clone(),
        seed: meta.seed,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    println!("wrote {} attention files to {}", manifest.files.len(), out.display());
    Ok(())
}

fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Finite-difference checks on the configured model and the first training samples.
pub fn gradcheck(config_path: &Path) -> Result<bool, CliError> {
    let Loaded { config: cfg, hash, seed } = config::load(config_path)?;
    let prep = prepare(&cfg, seed)?;
    let model = build_model(&cfg, prep.path_dim, &prep.task, seed)?;
    let solver = cfg.solver.build();
    let head = model.head_mode();
    let variant = model.config().variant;
    let soft = variant.gate() == Gate::Soft;
    let n = model.num_params();
    // Rounded gates are flat almost everywhere, so only θ_g is checked for them.
    let range = if soft { 0..n } else { model.group_range(ParamGroup::G) };
    let coords: Vec<usize> = {
        let len = range.len();
        let k = len.min(64);
        (0..k).map(|i| range.start + i * len / k).collect()
    };
    let eps = 1e-5;
    let (mut e2e, mut attn, mut adjoint) = (0.0f64, None::<f64>, 0.0f64);
    println!("gradcheck: {variant}, {n} parameters, config {hash}, seed {seed}");
    for ex in prep.train.iter().take(2) {
        let tape = model.forward_taped(&ex.path, &solver)?;
        let (_, cot) = loss_and_output_grad(head, tape.raw_output(), &ex.target)?;
        let grad = model.backward(&ex.path, &tape, &cot)?;
        let base = model.flat_params();
        let mut probe = model.clone();
        let mut loss_at = |p: &[f64]| -> Result<f64, CliError> {
            probe.set_flat_params(p)?;
            let raw = probe.forward(&ex.path, &solver)?.raw;
            Ok(loss_and_output_grad(head, &raw, &ex.target)?.0)
        };
        let mut fd = Vec::with_capacity(coords.len());
        for &i in &coords {
            let mut p = base.clone();
            p[i] = base[i] + eps;
            let up = loss_at(&p)?;
            p[i] = base[i] - eps;
            let down = loss_at(&p)?;
            fd.push((up - down) / (2.0 * eps));
        }
        let analytic: Vec<f64> = coords.iter().map(|&i| grad[i]).collect();
        e2e = e2e.max(max_rel_err(&analytic, &fd));

        if soft {
            let (t0, t1) = ex.path.domain();
            let mut worst = 0.0f64;
            for k in 1..=10 {
                let t = t0 + (t1 - t0) * (k as f64 - 0.5) / 10.0;
                let h_eps = 1e-6 * (t1 - t0);
                let traj = model.bottom_forward(&ex.path, &[t - h_eps, t, t + h_eps], &solver)?;
                let y = |j: usize| model.attended_value(&ex.path.eval(traj.eval_times[j])?, &traj.states[j]);
                let (lo, hi) = (y(1)?, y(3)?);
                let h = &traj.states[2];
                let dh = model.bottom().apply(h, &ex.path.eval_derivative(t)?)?;
                let dy = model.y_derivative(&ex.path, h, &dh, t)?;
                for j in 0..dy.len() {
                    worst = worst.max(((hi[j] - lo[j]) / (2.0 * h_eps) - dy[j]).abs());
                }
            }
            attn = Some(attn.unwrap_or(0.0).max(worst));
        }

        let x0 = ex.path.eval(ex.path.domain().0)?;
        let z0 = model.z0_encoder().apply(&x0)?;
        let ones = vec![1.0; z0.len()];
        let (t0, t1) = ex.path.domain();
        // The continuous adjoint only agrees with backprop on a fine grid.
        let fine = SolverConfig::rk4(0.001 * (t1 - t0));
        let (gp, gz) = grads_adjoint(model.top(), &ex.path, &z0, &ones, &fine)?;
        let field = CdeField::new(model.top(), &ex.path)?;
        let grid = time_grid(t0, t1, &ex.path.breakpoints(), &[], &fine)?;
        let tape = solve_grid_with_tape(&field, &z0, &grid, fine.method)?;
        let (bz, bp) = tape.backward(&field, &ones)?;
        let rel = |a: &[f64], b: &[f64]| {
            let num = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            num / b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12)
        };
        adjoint = adjoint.max(rel(&gp, &bp)).max(rel(&gz, &bz));
    }
    let scope = if soft { "all groups" } else { "θ_g" };
    println!("end-to-end gradient vs finite differences ({} coordinates, {scope}): max relative error {e2e:.3e}", coords.len());
    match attn {
        Some(a) => println!("attended path derivative vs finite differences: max abs error {a:.3e}"),
        None => println!("attended path derivative: skipped for rounded gates"),
    }
    println!("adjoint vs backprop on the top CDE (frozen control, RK4 h = 0.1% of the span): relative error {adjoint:.3e}");
    let ok = e2e < 1e-4 && attn.is_none_or(|a| a < 1e-4) && adjoint < 1e-3;
    println!("{}", if ok { "gradcheck passed" } else { "gradcheck FAILED" });
    Ok(ok)
}
