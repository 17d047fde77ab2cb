//! The attentive dual-CDE model.
//!
//! A bottom CDE `dh = f(h) dX` yields attention `a(t)` (a scalar through FC1
//! for time-wise variants, `σ(h)` per channel for element-wise ones). The
//! attended path `Y = a ⊗ X` drives the top CDE `dz = g(z) dY`, and a linear
//! head reads `z(t1)`. Both CDEs are integrated together as one stacked state
//! `s = [h, z]`, so `dh/dt` inside `dY/dt` is exact at every solver stage.

use std::fmt;
use std::io::Write;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, CdeFunc, GradTape, LayerSpec, Mlp};
use crate::path::ControlPath;
use crate::scalar::{axpy, Scalar};
use crate::solver::{
    check_control_domain, solve_cde, solve_grid_with_tape, solve_with_breakpoints, time_grid, DifferentiableField,
    SolverConfig, SolverTape, Trajectory, VectorField,
};

/// How the attention gate is formed from its pre-activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Soft,
    Hard,
    Ste,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionVariant {
    #[serde(rename = "SOFT-TIME")]
    SoftTime,
    #[serde(rename = "HARD-TIME")]
    HardTime,
    #[serde(rename = "STE-TIME")]
    SteTime,
    #[serde(rename = "SOFT-ELEM")]
    SoftElem,
    #[serde(rename = "HARD-ELEM")]
    HardElem,
    #[serde(rename = "STE-ELEM")]
    SteElem,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 6] = [
        Self::SoftTime,
        Self::HardTime,
        Self::SteTime,
        Self::SoftElem,
        Self::HardElem,
        Self::SteElem,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::SoftTime => "SOFT-TIME",
            Self::HardTime => "HARD-TIME",
            Self::SteTime => "STE-TIME",
            Self::SoftElem => "SOFT-ELEM",
            Self::HardElem => "HARD-ELEM",
            Self::SteElem => "STE-ELEM",
        }
    }

    pub fn is_elementwise(self) -> bool {
        matches!(self, Self::SoftElem | Self::HardElem | Self::SteElem)
    }

    pub fn gate(self) -> Gate {
        match self {
            Self::SoftTime | Self::SoftElem => Gate::Soft,
            Self::HardTime | Self::HardElem => Gate::Hard,
            Self::SteTime | Self::SteElem => Gate::Ste,
        }
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Validation(format!("unknown attention variant `{s}`")))
    }
}

/// Whether attention is queried during training (surrogate slopes wanted) or not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    Train,
    Eval,
}

/// Attention values and, in training mode, the slopes used by the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionValue<T> {
    pub values: Vec<T>,
    /// `∂a/∂(pre-activation)`: the sigmoid slope for SOFT and HARD, the
    /// tempered slope `τ σ(τx)(1−σ(τx))` for STE. Empty in eval mode.
    pub slopes: Vec<T>,
}

/// Attention variant plus the STE temperature state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionSpec<T> {
    pub variant: AttentionVariant,
    pub tau: T,
    pub tau_increment: T,
}

impl<T: Scalar> AttentionSpec<T> {
    pub fn new(variant: AttentionVariant) -> Self {
        Self {
            variant,
            tau: T::one(),
            tau_increment: T::lit(0.12),
        }
    }

    /// Temperature after `epoch` completed epochs: `1 + increment · epoch`.
    pub fn anneal_temperature(&self, epoch: usize) -> Self {
        Self {
            tau: T::one() + self.tau_increment * T::from_usize_lossy(epoch),
            ..*self
        }
    }

    /// Gate value and surrogate slope for one pre-activation.
    pub fn gate(&self, x: T) -> (T, T) {
        match self.variant.gate() {
            Gate::Soft => {
                let s = sigmoid(x);
                (s, s * (T::one() - s))
            }
            Gate::Hard => {
                let s = sigmoid(x);
                (s.round(), s * (T::one() - s))
            }
            Gate::Ste => {
                let s = sigmoid(self.tau * x);
                (s.round(), self.tau * (s * (T::one() - s)))
            }
        }
    }

    fn gate_all(&self, pre: &[T]) -> (Vec<T>, Vec<T>) {
        pre.iter().map(|&p| self.gate(p)).unzip()
    }
}

/// Output head: softmax classification or raw linear regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum HeadMode {
    Classify { classes: usize },
    Regress { targets: usize },
}

impl HeadMode {
    pub fn out_dim(self) -> usize {
        match self {
            Self::Classify { classes } => classes,
            Self::Regress { targets } => targets,
        }
    }
}

/// Everything needed to rebuild a model's shape and initial parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub path_dim: usize,
    pub bottom_hidden: usize,
    pub top_hidden: usize,
    pub variant: AttentionVariant,
    pub bottom_layers: Vec<LayerSpec>,
    pub top_layers: Vec<LayerSpec>,
    pub head: HeadMode,
    #[serde(default = "default_tau_increment")]
    pub tau_increment: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_tau_increment() -> f64 {
    0.12
}

/// Disjoint parameter groups updated in turn by alternating training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    /// Encoders, FC1 and the head.
    Others,
    /// The bottom CDE function.
    F,
    /// The top CDE function.
    G,
}

impl ParamGroup {
    /// Update order within one iteration.
    pub const ORDER: [ParamGroup; 3] = [Self::Others, Self::F, Self::G];

    pub fn name(self) -> &'static str {
        match self {
            Self::Others => "others",
            Self::F => "f",
            Self::G => "g",
        }
    }
}

/// Offsets of each component in the flat parameter vector
/// `[f | g | h0_encoder | z0_encoder | fc1 | head]`.
#[derive(Debug, Clone)]
struct Layout {
    f: Range<usize>,
    g: Range<usize>,
    h0: Range<usize>,
    z0: Range<usize>,
    fc1: Range<usize>,
    head: Range<usize>,
}

fn next_range(start: &mut usize, n: usize) -> Range<usize> {
    let r = *start..*start + n;
    *start += n;
    r
}

#[derive(Debug, Clone, PartialEq)]
pub struct AncdeModel<T> {
    config: ModelConfig,
    bottom: CdeFunc<T>,
    top: CdeFunc<T>,
    h0_encoder: Mlp<T>,
    z0_encoder: Mlp<T>,
    fc1: Option<Mlp<T>>,
    head: Mlp<T>,
    attn: AttentionSpec<T>,
}

/// Final state and prediction of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput<T> {
    pub z_t1: Vec<T>,
    /// Raw head output: logits or regression values.
    pub raw: Vec<T>,
    /// Class probabilities, or the regression values again.
    pub prediction: Vec<T>,
}

struct InitState<T> {
    x0: Vec<T>,
    h0_tape: GradTape<T>,
    fc1_tape: Option<GradTape<T>>,
    slopes: Vec<T>,
    z0_tape: GradTape<T>,
    s0: Vec<T>,
}

/// Intermediates of a taped forward pass, consumed by [`AncdeModel::backward`].
pub struct ModelTape<T> {
    init: InitState<T>,
    solver: SolverTape<T>,
    head: GradTape<T>,
    raw: Vec<T>,
}

impl<T: Scalar> ModelTape<T> {
    pub fn raw_output(&self) -> &[T] {
        &self.raw
    }

    pub fn final_state(&self) -> &[T] {
        self.solver.final_state()
    }
}

impl<T: Scalar> AncdeModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let d = config.path_dim;
        let (hf, hg) = (config.bottom_hidden, config.top_hidden);
        if d == 0 || hf == 0 || hg == 0 {
            return Err(Error::Validation("model dimensions must be positive".into()));
        }
        if config.variant.is_elementwise() && hf != d {
            return Err(Error::Validation(format!(
                "element-wise attention needs bottom hidden width = path dim ({d}), got {hf}"
            )));
        }
        match config.head {
            HeadMode::Classify { classes } if classes < 2 => {
                return Err(Error::Validation("classification needs at least 2 classes".into()))
            }
            HeadMode::Regress { targets: 0 } => return Err(Error::Validation("regression needs a target".into())),
            _ => {}
        }
        if !(config.tau_increment >= 0.0 && config.tau_increment.is_finite()) {
            return Err(Error::Validation("tau_increment must be finite and non-negative".into()));
        }
        let s = config.seed;
        let bottom = CdeFunc::new(config.bottom_layers.clone(), hf, d, s)?;
        let top = CdeFunc::new(config.top_layers.clone(), hg, d, s.wrapping_add(1))?;
        let h0_encoder = Mlp::linear(d, hf, s.wrapping_add(2))?;
        let z0_encoder = Mlp::linear(d, hg, s.wrapping_add(3))?;
        let fc1 = if config.variant.is_elementwise() {
            None
        } else {
            Some(Mlp::linear(hf, 1, s.wrapping_add(4))?)
        };
        let head = Mlp::linear(hg, config.head.out_dim(), s.wrapping_add(5))?;
        let mut attn = AttentionSpec::new(config.variant);
        attn.tau_increment = T::lit(config.tau_increment);
        Ok(Self {
            config,
            bottom,
            top,
            h0_encoder,
            z0_encoder,
            fc1,
            head,
            attn,
        })
    }

    /// Rebuild a model from its config and a flat `f64` parameter vector.
    pub fn from_parts(config: ModelConfig, params: &[f64]) -> Result<Self> {
        let mut m = Self::new(config)?;
        let p: Vec<T> = params.iter().map(|&v| T::lit(v)).collect();
        m.set_flat_params(&p)?;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn path_dim(&self) -> usize {
        self.config.path_dim
    }

    pub fn bottom_hidden(&self) -> usize {
        self.config.bottom_hidden
    }

    pub fn top_hidden(&self) -> usize {
        self.config.top_hidden
    }

    pub fn head_mode(&self) -> HeadMode {
        self.config.head
    }

    pub fn bottom(&self) -> &CdeFunc<T> {
        &self.bottom
    }

    pub fn top(&self) -> &CdeFunc<T> {
        &self.top
    }

    pub fn h0_encoder(&self) -> &Mlp<T> {
        &self.h0_encoder
    }

    pub fn z0_encoder(&self) -> &Mlp<T> {
        &self.z0_encoder
    }

    pub fn fc1(&self) -> Option<&Mlp<T>> {
        self.fc1.as_ref()
    }

    pub fn head(&self) -> &Mlp<T> {
        &self.head
    }

    pub fn attention(&self) -> &AttentionSpec<T> {
        &self.attn
    }

    pub fn set_attention(&mut self, attn: AttentionSpec<T>) -> Result<()> {
        if attn.variant != self.config.variant {
            return Err(Error::Validation("attention variant is fixed at construction".into()));
        }
        self.attn = attn;
        Ok(())
    }

    /// Set τ for the given number of completed epochs.
    pub fn anneal_temperature(&mut self, epoch: usize) {
        self.attn = self.attn.anneal_temperature(epoch);
    }

    fn layout(&self) -> Layout {
        let mut at = 0;
        Layout {
            f: next_range(&mut at, self.bottom.num_params()),
            g: next_range(&mut at, self.top.num_params()),
            h0: next_range(&mut at, self.h0_encoder.num_params()),
            z0: next_range(&mut at, self.z0_encoder.num_params()),
            fc1: next_range(&mut at, self.fc1.as_ref().map_or(0, Mlp::num_params)),
            head: next_range(&mut at, self.head.num_params()),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layout().head.end
    }

    /// Range of a group inside the flat parameter vector.
    pub fn group_range(&self, group: ParamGroup) -> Range<usize> {
        let l = self.layout();
        match group {
            ParamGroup::F => l.f,
            ParamGroup::G => l.g,
            ParamGroup::Others => l.h0.start..l.head.end,
        }
    }

    pub fn flat_params(&self) -> Vec<T> {
        let mut p = Vec::with_capacity(self.num_params());
        p.extend_from_slice(self.bottom.net().params());
        p.extend_from_slice(self.top.net().params());
        p.extend_from_slice(self.h0_encoder.params());
        p.extend_from_slice(self.z0_encoder.params());
        if let Some(fc1) = &self.fc1 {
            p.extend_from_slice(fc1.params());
        }
        p.extend_from_slice(self.head.params());
        p
    }

    pub fn set_flat_params(&mut self, params: &[T]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::Validation(format!(
                "model has {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        let l = self.layout();
        self.bottom.net_mut().set_params(&params[l.f])?;
        self.top.net_mut().set_params(&params[l.g])?;
        self.h0_encoder.set_params(&params[l.h0])?;
        self.z0_encoder.set_params(&params[l.z0])?;
        if let Some(fc1) = &mut self.fc1 {
            fc1.set_params(&params[l.fc1])?;
        }
        self.head.set_params(&params[l.head])
    }

    pub fn group_params(&self, group: ParamGroup) -> Vec<T> {
        self.flat_params()[self.group_range(group)].to_vec()
    }

    pub fn set_group_params(&mut self, group: ParamGroup, values: &[T]) -> Result<()> {
        let range = self.group_range(group);
        if values.len() != range.len() {
            return Err(Error::Validation(format!(
                "group `{}` has {} parameters, got {}",
                group.name(),
                range.len(),
                values.len()
            )));
        }
        let mut p = self.flat_params();
        p[range].copy_from_slice(values);
        self.set_flat_params(&p)
    }

    /// Parameters as `f64`, e.g. for checkpoints.
    pub fn flat_params_f64(&self) -> Vec<f64> {
        self.flat_params().iter().map(|p| p.to_f64_lossy()).collect()
    }

    /// Replace the TIME-variant FC1 layer's weights and bias.
    pub fn set_fc1(&mut self, weights: &[T], bias: T) -> Result<()> {
        let fc1 = self
            .fc1
            .as_mut()
            .ok_or_else(|| Error::Usage("element-wise variants have no FC1 layer".into()))?;
        let mut p = weights.to_vec();
        p.push(bias);
        fc1.set_params(&p)
    }

    /// Pre-activations of attention: `FC1(h)` for TIME, `h` itself for ELEM.
    fn pre_activation(&self, h: &[T]) -> Result<Vec<T>> {
        match &self.fc1 {
            Some(fc1) => fc1.apply(h),
            None => Ok(h.to_vec()),
        }
    }

    fn check_hidden(&self, h: &[T]) -> Result<()> {
        if h.len() != self.config.bottom_hidden {
            return Err(Error::Validation(format!(
                "attention expects a hidden vector of length {}, got {}",
                self.config.bottom_hidden,
                h.len()
            )));
        }
        Ok(())
    }

    /// Attention for bottom state `h`: one value for TIME variants, `D` for ELEM.
    pub fn attention_at(&self, h: &[T], mode: AttentionMode) -> Result<AttentionValue<T>> {
        self.check_hidden(h)?;
        let (values, slopes) = self.attn.gate_all(&self.pre_activation(h)?);
        Ok(AttentionValue {
            values,
            slopes: if mode == AttentionMode::Train { slopes } else { Vec::new() },
        })
    }

    /// `Y = a ⊗ X` given the path value and bottom state.
    pub fn attended_value(&self, x: &[T], h: &[T]) -> Result<Vec<T>> {
        let a = self.attention_at(h, AttentionMode::Eval)?.values;
        Ok(apply_attention(&a, x))
    }

    /// Analytic `dY/dt` from `X`, `dX/dt`, `h` and `dh/dt`.
    ///
    /// `a(1−a)` is evaluated on the forward attention value, so saturated
    /// hard attention gives `dY/dt = 0` or `dY/dt = dX/dt` exactly.
    pub fn attended_derivative(&self, x: &[T], dx: &[T], h: &[T], dh: &[T]) -> Result<Vec<T>> {
        let d = self.config.path_dim;
        if x.len() != d || dx.len() != d {
            return Err(Error::Validation(format!("path vectors must have length {d}")));
        }
        if dh.len() != h.len() {
            return Err(Error::Validation("h and dh/dt lengths differ".into()));
        }
        let a = self.attention_at(h, AttentionMode::Eval)?.values;
        Ok(match &self.fc1 {
            Some(fc1) => {
                let c = dot(&fc1.params()[..h.len()], dh);
                let q = a[0] * (T::one() - a[0]);
                x.iter().zip(dx).map(|(&xj, &dxj)| a[0] * dxj + xj * q * c).collect()
            }
            None => (0..d)
                .map(|j| a[j] * dx[j] + x[j] * (a[j] * (T::one() - a[j])) * dh[j])
                .collect(),
        })
    }

    /// `dY/dt` at time `t`, reading `X` and `dX/dt` from the path.
    pub fn y_derivative<P: ControlPath<T> + ?Sized>(&self, path: &P, h: &[T], dh: &[T], t: T) -> Result<Vec<T>> {
        let d = self.check_path(path)?;
        let (mut x, mut dx) = (vec![T::zero(); d], vec![T::zero(); d]);
        path.value_and_derivative(t, &mut x, &mut dx)?;
        self.attended_derivative(&x, &dx, h, dh)
    }

    fn check_path<P: ControlPath<T> + ?Sized>(&self, path: &P) -> Result<usize> {
        let d = self.config.path_dim;
        if path.channels() != d {
            return Err(Error::Validation(format!(
                "path has {} channels, model expects {d}",
                path.channels()
            )));
        }
        Ok(d)
    }

    fn init_state(&self, x0: &[T]) -> Result<InitState<T>> {
        let (h0, h0_tape) = self.h0_encoder.forward(x0)?;
        let (pre, fc1_tape) = match &self.fc1 {
            Some(fc1) => {
                let (p, tape) = fc1.forward(&h0)?;
                (p, Some(tape))
            }
            None => (h0.clone(), None),
        };
        let (a, slopes) = self.attn.gate_all(&pre);
        let y0 = apply_attention(&a, x0);
        let (z0, z0_tape) = self.z0_encoder.forward(&y0)?;
        let mut s0 = h0;
        s0.extend(z0);
        Ok(InitState {
            x0: x0.to_vec(),
            h0_tape,
            fc1_tape,
            slopes,
            z0_tape,
            s0,
        })
    }

    fn init_backward(&self, init: &InitState<T>, cot: &[T], grad: &mut [T]) -> Result<()> {
        let l = self.layout();
        let hf = self.config.bottom_hidden;
        let (lh0, lz0) = cot.split_at(hf);
        let ly = self.z0_encoder.backward_accumulate(&init.z0_tape, lz0, &mut grad[l.z0.clone()])?;
        let mut lh = lh0.to_vec();
        match (&self.fc1, &init.fc1_tape) {
            (Some(fc1), Some(tape)) => {
                let la = dot(&ly, &init.x0);
                let lp = la * init.slopes[0];
                let g = fc1.backward_accumulate(tape, &[lp], &mut grad[l.fc1.clone()])?;
                axpy(T::one(), &g, &mut lh);
            }
            _ => {
                for j in 0..hf {
                    lh[j] += ly[j] * init.x0[j] * init.slopes[j];
                }
            }
        }
        self.h0_encoder.backward_accumulate(&init.h0_tape, &lh, &mut grad[l.h0])?;
        Ok(())
    }

    /// Initial stacked state `[h(t0), z(t0)]`.
    pub fn initial_state<P: ControlPath<T> + ?Sized>(&self, path: &P) -> Result<Vec<T>> {
        let d = self.check_path(path)?;
        let mut x0 = vec![T::zero(); d];
        path.value_into(path.domain().0, &mut x0)?;
        Ok(self.init_state(&x0)?.s0)
    }

    /// Solve the stacked system, returning the `h` and `z` trajectories.
    pub fn trajectories<P: ControlPath<T>>(
        &self,
        path: &P,
        eval_times: &[T],
        cfg: &SolverConfig<T>,
    ) -> Result<(Trajectory<T>, Trajectory<T>)> {
        let s0 = self.initial_state(path)?;
        let (t0, t1) = path.domain();
        let field = AncdeField::new(self, path)?;
        let traj = solve_with_breakpoints(&field, &s0, t0, t1, eval_times, &path.breakpoints(), cfg)?;
        let hf = self.config.bottom_hidden;
        let pick = |r: Range<usize>| Trajectory {
            eval_times: traj.eval_times.clone(),
            states: traj.states.iter().map(|s| s[r.clone()].to_vec()).collect(),
            accepted_steps: traj.accepted_steps,
            rejected_steps: traj.rejected_steps,
        };
        Ok((pick(0..hf), pick(hf..s0.len())))
    }

    /// Bottom CDE alone: `h(t)` driven by `X`.
    pub fn bottom_forward<P: ControlPath<T>>(&self, path: &P, eval_times: &[T], cfg: &SolverConfig<T>) -> Result<Trajectory<T>> {
        let d = self.check_path(path)?;
        let (t0, t1) = path.domain();
        let mut x0 = vec![T::zero(); d];
        path.value_into(t0, &mut x0)?;
        let h0 = self.h0_encoder.apply(&x0)?;
        solve_cde(&self.bottom, path, &h0, t0, t1, eval_times, cfg)
    }

    /// Top CDE `z(t)` driven by the attended path, co-solved with `h`.
    pub fn top_forward<P: ControlPath<T>>(&self, path: &P, eval_times: &[T], cfg: &SolverConfig<T>) -> Result<Trajectory<T>> {
        Ok(self.trajectories(path, eval_times, cfg)?.1)
    }

    /// Head applied to a final top state.
    pub fn predict(&self, z_t1: &[T]) -> Result<Vec<T>> {
        let raw = self.head.apply(z_t1)?;
        Ok(match self.config.head {
            HeadMode::Classify { .. } => softmax(&raw),
            HeadMode::Regress { .. } => raw,
        })
    }

    /// Forward pass with any solver (adaptive included).
    pub fn forward<P: ControlPath<T>>(&self, path: &P, cfg: &SolverConfig<T>) -> Result<ModelOutput<T>> {
        let (_, z) = self.trajectories(path, &[], cfg)?;
        let z_t1 = z.last().to_vec();
        let raw = self.head.apply(&z_t1)?;
        let prediction = match self.config.head {
            HeadMode::Classify { .. } => softmax(&raw),
            HeadMode::Regress { .. } => raw.clone(),
        };
        Ok(ModelOutput { z_t1, raw, prediction })
    }

    /// Fixed-step forward pass recording what [`AncdeModel::backward`] needs.
    pub fn forward_taped<P: ControlPath<T>>(&self, path: &P, cfg: &SolverConfig<T>) -> Result<ModelTape<T>> {
        cfg.validate()?;
        if !cfg.method.is_fixed_step() {
            return Err(Error::Unsupported("gradients need a fixed-step solver".into()));
        }
        let d = self.check_path(path)?;
        let (t0, t1) = path.domain();
        let mut x0 = vec![T::zero(); d];
        path.value_into(t0, &mut x0)?;
        let init = self.init_state(&x0)?;
        let grid = time_grid(t0, t1, &path.breakpoints(), &[], cfg)?;
        if grid.len() - 1 > cfg.max_steps {
            return Err(Error::Instability(format!("{} steps exceed max_steps", grid.len() - 1)));
        }
        let field = AncdeField::new(self, path)?;
        let solver = solve_grid_with_tape(&field, &init.s0, &grid, cfg.method)?;
        let z_t1 = &solver.final_state()[self.config.bottom_hidden..];
        let (raw, head) = self.head.forward(z_t1)?;
        Ok(ModelTape { init, solver, head, raw })
    }

    /// Gradient of `cotᵀ · raw_output` with respect to all parameters (flat layout).
    pub fn backward<P: ControlPath<T>>(&self, path: &P, tape: &ModelTape<T>, cot: &[T]) -> Result<Vec<T>> {
        let l = self.layout();
        let mut grad = vec![T::zero(); l.head.end];
        let lz = self.head.backward_accumulate(&tape.head, cot, &mut grad[l.head.clone()])?;
        let mut final_cot = vec![T::zero(); self.config.bottom_hidden];
        final_cot.extend(lz);
        let field = AncdeField::new(self, path)?;
        let (gs0, gp) = tape.solver.backward(&field, &final_cot)?;
        axpy(T::one(), &gp, &mut grad);
        self.init_backward(&tape.init, &gs0, &mut grad)?;
        Ok(grad)
    }

    /// Attention along the solved bottom trajectory at the given increasing times.
    pub fn export_attention<P: ControlPath<T>>(&self, path: &P, grid: &[T], cfg: &SolverConfig<T>) -> Result<Vec<Vec<T>>> {
        if grid.is_empty() {
            return Ok(Vec::new());
        }
        let (t0, t1) = path.domain();
        check_control_domain(path, grid[0].min(t0), grid[grid.len() - 1].max(t1))?;
        let traj = self.bottom_forward(path, grid, cfg)?;
        let skip = traj.eval_times.len() - grid.len();
        traj.states[skip..]
            .iter()
            .map(|h| Ok(self.attention_at(h, AttentionMode::Eval)?.values))
            .collect()
    }
}

/// The stacked `[h, z]` vector field; parameters are the model's flat vector.
pub struct AncdeField<'a, T, P: ?Sized> {
    model: &'a AncdeModel<T>,
    path: &'a P,
}

impl<'a, T: Scalar, P: ControlPath<T> + ?Sized> AncdeField<'a, T, P> {
    pub fn new(model: &'a AncdeModel<T>, path: &'a P) -> Result<Self> {
        model.check_path(path)?;
        Ok(Self { model, path })
    }
}

struct Stage<T> {
    x: Vec<T>,
    dx: Vec<T>,
    dh: Vec<T>,
    f_tape: GradTape<T>,
    a: Vec<T>,
    slopes: Vec<T>,
    /// `FC1 · dh/dt` (time-wise only).
    c: T,
    dy: Vec<T>,
    g_tape: GradTape<T>,
    dz: Vec<T>,
}

impl<T: Scalar, P: ControlPath<T> + ?Sized> AncdeField<'_, T, P> {
    fn stage(&self, t: T, s: &[T]) -> Result<Stage<T>> {
        let m = self.model;
        let d = m.config.path_dim;
        let hf = m.config.bottom_hidden;
        let (h, z) = s.split_at(hf);
        let (mut x, mut dx) = (vec![T::zero(); d], vec![T::zero(); d]);
        self.path.value_and_derivative(t, &mut x, &mut dx)?;
        let (dh, f_tape) = m.bottom.apply_taped(h, &dx)?;
        let pre = m.pre_activation(h)?;
        let (a, slopes) = m.attn.gate_all(&pre);
        let (c, dy): (T, Vec<T>) = match &m.fc1 {
            Some(fc1) => {
                let c = dot(&fc1.params()[..hf], &dh);
                let q = a[0] * (T::one() - a[0]);
                let dy = x.iter().zip(&dx).map(|(&xj, &dxj)| a[0] * dxj + xj * q * c).collect();
                (c, dy)
            }
            None => {
                let dy = (0..d)
                    .map(|j| a[j] * dx[j] + x[j] * (a[j] * (T::one() - a[j])) * dh[j])
                    .collect();
                (T::zero(), dy)
            }
        };
        let (dz, g_tape) = m.top.apply_taped(z, &dy)?;
        Ok(Stage {
            x,
            dx,
            dh,
            f_tape,
            a,
            slopes,
            c,
            dy,
            g_tape,
            dz,
        })
    }
}

impl<T: Scalar, P: ControlPath<T> + ?Sized> VectorField<T> for AncdeField<'_, T, P> {
    fn eval(&self, t: T, s: &[T], ds: &mut [T]) -> Result<()> {
        let st = self.stage(t, s)?;
        let hf = self.model.config.bottom_hidden;
        ds[..hf].copy_from_slice(&st.dh);
        ds[hf..].copy_from_slice(&st.dz);
        Ok(())
    }
}

impl<T: Scalar, P: ControlPath<T> + ?Sized> DifferentiableField<T> for AncdeField<'_, T, P> {
    fn num_params(&self) -> usize {
        self.model.num_params()
    }

    fn vjp(&self, t: T, s: &[T], cot: &[T], grad_s: &mut [T], grad_params: &mut [T]) -> Result<()> {
        let m = self.model;
        let l = m.layout();
        let d = m.config.path_dim;
        let hf = m.config.bottom_hidden;
        let st = self.stage(t, s)?;
        let (lh_out, lz_out) = cot.split_at(hf);
        let (h, _) = s.split_at(hf);

        // Top: dz = g(z) · dy.
        let mut ldy = vec![T::zero(); d];
        let lz = m.top.apply_backward(&st.g_tape, &st.dy, lz_out, Some(&mut ldy), &mut grad_params[l.g.clone()])?;

        // Attention and dY/dt.
        let mut ldh = lh_out.to_vec();
        let mut lh = vec![T::zero(); hf];
        match &m.fc1 {
            Some(fc1) => {
                let w = &fc1.params()[..hf];
                let a = st.a[0];
                let q = a * (T::one() - a);
                let lx = dot(&ldy, &st.x);
                let la = dot(&ldy, &st.dx) + lx * st.c * (T::one() - a - a);
                let lc = lx * q;
                let lp = la * st.slopes[0];
                let gfc = &mut grad_params[l.fc1.clone()];
                for i in 0..hf {
                    gfc[i] += lc * st.dh[i] + lp * h[i];
                    ldh[i] += lc * w[i];
                    lh[i] += lp * w[i];
                }
                gfc[hf] += lp;
            }
            None => {
                for j in 0..d {
                    let a = st.a[j];
                    let q = a * (T::one() - a);
                    let la = ldy[j] * st.dx[j] + ldy[j] * st.x[j] * st.dh[j] * (T::one() - a - a);
                    ldh[j] += ldy[j] * st.x[j] * q;
                    lh[j] += la * st.slopes[j];
                }
            }
        }
        // Bottom: dh = f(h) · dx.
        let gh = m.bottom.apply_backward(&st.f_tape, &st.dx, &ldh, None, &mut grad_params[l.f.clone()])?;
        for i in 0..hf {
            grad_s[i] += gh[i] + lh[i];
        }
        axpy(T::one(), &lz, &mut grad_s[hf..]);
        Ok(())
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn apply_attention<T: Scalar>(a: &[T], x: &[T]) -> Vec<T> {
    if a.len() == 1 {
        x.iter().map(|&xj| a[0] * xj).collect()
    } else {
        a.iter().zip(x).map(|(&aj, &xj)| aj * xj).collect()
    }
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / sum).collect()
}

/// `n` evenly spaced times from `t0` to `t1` (just `t0` when `n = 1`).
pub fn uniform_grid<T: Scalar>(t0: T, t1: T, n: usize) -> Vec<T> {
    match n {
        0 => Vec::new(),
        1 => vec![t0],
        _ => {
            let span = T::from_usize_lossy(n - 1);
            // The last point is t1 exactly; rounding must not leave the domain.
            (0..n)
                .map(|k| if k + 1 == n { t1 } else { t0 + (t1 - t0) * T::from_usize_lossy(k) / span })
                .collect()
        }
    }
}

/// Attention CSV: header `t,a_0[,a_1,...]`, one row per grid time.
pub fn write_attention_csv<T: Scalar, W: Write>(out: W, times: &[T], rows: &[Vec<T>]) -> Result<()> {
    if times.len() != rows.len() {
        return Err(Error::Validation("one attention row per time is required".into()));
    }
    let width = rows.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend((0..width).map(|k| format!("a_{k}")));
    w.write_record(&header)?;
    for (t, row) in times.iter().zip(rows) {
        let mut rec = vec![format!("{t}")];
        rec.extend(row.iter().map(|v| format!("{v}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
