//! Initial value problem solvers for neural ODEs and CDEs.
//!
//! Fixed-step methods (Euler, RK4) march over an explicit time grid and can
//! record a [`SolverTape`] for exact discretise-then-optimise gradients.
//! Dormand–Prince 5(4) adapts its step from the embedded error estimate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::CdeFunc;
use crate::path::ControlPath;
use crate::scalar::{all_finite, axpy, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
    Dopri5,
}

impl Method {
    pub fn is_fixed_step(self) -> bool {
        !matches!(self, Method::Dopri5)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig<T> {
    pub method: Method,
    /// Step size of the fixed-step methods; also the first trial step of dopri5.
    pub step_size: T,
    /// When set, fixed-step solves split every interval between control
    /// breakpoints into this many equal steps instead of using `step_size`.
    #[serde(default)]
    pub substeps_per_interval: Option<usize>,
    pub rtol: T,
    pub atol: T,
    pub max_steps: usize,
    pub min_step: T,
}

impl<T: Scalar> SolverConfig<T> {
    pub fn euler(step_size: T) -> Self {
        Self {
            method: Method::Euler,
            step_size,
            substeps_per_interval: None,
            ..Self::default()
        }
    }

    pub fn rk4(step_size: T) -> Self {
        Self {
            method: Method::Rk4,
            step_size,
            substeps_per_interval: None,
            ..Self::default()
        }
    }

    /// RK4 with `n` steps between consecutive control breakpoints.
    pub fn rk4_per_interval(n: usize) -> Self {
        Self {
            method: Method::Rk4,
            substeps_per_interval: Some(n),
            ..Self::default()
        }
    }

    pub fn dopri5(rtol: T, atol: T) -> Self {
        Self {
            method: Method::Dopri5,
            substeps_per_interval: None,
            rtol,
            atol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > T::zero()) {
            return Err(Error::Validation("step size must be positive".into()));
        }
        if !(self.rtol > T::zero() && self.atol > T::zero()) {
            return Err(Error::Validation("rtol and atol must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Validation("max_steps must be positive".into()));
        }
        if !(self.min_step > T::zero()) {
            return Err(Error::Validation("min_step must be positive".into()));
        }
        if self.substeps_per_interval == Some(0) {
            return Err(Error::Validation("substeps_per_interval must be positive".into()));
        }
        Ok(())
    }
}

impl<T: Scalar> Default for SolverConfig<T> {
    /// Training default: RK4 with four steps per knot interval.
    fn default() -> Self {
        Self {
            method: Method::Rk4,
            step_size: T::lit(0.01),
            substeps_per_interval: Some(4),
            rtol: T::lit(1e-6),
            atol: T::lit(1e-8),
            max_steps: 1_000_000,
            min_step: T::lit(1e-12),
        }
    }
}

/// Solution sampled at the requested times.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub eval_times: Vec<T>,
    /// One row per entry of `eval_times`.
    pub states: Vec<Vec<T>>,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

impl<T: Scalar> Trajectory<T> {
    pub fn last(&self) -> &[T] {
        self.states.last().expect("trajectory holds the initial state")
    }
}

/// A time-dependent vector field `dz/dt = F(t, z)`.
pub trait VectorField<T: Scalar> {
    fn eval(&self, t: T, z: &[T], dz: &mut [T]) -> Result<()>;
}

impl<T: Scalar, F> VectorField<T> for F
where
    F: Fn(T, &[T], &mut [T]),
{
    fn eval(&self, t: T, z: &[T], dz: &mut [T]) -> Result<()> {
        self(t, z, dz);
        Ok(())
    }
}

/// A vector field with a vector–Jacobian product.
pub trait DifferentiableField<T: Scalar>: VectorField<T> {
    fn num_params(&self) -> usize;

    /// Adds `cotᵀ ∂F/∂z` into `grad_z` and `cotᵀ ∂F/∂θ` into `grad_params`.
    fn vjp(&self, t: T, z: &[T], cot: &[T], grad_z: &mut [T], grad_params: &mut [T]) -> Result<()>;
}

/// The CDE field `z ↦ f(z) · dX/dt(t)`.
pub struct CdeField<'a, T, P> {
    pub func: &'a CdeFunc<T>,
    pub control: &'a P,
}

impl<'a, T: Scalar, P: ControlPath<T>> CdeField<'a, T, P> {
    pub fn new(func: &'a CdeFunc<T>, control: &'a P) -> Result<Self> {
        if control.channels() != func.path_dim() {
            return Err(Error::Validation(format!(
                "control has {} channels, CDE function expects {}",
                control.channels(),
                func.path_dim()
            )));
        }
        Ok(Self { func, control })
    }
}

impl<T: Scalar, P: ControlPath<T>> VectorField<T> for CdeField<'_, T, P> {
    fn eval(&self, t: T, z: &[T], dz: &mut [T]) -> Result<()> {
        let mut dx = vec![T::zero(); self.func.path_dim()];
        self.control.derivative_into(t, &mut dx)?;
        let v = self.func.apply(z, &dx)?;
        dz.copy_from_slice(&v);
        Ok(())
    }
}

impl<T: Scalar, P: ControlPath<T>> DifferentiableField<T> for CdeField<'_, T, P> {
    fn num_params(&self) -> usize {
        self.func.num_params()
    }

    fn vjp(&self, t: T, z: &[T], cot: &[T], grad_z: &mut [T], grad_params: &mut [T]) -> Result<()> {
        let mut dx = vec![T::zero(); self.func.path_dim()];
        self.control.derivative_into(t, &mut dx)?;
        let (_, tape) = self.func.apply_taped(z, &dx)?;
        let gz = self.func.apply_backward(&tape, &dx, cot, None, grad_params)?;
        axpy(T::one(), &gz, grad_z);
        Ok(())
    }
}

fn check_interval<T: Scalar>(t0: T, t1: T, eval_times: &[T]) -> Result<()> {
    if !(t0 < t1) {
        return Err(Error::Validation(format!("need t0 < t1, got [{t0}, {t1}]")));
    }
    if eval_times.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Validation("eval times must be strictly increasing".into()));
    }
    if eval_times.iter().any(|&t| !(t >= t0 && t <= t1)) {
        return Err(Error::Validation("eval times must lie in [t0, t1]".into()));
    }
    Ok(())
}

/// Requested output times, always starting at `t0`.
fn output_times<T: Scalar>(t0: T, t1: T, eval_times: &[T]) -> Vec<T> {
    let mut out = vec![t0];
    out.extend(eval_times.iter().copied().filter(|&t| t > t0));
    if eval_times.is_empty() {
        out.push(t1);
    }
    out
}

fn merge_sorted<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    let mut out: Vec<T> = a.iter().chain(b).copied().collect();
    out.sort_by(|x, y| x.partial_cmp(y).expect("finite times"));
    out.dedup();
    out
}

fn split_segments<T: Scalar>(points: &[T], per_segment: impl Fn(T, T) -> usize) -> Vec<T> {
    let mut grid = vec![points[0]];
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let n = per_segment(a, b).max(1);
        let nt = T::from_usize_lossy(n);
        for k in 1..n {
            grid.push(a + (b - a) * T::from_usize_lossy(k) / nt);
        }
        grid.push(b);
    }
    grid
}

/// Time grid of a fixed-step solve over `[t0, t1]`.
///
/// Every output time and (with `substeps_per_interval`) every breakpoint is a
/// grid node, so no step straddles a knot of the control.
pub fn time_grid<T: Scalar>(t0: T, t1: T, breakpoints: &[T], eval_times: &[T], cfg: &SolverConfig<T>) -> Result<Vec<T>> {
    check_interval(t0, t1, eval_times)?;
    let outputs = output_times(t0, t1, eval_times);
    let mut ends = outputs.clone();
    ends.push(t1);
    match cfg.substeps_per_interval {
        Some(n) => {
            let inner: Vec<T> = breakpoints.iter().copied().filter(|&b| b > t0 && b < t1).collect();
            let knots = merge_sorted(&[t0, t1], &inner);
            let base = split_segments(&knots, |_, _| n);
            Ok(merge_sorted(&base, &ends))
        }
        None => {
            let h = cfg.step_size;
            let points = merge_sorted(&ends, &[]);
            Ok(split_segments(&points, |a, b| {
                let ratio = ((b - a) / h).to_f64_lossy();
                // tolerate rounding so (1.0 / 0.1) yields 10 steps, not 11
                (ratio - 1e-9).ceil().max(1.0) as usize
            }))
        }
    }
}

fn rk4_step<T: Scalar, F: VectorField<T> + ?Sized>(
    field: &F,
    t: T,
    t_next: T,
    z: &[T],
    stages: Option<&mut Vec<Vec<T>>>,
) -> Result<Vec<T>> {
    let h = t_next - t;
    let half = h / T::lit(2.0);
    let t_mid = t + half;
    let n = z.len();
    let mut k1 = vec![T::zero(); n];
    let mut k2 = vec![T::zero(); n];
    let mut k3 = vec![T::zero(); n];
    let mut k4 = vec![T::zero(); n];
    field.eval(t, z, &mut k1)?;
    let mut u2 = z.to_vec();
    axpy(half, &k1, &mut u2);
    field.eval(t_mid, &u2, &mut k2)?;
    let mut u3 = z.to_vec();
    axpy(half, &k2, &mut u3);
    field.eval(t_mid, &u3, &mut k3)?;
    let mut u4 = z.to_vec();
    axpy(h, &k3, &mut u4);
    field.eval(t_next, &u4, &mut k4)?;
    let sixth = h / T::lit(6.0);
    let third = h / T::lit(3.0);
    let next: Vec<T> = (0..n)
        .map(|i| z[i] + sixth * (k1[i] + k4[i]) + third * (k2[i] + k3[i]))
        .collect();
    if let Some(st) = stages {
        st.push(u2);
        st.push(u3);
        st.push(u4);
    }
    Ok(next)
}

fn euler_step<T: Scalar, F: VectorField<T> + ?Sized>(field: &F, t: T, t_next: T, z: &[T]) -> Result<Vec<T>> {
    let h = t_next - t;
    let mut dz = vec![T::zero(); z.len()];
    field.eval(t, z, &mut dz)?;
    Ok(z.iter().zip(&dz).map(|(&zi, &di)| zi + h * di).collect())
}

/// Recorded forward pass of a fixed-step solve.
#[derive(Debug, Clone)]
pub struct SolverTape<T> {
    method: Method,
    times: Vec<T>,
    states: Vec<Vec<T>>,
    /// RK4 only: the three non-trivial stage inputs of each step.
    stages: Vec<Vec<Vec<T>>>,
}

impl<T: Scalar> SolverTape<T> {
    /// Number of recorded states (steps + 1).
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn times(&self) -> &[T] {
        &self.times
    }

    pub fn states(&self) -> &[Vec<T>] {
        &self.states
    }

    pub fn final_state(&self) -> &[T] {
        self.states.last().expect("tape holds the initial state")
    }

    /// Re-run the recorded steps from the initial state.
    pub fn replay<F: VectorField<T> + ?Sized>(&self, field: &F) -> Result<Vec<Vec<T>>> {
        let (states, _) = integrate_grid(field, &self.states[0], &self.times, self.method, false)?;
        Ok(states)
    }

    /// Reverse pass: given `∂L/∂z(t_end)`, returns `(∂L/∂z0, ∂L/∂θ)`.
    pub fn backward<F: DifferentiableField<T> + ?Sized>(&self, field: &F, final_cot: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        let n = final_cot.len();
        let mut grad_params = vec![T::zero(); field.num_params()];
        let mut lambda = final_cot.to_vec();
        for k in (0..self.times.len() - 1).rev() {
            let t = self.times[k];
            let t_next = self.times[k + 1];
            let h = t_next - t;
            let z = &self.states[k];
            match self.method {
                Method::Euler => {
                    let cot: Vec<T> = lambda.iter().map(|&l| h * l).collect();
                    let mut gz = vec![T::zero(); n];
                    field.vjp(t, z, &cot, &mut gz, &mut grad_params)?;
                    axpy(T::one(), &gz, &mut lambda);
                }
                Method::Rk4 => {
                    let half = h / T::lit(2.0);
                    let t_mid = t + half;
                    let st = &self.stages[k];
                    let w = [h / T::lit(6.0), h / T::lit(3.0), h / T::lit(3.0), h / T::lit(6.0)];
                    let mut gk: Vec<Vec<T>> = w.iter().map(|&wi| lambda.iter().map(|&l| wi * l).collect()).collect();
                    let inputs: [&[T]; 4] = [z, &st[0], &st[1], &st[2]];
                    let stage_t = [t, t_mid, t_mid, t_next];
                    let feed = [T::zero(), half, half, h];
                    let mut gs = lambda.clone();
                    for j in (0..4).rev() {
                        let mut gz = vec![T::zero(); n];
                        field.vjp(stage_t[j], inputs[j], &gk[j], &mut gz, &mut grad_params)?;
                        axpy(T::one(), &gz, &mut gs);
                        if j > 0 {
                            let (lo, _) = gk.split_at_mut(j);
                            axpy(feed[j], &gz, &mut lo[j - 1]);
                        }
                    }
                    lambda = gs;
                }
                Method::Dopri5 => unreachable!("tapes are fixed-step only"),
            }
            if !all_finite(&lambda) {
                return Err(Error::Numerical("non-finite cotangent in solver backward pass".into()));
            }
        }
        Ok((lambda, grad_params))
    }
}

/// March a fixed-step method over `grid`, returning the state at every node.
fn integrate_grid<T: Scalar, F: VectorField<T> + ?Sized>(
    field: &F,
    z0: &[T],
    grid: &[T],
    method: Method,
    record_stages: bool,
) -> Result<(Vec<Vec<T>>, Vec<Vec<Vec<T>>>)> {
    let mut states = Vec::with_capacity(grid.len());
    let mut stages = Vec::new();
    states.push(z0.to_vec());
    for w in grid.windows(2) {
        let z = states.last().expect("initial state");
        let next = match method {
            Method::Euler => euler_step(field, w[0], w[1], z)?,
            Method::Rk4 => {
                if record_stages {
                    let mut st = Vec::with_capacity(3);
                    let next = rk4_step(field, w[0], w[1], z, Some(&mut st))?;
                    stages.push(st);
                    next
                } else {
                    rk4_step(field, w[0], w[1], z, None)?
                }
            }
            Method::Dopri5 => return Err(Error::Unsupported("dopri5 has no fixed grid".into())),
        };
        if !all_finite(&next) {
            return Err(Error::Numerical(format!("non-finite state at t = {}", w[1])));
        }
        states.push(next);
    }
    Ok((states, stages))
}

fn sample_grid<T: Scalar>(grid: &[T], states: &[Vec<T>], outputs: &[T]) -> Vec<Vec<T>> {
    let mut out = Vec::with_capacity(outputs.len());
    let mut j = 0;
    for &t in outputs {
        while grid[j] != t {
            j += 1;
        }
        out.push(states[j].clone());
    }
    out
}

/// Fixed-step solve over an explicit grid, recording a tape.
pub fn solve_grid_with_tape<T: Scalar, F: VectorField<T> + ?Sized>(
    field: &F,
    z0: &[T],
    grid: &[T],
    method: Method,
) -> Result<SolverTape<T>> {
    if !method.is_fixed_step() {
        return Err(Error::Unsupported("taped solves need a fixed-step method".into()));
    }
    let (states, stages) = integrate_grid(field, z0, grid, method, true)?;
    Ok(SolverTape {
        method,
        times: grid.to_vec(),
        states,
        stages,
    })
}

/// Solve on `[t0, t1]`; fixed-step grids treat `breakpoints` as in [`time_grid`].
pub fn solve_with_breakpoints<T: Scalar, F: VectorField<T> + ?Sized>(
    field: &F,
    z0: &[T],
    t0: T,
    t1: T,
    eval_times: &[T],
    breakpoints: &[T],
    cfg: &SolverConfig<T>,
) -> Result<Trajectory<T>> {
    cfg.validate()?;
    check_interval(t0, t1, eval_times)?;
    let outputs = output_times(t0, t1, eval_times);
    if cfg.method.is_fixed_step() {
        let grid = time_grid(t0, t1, breakpoints, eval_times, cfg)?;
        if grid.len() - 1 > cfg.max_steps {
            return Err(Error::Instability(format!(
                "{} steps exceed max_steps = {}",
                grid.len() - 1,
                cfg.max_steps
            )));
        }
        let (states, _) = integrate_grid(field, z0, &grid, cfg.method, false)?;
        Ok(Trajectory {
            states: sample_grid(&grid, &states, &outputs),
            eval_times: outputs,
            accepted_steps: grid.len() - 1,
            rejected_steps: 0,
        })
    } else {
        solve_adaptive(field, z0, t0, t1, &outputs, cfg)
    }
}

/// Solve `dz/dt = F(t, z)`, `z(t0) = z0` on `[t0, t1]`.
///
/// The returned trajectory starts at `t0` followed by the requested
/// `eval_times` (or `t1` when none are given).
pub fn solve_ode<T: Scalar, F: VectorField<T> + ?Sized>(
    field: &F,
    z0: &[T],
    t0: T,
    t1: T,
    eval_times: &[T],
    cfg: &SolverConfig<T>,
) -> Result<Trajectory<T>> {
    solve_with_breakpoints(field, z0, t0, t1, eval_times, &[], cfg)
}

/// Fixed-step solve of an ODE on `[t0, t1]`, recording a tape for backpropagation.
pub fn solve_ode_with_tape<T: Scalar, F: VectorField<T> + ?Sized>(
    field: &F,
    z0: &[T],
    t0: T,
    t1: T,
    cfg: &SolverConfig<T>,
) -> Result<(Trajectory<T>, SolverTape<T>)> {
    cfg.validate()?;
    if !cfg.method.is_fixed_step() {
        return Err(Error::Unsupported("taped solves need a fixed-step method".into()));
    }
    let grid = time_grid(t0, t1, &[], &[], cfg)?;
    let tape = solve_grid_with_tape(field, z0, &grid, cfg.method)?;
    let traj = Trajectory {
        eval_times: vec![t0, t1],
        states: vec![z0.to_vec(), tape.final_state().to_vec()],
        accepted_steps: grid.len() - 1,
        rejected_steps: 0,
    };
    Ok((traj, tape))
}

pub(crate) fn check_control_domain<T: Scalar, P: ControlPath<T> + ?Sized>(control: &P, t0: T, t1: T) -> Result<()> {
    let (lo, hi) = control.domain();
    for t in [t0, t1] {
        if t < lo || t > hi {
            return Err(Error::Domain {
                t: t.to_f64_lossy(),
                lo: lo.to_f64_lossy(),
                hi: hi.to_f64_lossy(),
            });
        }
    }
    Ok(())
}

/// Solve the CDE `dz = f(z) dX` by integrating `f(z) · dX/dt` in time.
pub fn solve_cde<T: Scalar, P: ControlPath<T>>(
    func: &CdeFunc<T>,
    control: &P,
    z0: &[T],
    t0: T,
    t1: T,
    eval_times: &[T],
    cfg: &SolverConfig<T>,
) -> Result<Trajectory<T>> {
    check_control_domain(control, t0, t1)?;
    let field = CdeField::new(func, control)?;
    solve_with_breakpoints(&field, z0, t0, t1, eval_times, &control.breakpoints(), cfg)
}

/// Outcome of a single Dormand–Prince trial step.
#[derive(Debug, Clone, PartialEq)]
pub struct Dopri5Step<T> {
    pub z_next: Vec<T>,
    /// RMS of the scaled embedded error; the step is accepted when ≤ 1.
    pub error: T,
    pub h_next: T,
    pub accepted: bool,
}

const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// One Dormand–Prince 5(4) trial step from `(t, z)` with step `h`.
///
/// The next step is `h · clip(0.9 · err^(-1/5), 0.2, 5)`.
pub fn dopri5_step<T: Scalar, F: VectorField<T> + ?Sized>(field: &F, t: T, z: &[T], h: T, rtol: T, atol: T) -> Result<Dopri5Step<T>> {
    let n = z.len();
    let mut k: Vec<Vec<T>> = Vec::with_capacity(7);
    for s in 0..7 {
        let mut u = z.to_vec();
        for (j, kj) in k.iter().enumerate() {
            let a = DP_A[s][j];
            if a != 0.0 {
                axpy(h * T::lit(a), kj, &mut u);
            }
        }
        let ts = if DP_C[s] == 1.0 { t + h } else { t + h * T::lit(DP_C[s]) };
        let mut ks = vec![T::zero(); n];
        field.eval(ts, &u, &mut ks)?;
        if !all_finite(&ks) {
            return Err(Error::Numerical(format!("non-finite stage {s} at t = {ts}")));
        }
        k.push(ks);
    }
    let mut z_next = z.to_vec();
    let mut sum_sq = T::zero();
    for i in 0..n {
        let mut hi = T::zero();
        let mut lo = T::zero();
        for s in 0..7 {
            hi += T::lit(DP_B5[s]) * k[s][i];
            lo += T::lit(DP_B4[s]) * k[s][i];
        }
        z_next[i] += h * hi;
        let scale = atol + rtol * z[i].abs().max(z_next[i].abs());
        let e = h * (hi - lo) / scale;
        sum_sq += e * e;
    }
    let error = if n == 0 { T::zero() } else { (sum_sq / T::from_usize_lossy(n)).sqrt() };
    let max_factor = T::lit(5.0);
    let factor = if error == T::zero() {
        max_factor
    } else {
        (T::lit(0.9) * error.powf(T::lit(-0.2))).max(T::lit(0.2)).min(max_factor)
    };
    Ok(Dopri5Step {
        z_next,
        error,
        h_next: h * factor,
        accepted: error <= T::one(),
    })
}

fn solve_adaptive<T: Scalar, F: VectorField<T> + ?Sized>(
    field: &F,
    z0: &[T],
    t0: T,
    t1: T,
    outputs: &[T],
    cfg: &SolverConfig<T>,
) -> Result<Trajectory<T>> {
    let mut t = t0;
    let mut z = z0.to_vec();
    let mut h = cfg.step_size.min(t1 - t0);
    let mut states = vec![z.clone()];
    let mut accepted = 0;
    let mut rejected = 0;
    let mut targets: Vec<T> = outputs[1..].to_vec();
    if targets.last() != Some(&t1) {
        targets.push(t1);
    }
    for &target in &targets {
        while t < target {
            if accepted + rejected >= cfg.max_steps {
                return Err(Error::Instability(format!("exceeded max_steps = {}", cfg.max_steps)));
            }
            let remaining = target - t;
            let clipped = h >= remaining;
            let h_try = if clipped { remaining } else { h };
            let step = dopri5_step(field, t, &z, h_try, cfg.rtol, cfg.atol)?;
            if step.accepted {
                accepted += 1;
                t = if clipped { target } else { t + h_try };
                z = step.z_next;
                // a step shortened to hit an output time should not shrink the next one
                h = if clipped { step.h_next.max(h) } else { step.h_next };
            } else {
                rejected += 1;
                h = step.h_next;
                if h < cfg.min_step {
                    return Err(Error::Instability(format!(
                        "step size {h} fell below min_step {} at t = {t}",
                        cfg.min_step
                    )));
                }
            }
        }
        if outputs.contains(&target) {
            states.push(z.clone());
        }
    }
    Ok(Trajectory {
        eval_times: outputs.to_vec(),
        states,
        accepted_steps: accepted,
        rejected_steps: rejected,
    })
}

/// Continuous adjoint: integrate `(z, a, g)` backward from `t1` to `t0` with
/// `ż = F`, `ȧ = -aᵀ∂F/∂z`, `ġ = -aᵀ∂F/∂θ`, using fixed RK4 steps on the
/// reversed `grid`. Returns `(∂L/∂z0, ∂L/∂θ)`.
pub fn adjoint_backward<T: Scalar, F: DifferentiableField<T> + ?Sized>(
    field: &F,
    z_final: &[T],
    final_cot: &[T],
    grid: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    let n = z_final.len();
    let p = field.num_params();
    let augmented = |t: T, s: &[T], ds: &mut [T]| -> Result<()> {
        let (z, rest) = s.split_at(n);
        let a = &rest[..n];
        field.eval(t, z, &mut ds[..n])?;
        let mut gz = vec![T::zero(); n];
        let mut gp = vec![T::zero(); p];
        field.vjp(t, z, a, &mut gz, &mut gp)?;
        for (d, g) in ds[n..2 * n].iter_mut().zip(&gz) {
            *d = -*g;
        }
        for (d, g) in ds[2 * n..].iter_mut().zip(&gp) {
            *d = -*g;
        }
        Ok(())
    };
    let mut state = Vec::with_capacity(2 * n + p);
    state.extend_from_slice(z_final);
    state.extend_from_slice(final_cot);
    state.extend(std::iter::repeat_n(T::zero(), p));
    let m = state.len();
    for w in grid.windows(2).rev() {
        let (t, t_prev) = (w[1], w[0]);
        let h = t_prev - t;
        let half = h / T::lit(2.0);
        let t_mid = t + half;
        let mut k1 = vec![T::zero(); m];
        let mut k2 = vec![T::zero(); m];
        let mut k3 = vec![T::zero(); m];
        let mut k4 = vec![T::zero(); m];
        augmented(t, &state, &mut k1)?;
        let mut u = state.clone();
        axpy(half, &k1, &mut u);
        augmented(t_mid, &u, &mut k2)?;
        let mut u = state.clone();
        axpy(half, &k2, &mut u);
        augmented(t_mid, &u, &mut k3)?;
        let mut u = state.clone();
        axpy(h, &k3, &mut u);
        augmented(t_prev, &u, &mut k4)?;
        let sixth = h / T::lit(6.0);
        let third = h / T::lit(3.0);
        for i in 0..m {
            state[i] += sixth * (k1[i] + k4[i]) + third * (k2[i] + k3[i]);
        }
        if !all_finite(&state) {
            return Err(Error::Numerical(format!("adjoint blew up at t = {t_prev}")));
        }
    }
    // `g` was integrated as -∫ aᵀ∂F/∂θ dt from t1 down to t0, i.e. +∫_{t0}^{t1}.
    let grad_z0 = state[n..2 * n].to_vec();
    let grad_params = state[2 * n..].to_vec();
    Ok((grad_z0, grad_params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, LayerSpec};
    use crate::path::IdentityControl;
    use rand::{Rng, SeedableRng};

    fn growth(_t: f64, z: &[f64], dz: &mut [f64]) {
        dz[0] = z[0];
    }

    #[test]
    fn zero_field_keeps_state() {
        let zero = |_t: f64, _z: &[f64], dz: &mut [f64]| dz.iter_mut().for_each(|d| *d = 0.0);
        for cfg in [SolverConfig::euler(0.1), SolverConfig::rk4(0.1), SolverConfig::dopri5(1e-6, 1e-6)] {
            let traj = solve_ode(&zero, &[1.0, -2.0], 0.0, 1.0, &[], &cfg).unwrap();
            assert_eq!(traj.last(), &[1.0, -2.0]);
            assert_eq!(traj.states[0], vec![1.0, -2.0]);
        }
    }

    #[test]
    fn euler_step_is_explicit_euler() {
        let f = |_t: f64, z: &[f64], dz: &mut [f64]| dz[0] = z[0].sin() + 0.5;
        let traj = solve_ode(&f, &[0.3], 0.0, 0.25, &[], &SolverConfig::euler(0.25)).unwrap();
        assert_eq!(traj.last()[0], 0.3 + 0.25 * (0.3f64.sin() + 0.5));
    }

    #[test]
    fn rk4_exponential() {
        let traj = solve_ode(&growth, &[1.0], 0.0, 1.0, &[], &SolverConfig::rk4(0.01)).unwrap();
        assert!((traj.last()[0] - std::f64::consts::E).abs() < 1e-9);
    }

    #[test]
    fn euler_first_order() {
        let err = |h: f64| {
            let traj = solve_ode(&growth, &[1.0], 0.0, 1.0, &[], &SolverConfig::euler(h)).unwrap();
            (traj.last()[0] - std::f64::consts::E).abs()
        };
        let ratio = err(0.01) / err(0.005);
        assert!((ratio - 2.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn eval_times_are_grid_nodes() {
        let traj = solve_ode(&growth, &[1.0], 0.0, 1.0, &[0.25, 0.5, 1.0], &SolverConfig::rk4(0.1)).unwrap();
        assert_eq!(traj.eval_times, vec![0.0, 0.25, 0.5, 1.0]);
        for (t, s) in traj.eval_times.iter().zip(&traj.states) {
            assert!((s[0] - t.exp()).abs() < 1e-5);
        }
        assert!(solve_ode(&growth, &[1.0], 0.0, 1.0, &[0.5, 0.25], &SolverConfig::rk4(0.1)).is_err());
        assert!(solve_ode(&growth, &[1.0], 0.0, 1.0, &[1.5], &SolverConfig::rk4(0.1)).is_err());
    }

    #[test]
    fn grid_respects_breakpoints() {
        let cfg = SolverConfig::<f64>::rk4_per_interval(4);
        let grid = time_grid(0.0, 2.0, &[0.0, 0.5, 2.0], &[], &cfg).unwrap();
        assert_eq!(grid.len(), 9);
        assert_eq!(grid[4], 0.5);
        let uniform = time_grid(0.0, 1.0, &[], &[], &SolverConfig::rk4(0.1)).unwrap();
        assert_eq!(uniform.len(), 11);
    }

    #[test]
    fn dopri5_zero_field_grows_step() {
        let zero = |_t: f64, _z: &[f64], dz: &mut [f64]| dz[0] = 0.0;
        let s = dopri5_step(&zero, 0.0, &[1.0], 0.1, 1e-6, 1e-6).unwrap();
        assert_eq!(s.error, 0.0);
        assert!(s.accepted);
        assert_eq!(s.h_next, 0.5);
    }

    #[test]
    fn dopri5_rejects_huge_step() {
        let s = dopri5_step(&growth, 0.0, &[1.0], 5.0, 1e-10, 1e-10).unwrap();
        assert!(!s.accepted);
        assert!(s.error > 1.0);
        assert!(s.h_next < 5.0);
    }

    #[test]
    fn dopri5_decay_matches_closed_form() {
        let decay = |_t: f64, z: &[f64], dz: &mut [f64]| dz[0] = -50.0 * z[0];
        let times: Vec<f64> = (1..=20).map(|i| i as f64 / 20.0).collect();
        let traj = solve_ode(&decay, &[1.0], 0.0, 1.0, &times, &SolverConfig::dopri5(1e-6, 1e-6)).unwrap();
        assert!(traj.rejected_steps + traj.accepted_steps > 0);
        for (t, s) in traj.eval_times.iter().zip(&traj.states) {
            let exact = (-50.0 * t).exp();
            assert!((s[0] - exact).abs() <= 1e-6 * exact + 1e-6, "t={t}: {} vs {exact}", s[0]);
        }
    }

    #[test]
    fn dopri5_nan_is_numerical_error() {
        let bad = |_t: f64, _z: &[f64], dz: &mut [f64]| dz[0] = f64::NAN;
        assert!(matches!(dopri5_step(&bad, 0.0, &[1.0], 0.1, 1e-6, 1e-6), Err(Error::Numerical(_))));
    }

    #[test]
    fn dopri5_underflow_is_instability() {
        // blows up at t = 1; the controller keeps shrinking the step
        let blowup = |_t: f64, z: &[f64], dz: &mut [f64]| dz[0] = z[0] * z[0];
        let mut cfg = SolverConfig::dopri5(1e-8, 1e-8);
        cfg.min_step = 1e-6;
        let err = solve_ode(&blowup, &[1.0], 0.0, 2.0, &[], &cfg).unwrap_err();
        assert!(matches!(err, Error::Instability(_) | Error::Numerical(_)), "{err}");
    }

    #[test]
    fn dopri5_and_rk4_agree_on_linear_fields() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let a: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let field = move |_t: f64, z: &[f64], dz: &mut [f64]| {
                for i in 0..3 {
                    dz[i] = (0..3).map(|j| a[i * 3 + j] * z[j]).sum();
                }
            };
            let z0 = [1.0, -0.5, 0.25];
            let (rtol, atol) = (1e-6, 1e-6);
            let fine = solve_ode(&field, &z0, 0.0, 1.0, &[], &SolverConfig::rk4(1e-4)).unwrap();
            let adaptive = solve_ode(&field, &z0, 0.0, 1.0, &[], &SolverConfig::dopri5(rtol, atol)).unwrap();
            let norm = fine.last().iter().map(|x| x * x).sum::<f64>().sqrt();
            for (x, y) in fine.last().iter().zip(adaptive.last()) {
                assert!((x - y).abs() < 10.0 * (rtol * norm + atol));
            }
        }
    }

    #[test]
    fn tape_length_and_replay() {
        let (traj, tape) = solve_ode_with_tape(&growth, &[1.0], 0.0, 1.0, &SolverConfig::rk4(0.1)).unwrap();
        assert_eq!(tape.len(), 11);
        assert_eq!(tape.final_state(), traj.last());
        let replayed = tape.replay(&growth).unwrap();
        assert_eq!(replayed, tape.states());
        assert!(matches!(
            solve_ode_with_tape(&growth, &[1.0], 0.0, 1.0, &SolverConfig::dopri5(1e-6, 1e-6)),
            Err(Error::Unsupported(_))
        ));
    }

    fn small_cde() -> CdeFunc<f64> {
        CdeFunc::new(
            vec![
                LayerSpec::new(3, 6, Activation::None),
                LayerSpec::new(6, 6, Activation::Relu),
                LayerSpec::new(6, 3, Activation::Tanh),
            ],
            3,
            1,
            17,
        )
        .unwrap()
    }

    #[test]
    fn tape_gradient_matches_finite_differences() {
        let func = small_cde();
        let control = IdentityControl { lo: 0.0, hi: 1.0 };
        let field = CdeField::new(&func, &control).unwrap();
        for cfg in [SolverConfig::rk4(0.05), SolverConfig::euler(0.05)] {
            let z0 = [0.2, -0.4, 0.7];
            let (_, tape) = solve_ode_with_tape(&field, &z0, 0.0, 1.0, &cfg).unwrap();
            let zf = tape.final_state();
            let cot: Vec<f64> = zf.iter().map(|z| 2.0 * z).collect();
            let (gz0, _) = tape.backward(&field, &cot).unwrap();
            let loss = |z0: &[f64]| -> f64 {
                let t = solve_ode(&field, z0, 0.0, 1.0, &[], &cfg).unwrap();
                t.last().iter().map(|z| z * z).sum()
            };
            let eps = 1e-6;
            for k in 0..3 {
                let mut p = z0;
                let mut m = z0;
                p[k] += eps;
                m[k] -= eps;
                let fd = (loss(&p) - loss(&m)) / (2.0 * eps);
                assert!((fd - gz0[k]).abs() / fd.abs().max(1e-8) < 1e-6, "{fd} vs {}", gz0[k]);
            }
        }
    }

    #[test]
    fn cde_with_identity_control_is_an_ode() {
        let func = small_cde();
        let control = IdentityControl { lo: 0.0, hi: 1.0 };
        let ode = |_t: f64, z: &[f64], dz: &mut [f64]| {
            let v = func.net().apply(z).unwrap();
            dz.copy_from_slice(&v);
        };
        let z0 = [0.1, 0.2, -0.3];
        for cfg in [SolverConfig::rk4(0.05), SolverConfig::euler(0.05), SolverConfig::dopri5(1e-7, 1e-9)] {
            let a = solve_cde(&func, &control, &z0, 0.0, 1.0, &[0.5, 1.0], &cfg).unwrap();
            let b = solve_ode(&ode, &z0, 0.0, 1.0, &[0.5, 1.0], &cfg).unwrap();
            for (x, y) in a.states.iter().flatten().zip(b.states.iter().flatten()) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn constant_control_freezes_state() {
        struct Flat;
        impl ControlPath<f64> for Flat {
            fn channels(&self) -> usize {
                1
            }
            fn domain(&self) -> (f64, f64) {
                (0.0, 1.0)
            }
            fn value_into(&self, _t: f64, out: &mut [f64]) -> Result<()> {
                out[0] = 2.0;
                Ok(())
            }
            fn derivative_into(&self, _t: f64, out: &mut [f64]) -> Result<()> {
                out[0] = 0.0;
                Ok(())
            }
        }
        let func = small_cde();
        let traj = solve_cde(&func, &Flat, &[0.3, 0.1, -0.2], 0.0, 1.0, &[], &SolverConfig::rk4(0.1)).unwrap();
        assert_eq!(traj.last(), &[0.3, 0.1, -0.2]);
        assert!(matches!(
            solve_cde(&func, &Flat, &[0.3, 0.1, -0.2], 0.0, 2.0, &[], &SolverConfig::rk4(0.1)),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn linear_cde_matches_fine_reference() {
        // f(z) = A (constant after tanh of fixed bias), X(t) = (t, sin t)
        struct Curve;
        impl ControlPath<f64> for Curve {
            fn channels(&self) -> usize {
                2
            }
            fn domain(&self) -> (f64, f64) {
                (0.0, 1.0)
            }
            fn value_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
                out[0] = t;
                out[1] = t.sin();
                Ok(())
            }
            fn derivative_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
                out[0] = 1.0;
                out[1] = t.cos();
                Ok(())
            }
        }
        let layers = vec![LayerSpec::new(2, 4, Activation::Tanh)];
        let mut params = vec![0.0; 12];
        let bias = [0.3, -0.5, 0.8, 0.1];
        params[8..].copy_from_slice(&bias);
        let func = CdeFunc::from_mlp(crate::nn::Mlp::with_params(layers, params).unwrap(), 2, 2).unwrap();
        let a: Vec<f64> = bias.iter().map(|b: &f64| b.tanh()).collect();
        // dz/dt = A dX/dt with constant A integrates exactly to A (X(1) - X(0)).
        let z0 = [0.5, -0.25];
        let coarse = solve_cde(&func, &Curve, &z0, 0.0, 1.0, &[], &SolverConfig::rk4(0.1)).unwrap();
        let fine = solve_cde(&func, &Curve, &z0, 0.0, 1.0, &[], &SolverConfig::rk4(1e-5)).unwrap();
        let dx = [1.0, 1f64.sin()];
        let exact = [z0[0] + a[0] * dx[0] + a[1] * dx[1], z0[1] + a[2] * dx[0] + a[3] * dx[1]];
        for i in 0..2 {
            assert!((fine.last()[i] - exact[i]).abs() < 1e-10);
            assert!((coarse.last()[i] - fine.last()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn adjoint_scalar_linear_field() {
        // dz/dt = w z: dL/dw = t1 e^{w t1} · dL/dz(t1) for z0 = 1, t0 = 0
        struct Scaled(f64);
        impl VectorField<f64> for Scaled {
            fn eval(&self, _t: f64, z: &[f64], dz: &mut [f64]) -> Result<()> {
                dz[0] = self.0 * z[0];
                Ok(())
            }
        }
        impl DifferentiableField<f64> for Scaled {
            fn num_params(&self) -> usize {
                1
            }
            fn vjp(&self, _t: f64, z: &[f64], cot: &[f64], gz: &mut [f64], gp: &mut [f64]) -> Result<()> {
                gz[0] += cot[0] * self.0;
                gp[0] += cot[0] * z[0];
                Ok(())
            }
        }
        let (w, t1, upstream) = (0.7, 1.5, 0.3);
        let field = Scaled(w);
        let grid = time_grid(0.0, t1, &[], &[], &SolverConfig::rk4(1e-3)).unwrap();
        let tape = solve_grid_with_tape(&field, &[1.0], &grid, Method::Rk4).unwrap();
        let (gz0, gw) = adjoint_backward(&field, tape.final_state(), &[upstream], &grid).unwrap();
        let exact_w = t1 * (w * t1).exp() * upstream;
        let exact_z0 = (w * t1).exp() * upstream;
        assert!((gw[0] - exact_w).abs() < 1e-9 * exact_w, "{} vs {exact_w}", gw[0]);
        assert!((gz0[0] - exact_z0).abs() < 1e-9 * exact_z0);
        let (zero_z, zero_p) = adjoint_backward(&field, tape.final_state(), &[0.0], &grid).unwrap();
        assert_eq!(zero_z, vec![0.0]);
        assert_eq!(zero_p, vec![0.0]);
    }
}
