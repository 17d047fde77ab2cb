//! Dense networks with hand-written reverse-mode gradients.
//!
//! Parameters of an [`Mlp`] live in one flat vector; layer `k` stores its
//! weight matrix row-major (`out × in`) followed by its bias.

mod adam;
pub mod checkpoint;
pub mod presets;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use adam::{clip_global_norm, Adam};

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    None,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::None => x,
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    #[inline]
    fn derivative_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::None => T::one(),
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
        }
    }

    /// Global Lipschitz constant of the activation.
    pub fn lipschitz(self) -> f64 {
        match self {
            Activation::Sigmoid => 0.25,
            _ => 1.0,
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
        }
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

pub fn validate_layers(layers: &[LayerSpec]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::Validation("network needs at least one layer".into()));
    }
    for (i, l) in layers.iter().enumerate() {
        if l.in_dim == 0 || l.out_dim == 0 {
            return Err(Error::Validation(format!("layer {i} has a zero dimension")));
        }
    }
    for (i, w) in layers.windows(2).enumerate() {
        if w[0].out_dim != w[1].in_dim {
            return Err(Error::Validation(format!(
                "layer {i} outputs {} but layer {} expects {}",
                w[0].out_dim,
                i + 1,
                w[1].in_dim
            )));
        }
    }
    Ok(())
}

pub fn param_count(layers: &[LayerSpec]) -> usize {
    layers.iter().map(LayerSpec::num_params).sum()
}

/// Deterministic initialisation: weights `U(-1/√in, 1/√in)`, zero biases.
pub fn init_params<T: Scalar>(layers: &[LayerSpec], seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(param_count(layers));
    for l in layers {
        let bound = 1.0 / (l.in_dim as f64).sqrt();
        for _ in 0..l.in_dim * l.out_dim {
            params.push(T::lit(rng.random_range(-bound..=bound)));
        }
        params.extend(std::iter::repeat_n(T::zero(), l.out_dim));
    }
    params
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct GradTape<T> {
    generation: u64,
    /// `activations[0]` is the input, `activations[k+1]` the output of layer `k`.
    activations: Vec<Vec<T>>,
}

impl<T: Scalar> GradTape<T> {
    pub fn output(&self) -> &[T] {
        self.activations.last().expect("tape has an input")
    }

    pub fn input(&self) -> &[T] {
        &self.activations[0]
    }
}

/// A multilayer perceptron owning its parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp<T> {
    layers: Vec<LayerSpec>,
    params: Vec<T>,
    #[serde(skip, default = "next_generation")]
    generation: u64,
}

impl<T: PartialEq> PartialEq for Mlp<T> {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.params == other.params
    }
}

impl<T: Scalar> Mlp<T> {
    pub fn new(layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        validate_layers(&layers)?;
        let params = init_params(&layers, seed);
        Ok(Self {
            layers,
            params,
            generation: next_generation(),
        })
    }

    pub fn with_params(layers: Vec<LayerSpec>, params: Vec<T>) -> Result<Self> {
        validate_layers(&layers)?;
        if params.len() != param_count(&layers) {
            return Err(Error::Validation(format!(
                "expected {} parameters, got {}",
                param_count(&layers),
                params.len()
            )));
        }
        Ok(Self {
            layers,
            params,
            generation: next_generation(),
        })
    }

    /// A single affine layer without activation.
    pub fn linear(in_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        Self::new(vec![LayerSpec::new(in_dim, out_dim, Activation::None)], seed)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    /// Replace all parameters; tapes recorded before this call become stale.
    pub fn set_params(&mut self, params: &[T]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Validation(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params.copy_from_slice(params);
        self.generation = next_generation();
        Ok(())
    }

    /// Mutable access to the parameters; tapes recorded before this call become stale.
    pub fn params_mut(&mut self) -> &mut [T] {
        self.generation = next_generation();
        &mut self.params
    }

    fn check_input(&self, input: &[T]) -> Result<()> {
        if input.len() != self.in_dim() {
            return Err(Error::Validation(format!(
                "network expects input of length {}, got {}",
                self.in_dim(),
                input.len()
            )));
        }
        Ok(())
    }

    fn layer_forward(&self, offset: usize, l: &LayerSpec, x: &[T], out: &mut Vec<T>) {
        let w = &self.params[offset..offset + l.in_dim * l.out_dim];
        let b = &self.params[offset + l.in_dim * l.out_dim..offset + l.num_params()];
        out.clear();
        out.extend(w.chunks_exact(l.in_dim).zip(b).map(|(row, &bias)| {
            let s = row.iter().zip(x).fold(bias, |acc, (&wi, &xi)| acc + wi * xi);
            l.activation.apply(s)
        }));
    }

    /// Forward pass without recording intermediates.
    pub fn apply(&self, input: &[T]) -> Result<Vec<T>> {
        self.check_input(input)?;
        let mut cur = input.to_vec();
        let mut next = Vec::new();
        let mut offset = 0;
        for l in &self.layers {
            self.layer_forward(offset, l, &cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
            offset += l.num_params();
        }
        Ok(cur)
    }

    /// Forward pass recording everything [`Mlp::backward`] needs.
    pub fn forward(&self, input: &[T]) -> Result<(Vec<T>, GradTape<T>)> {
        self.check_input(input)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_vec());
        let mut offset = 0;
        for l in &self.layers {
            let mut out = Vec::with_capacity(l.out_dim);
            self.layer_forward(offset, l, activations.last().expect("input"), &mut out);
            activations.push(out);
            offset += l.num_params();
        }
        let output = activations.last().expect("output").clone();
        Ok((
            output,
            GradTape {
                generation: self.generation,
                activations,
            },
        ))
    }

    /// Gradients of `upstreamᵀ · output` with respect to the input and parameters.
    pub fn backward(&self, tape: &GradTape<T>, upstream: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        let mut grad_params = vec![T::zero(); self.params.len()];
        let grad_input = self.backward_accumulate(tape, upstream, &mut grad_params)?;
        Ok((grad_input, grad_params))
    }

    /// Like [`Mlp::backward`] but adds the parameter gradient into `grad_params`.
    pub fn backward_accumulate(&self, tape: &GradTape<T>, upstream: &[T], grad_params: &mut [T]) -> Result<Vec<T>> {
        if tape.generation != self.generation {
            return Err(Error::Usage("gradient tape was recorded with different parameters".into()));
        }
        if upstream.len() != self.out_dim() {
            return Err(Error::Validation(format!(
                "upstream gradient has length {}, output has {}",
                upstream.len(),
                self.out_dim()
            )));
        }
        if grad_params.len() != self.params.len() {
            return Err(Error::Validation("gradient buffer has the wrong length".into()));
        }
        let mut delta = upstream.to_vec();
        let mut offset = self.params.len();
        for (k, l) in self.layers.iter().enumerate().rev() {
            offset -= l.num_params();
            let x = &tape.activations[k];
            let y = &tape.activations[k + 1];
            for (d, &yi) in delta.iter_mut().zip(y) {
                *d *= l.activation.derivative_from_output(yi);
            }
            let nw = l.in_dim * l.out_dim;
            let (gw, gb) = grad_params[offset..offset + l.num_params()].split_at_mut(nw);
            let w = &self.params[offset..offset + nw];
            let mut next = vec![T::zero(); l.in_dim];
            for (o, &d) in delta.iter().enumerate() {
                gb[o] += d;
                if d == T::zero() {
                    continue;
                }
                let row = o * l.in_dim;
                for i in 0..l.in_dim {
                    gw[row + i] += d * x[i];
                    next[i] += d * w[row + i];
                }
            }
            delta = next;
        }
        Ok(delta)
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Validation(format!(
                "cannot reshape {} values into {rows}×{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn into_flat(self) -> Vec<T> {
        self.data
    }

    pub fn matvec(&self, v: &[T]) -> Vec<T> {
        matvec(&self.data, self.cols, v)
    }
}

/// `M · v` for a row-major `M` with `cols` columns.
pub(crate) fn matvec<T: Scalar>(m: &[T], cols: usize, v: &[T]) -> Vec<T> {
    m.chunks_exact(cols)
        .map(|row| row.iter().zip(v).fold(T::zero(), |acc, (&a, &b)| acc + a * b))
        .collect()
}

/// A CDE function: an MLP `ℝ^H → ℝ^{H·D}` read as an `H × D` matrix field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdeFunc<T> {
    net: Mlp<T>,
    hidden_dim: usize,
    path_dim: usize,
}

impl<T: Scalar> CdeFunc<T> {
    pub fn new(layers: Vec<LayerSpec>, hidden_dim: usize, path_dim: usize, seed: u64) -> Result<Self> {
        Self::check_layers(&layers, hidden_dim, path_dim)?;
        Ok(Self {
            net: Mlp::new(layers, seed)?,
            hidden_dim,
            path_dim,
        })
    }

    pub fn from_mlp(net: Mlp<T>, hidden_dim: usize, path_dim: usize) -> Result<Self> {
        Self::check_layers(net.layers(), hidden_dim, path_dim)?;
        Ok(Self {
            net,
            hidden_dim,
            path_dim,
        })
    }

    fn check_layers(layers: &[LayerSpec], hidden_dim: usize, path_dim: usize) -> Result<()> {
        validate_layers(layers)?;
        if layers[0].in_dim != hidden_dim {
            return Err(Error::Validation(format!(
                "CDE function input must be the hidden width {hidden_dim}, got {}",
                layers[0].in_dim
            )));
        }
        let last = layers[layers.len() - 1];
        if last.out_dim != hidden_dim * path_dim {
            return Err(Error::Validation(format!(
                "CDE function output must be {hidden_dim}×{path_dim} = {}, got {}",
                hidden_dim * path_dim,
                last.out_dim
            )));
        }
        if last.activation != Activation::Tanh {
            return Err(Error::Validation("CDE function must end in tanh".into()));
        }
        if layers.iter().any(|l| l.activation.lipschitz() > 1.0) {
            return Err(Error::Validation("activations must be 1-Lipschitz".into()));
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn path_dim(&self) -> usize {
        self.path_dim
    }

    pub fn net(&self) -> &Mlp<T> {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp<T> {
        &mut self.net
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }

    /// `f(z)` as an `H × D` matrix (row-major reshape of the network output).
    pub fn vector_field(&self, z: &[T]) -> Result<Matrix<T>> {
        let out = self.net.apply(z)?;
        Matrix::from_row_major(self.hidden_dim, self.path_dim, out)
    }

    /// `f(z) · dx` without recording a tape.
    pub fn apply(&self, z: &[T], dx: &[T]) -> Result<Vec<T>> {
        let out = self.net.apply(z)?;
        Ok(matvec(&out, self.path_dim, dx))
    }

    /// `f(z) · dx` together with the network tape.
    pub fn apply_taped(&self, z: &[T], dx: &[T]) -> Result<(Vec<T>, GradTape<T>)> {
        let (out, tape) = self.net.forward(z)?;
        Ok((matvec(&out, self.path_dim, dx), tape))
    }

    /// Reverse pass of `v = f(z)·dx` for cotangent `cot` on `v`.
    ///
    /// Returns the cotangent of `z`, adds `dx`'s cotangent into `grad_dx` when
    /// given and the parameter gradient into `grad_params`.
    pub fn apply_backward(
        &self,
        tape: &GradTape<T>,
        dx: &[T],
        cot: &[T],
        grad_dx: Option<&mut [T]>,
        grad_params: &mut [T],
    ) -> Result<Vec<T>> {
        let d = self.path_dim;
        let mut upstream = Vec::with_capacity(self.hidden_dim * d);
        for &c in cot {
            upstream.extend(dx.iter().map(|&x| c * x));
        }
        if let Some(gdx) = grad_dx {
            let field = tape.output();
            for (i, &c) in cot.iter().enumerate() {
                for j in 0..d {
                    gdx[j] += c * field[i * d + j];
                }
            }
        }
        self.net.backward_accumulate(tape, &upstream, grad_params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn three_layer() -> Mlp<f64> {
        Mlp::new(
            vec![
                LayerSpec::new(3, 5, Activation::None),
                LayerSpec::new(5, 4, Activation::Tanh),
                LayerSpec::new(4, 2, Activation::Sigmoid),
            ],
            11,
        )
        .unwrap()
    }

    /// Independent straight-line evaluation with explicit loops.
    fn loop_forward(layers: &[LayerSpec], params: &[f64], input: &[f64]) -> Vec<f64> {
        let mut x = input.to_vec();
        let mut off = 0;
        for l in layers {
            let mut y = vec![0.0; l.out_dim];
            for o in 0..l.out_dim {
                let mut s = params[off + l.in_dim * l.out_dim + o];
                for i in 0..l.in_dim {
                    s += params[off + o * l.in_dim + i] * x[i];
                }
                y[o] = match l.activation {
                    Activation::None => s,
                    Activation::Relu => {
                        if s > 0.0 {
                            s
                        } else {
                            0.0
                        }
                    }
                    Activation::Tanh => s.tanh(),
                    Activation::Sigmoid => 1.0 / (1.0 + (-s).exp()),
                };
            }
            off += l.num_params();
            x = y;
        }
        x
    }

    #[test]
    fn init_is_deterministic_and_seeded() {
        let layers = vec![LayerSpec::new(4, 6, Activation::Relu)];
        let a: Vec<f64> = init_params(&layers, 3);
        let b: Vec<f64> = init_params(&layers, 3);
        let c: Vec<f64> = init_params(&layers, 4);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a[..24].iter().all(|w| w.abs() <= 0.5));
        assert!(a[24..].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn forward_matches_loop_oracle() {
        let net = three_layer();
        let x = [0.3, -1.2, 0.8];
        let (y, tape) = net.forward(&x).unwrap();
        let want = loop_forward(net.layers(), net.params(), &x);
        for (a, b) in y.iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(tape.output(), y.as_slice());
        assert_eq!(net.apply(&x).unwrap(), y);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let layers = vec![
            LayerSpec::new(2, 3, Activation::Relu),
            LayerSpec::new(3, 2, Activation::Tanh),
        ];
        let net = Mlp::with_params(layers.clone(), vec![0.0; param_count(&layers)]).unwrap();
        assert_eq!(net.apply(&[1.0, -2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_linear_layer() {
        let layers = vec![LayerSpec::new(3, 3, Activation::None)];
        let mut p = vec![0.0; 12];
        p[0] = 1.0;
        p[4] = 1.0;
        p[8] = 1.0;
        let net = Mlp::with_params(layers, p).unwrap();
        assert_eq!(net.apply(&[1.5, -2.0, 0.25]).unwrap(), vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn dimension_mismatch() {
        let net = three_layer();
        assert!(matches!(net.forward(&[1.0]), Err(Error::Validation(_))));
        let (_, tape) = net.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(net.backward(&tape, &[1.0]), Err(Error::Validation(_))));
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let net = three_layer();
        let (_, tape) = net.forward(&[0.1, 0.2, 0.3]).unwrap();
        let (gi, gp) = net.backward(&tape, &[0.0, 0.0]).unwrap();
        assert!(gi.iter().chain(&gp).all(|&g| g == 0.0));
    }

    #[test]
    fn linear_layer_closed_form() {
        let net = Mlp::<f64>::linear(3, 2, 5).unwrap();
        let x = [0.5, -1.0, 2.0];
        let u = [0.7, -0.3];
        let (_, tape) = net.forward(&x).unwrap();
        let (_, gp) = net.backward(&tape, &u).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(gp[i * 3 + j], u[i] * x[j]);
            }
            assert_eq!(gp[6 + i], u[i]);
        }
    }

    #[test]
    fn stale_tape_rejected() {
        let mut net = three_layer();
        let (_, tape) = net.forward(&[0.1, 0.2, 0.3]).unwrap();
        let p = net.params().to_vec();
        net.set_params(&p).unwrap();
        assert!(matches!(net.backward(&tape, &[1.0, 1.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = Mlp::<f64>::new(
            vec![
                LayerSpec::new(3, 6, Activation::None),
                LayerSpec::new(6, 6, Activation::Relu),
                LayerSpec::new(6, 4, Activation::Tanh),
            ],
            23,
        )
        .unwrap();
        let x = [0.4, -0.7, 1.1];
        let u = [0.3, -1.0, 0.5, 0.9];
        let (_, tape) = net.forward(&x).unwrap();
        let (gi, gp) = net.backward(&tape, &u).unwrap();
        let objective = |p: &[f64], x: &[f64]| -> f64 {
            let y = loop_forward(net.layers(), p, x);
            y.iter().zip(&u).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for k in 0..gp.len() {
            let mut pp = net.params().to_vec();
            let mut pm = pp.clone();
            pp[k] += eps;
            pm[k] -= eps;
            let fd = (objective(&pp, &x) - objective(&pm, &x)) / (2.0 * eps);
            worst = worst.max((fd - gp[k]).abs() / fd.abs().max(gp[k].abs()).max(1e-3));
        }
        for k in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += eps;
            xm[k] -= eps;
            let fd = (objective(net.params(), &xp) - objective(net.params(), &xm)) / (2.0 * eps);
            worst = worst.max((fd - gi[k]).abs() / fd.abs().max(gi[k].abs()).max(1e-3));
        }
        assert!(worst < 1e-6, "max relative error {worst}");
    }

    #[test]
    fn activations_are_lipschitz() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for act in [Activation::Relu, Activation::Tanh, Activation::Sigmoid, Activation::None] {
            for _ in 0..1000 {
                let a: f64 = rng.random_range(-10.0..10.0);
                let b: f64 = rng.random_range(-10.0..10.0);
                let lhs = (act.apply(a) - act.apply(b)).abs();
                assert!(lhs <= act.lipschitz() * (a - b).abs() + 1e-15);
            }
        }
    }

    #[test]
    fn cde_func_shape_rules() {
        let ok = vec![
            LayerSpec::new(2, 8, Activation::Relu),
            LayerSpec::new(8, 6, Activation::Tanh),
        ];
        assert!(CdeFunc::<f64>::new(ok, 2, 3, 0).is_ok());
        let wrong_out = vec![LayerSpec::new(2, 5, Activation::Tanh)];
        assert!(CdeFunc::<f64>::new(wrong_out, 2, 3, 0).is_err());
        let wrong_act = vec![LayerSpec::new(2, 6, Activation::Relu)];
        assert!(CdeFunc::<f64>::new(wrong_act, 2, 3, 0).is_err());
    }

    #[test]
    fn vector_field_reshape() {
        let f = CdeFunc::<f64>::new(vec![LayerSpec::new(1, 1, Activation::Tanh)], 1, 1, 9).unwrap();
        let m = f.vector_field(&[0.4]).unwrap();
        assert_eq!((m.rows, m.cols), (1, 1));
        assert_eq!(m.get(0, 0), f.net().apply(&[0.4]).unwrap()[0]);

        let f = CdeFunc::<f64>::new(vec![LayerSpec::new(3, 6, Activation::Tanh)], 3, 2, 9).unwrap();
        let z = [0.1, -0.4, 0.3];
        let m = f.vector_field(&z).unwrap();
        let flat = f.net().apply(&z).unwrap();
        for r in 0..3 {
            for c in 0..2 {
                assert_eq!(m.get(r, c), flat[r * 2 + c]);
            }
        }
        assert_eq!(m.clone().into_flat(), flat);
        let back = Matrix::from_row_major(3, 2, flat.clone()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn field_times_vector_matches_elementwise_product() {
        let f = CdeFunc::<f64>::new(
            vec![
                LayerSpec::new(3, 5, Activation::Relu),
                LayerSpec::new(5, 12, Activation::Tanh),
            ],
            3,
            4,
            2,
        )
        .unwrap();
        let z = [0.2, 0.5, -0.1];
        let v = [1.0, -2.0, 0.5, 0.25];
        let flat = f.net().apply(&z).unwrap();
        let product = f.apply(&z, &v).unwrap();
        for r in 0..3 {
            let mut s = 0.0;
            for c in 0..4 {
                s += flat[r * 4 + c] * v[c];
            }
            assert!((product[r] - s).abs() < 1e-15);
        }
    }

    #[test]
    fn apply_backward_matches_finite_differences() {
        let f = CdeFunc::<f64>::new(
            vec![
                LayerSpec::new(2, 5, Activation::None),
                LayerSpec::new(5, 5, Activation::Relu),
                LayerSpec::new(5, 6, Activation::Tanh),
            ],
            2,
            3,
            4,
        )
        .unwrap();
        let z = [0.3, -0.6];
        let dx = [0.5, 1.5, -0.7];
        let cot = [0.8, -1.1];
        let (_, tape) = f.apply_taped(&z, &dx).unwrap();
        let mut gp = vec![0.0; f.num_params()];
        let mut gdx = vec![0.0; 3];
        let gz = f.apply_backward(&tape, &dx, &cot, Some(&mut gdx), &mut gp).unwrap();
        let obj = |z: &[f64], dx: &[f64]| -> f64 {
            let v = f.apply(z, dx).unwrap();
            v[0] * cot[0] + v[1] * cot[1]
        };
        let eps = 1e-6;
        for k in 0..2 {
            let mut zp = z;
            let mut zm = z;
            zp[k] += eps;
            zm[k] -= eps;
            let fd = (obj(&zp, &dx) - obj(&zm, &dx)) / (2.0 * eps);
            assert!((fd - gz[k]).abs() < 1e-8);
        }
        for k in 0..3 {
            let mut p = dx;
            let mut m = dx;
            p[k] += eps;
            m[k] -= eps;
            let fd = (obj(&z, &p) - obj(&z, &m)) / (2.0 * eps);
            assert!((fd - gdx[k]).abs() < 1e-8);
        }
    }
}
