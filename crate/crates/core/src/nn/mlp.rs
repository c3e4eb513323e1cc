//! Dense ReLU network with hand-written reverse-mode derivatives.
//!
//! Parameters live in one flat buffer. For every layer the row-major weight
//! matrix `(out, in)` is followed by its bias vector, so a gradient is simply
//! another buffer of the same length. Inputs are standardized inside the
//! network with the stored [`NormStats`], and the linear output is multiplied
//! by a fixed `output_scale`, so every derivative below is taken with respect
//! to raw inputs and raw outputs.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Features, NormStats, N_FEATURES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

pub const MAX_HIDDEN_LAYERS: usize = 16;
pub const MAX_HIDDEN_SIZE: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArch {
    pub input_dim: usize,
    pub hidden_layers: usize,
    pub hidden_size: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

impl Default for MlpArch {
    fn default() -> Self {
        Self::new(4, 100)
    }
}

impl MlpArch {
    pub fn new(hidden_layers: usize, hidden_size: usize) -> Self {
        Self {
            input_dim: N_FEATURES,
            hidden_layers,
            hidden_size,
            output_dim: 1,
            activation: Activation::Relu,
        }
    }

    /// A single affine map from inputs to output. Useful for closed-form checks.
    pub fn linear() -> Self {
        Self::new(0, 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim != N_FEATURES {
            return Err(Error::InvalidArch(format!(
                "input_dim must be {N_FEATURES}, got {}",
                self.input_dim
            )));
        }
        if self.output_dim != 1 {
            return Err(Error::InvalidArch(format!(
                "output_dim must be 1, got {}",
                self.output_dim
            )));
        }
        if self.hidden_layers > MAX_HIDDEN_LAYERS {
            return Err(Error::InvalidArch(format!(
                "hidden_layers must be at most {MAX_HIDDEN_LAYERS}, got {}",
                self.hidden_layers
            )));
        }
        if !(1..=MAX_HIDDEN_SIZE).contains(&self.hidden_size) {
            return Err(Error::InvalidArch(format!(
                "hidden_size must lie in 1..={MAX_HIDDEN_SIZE}, got {}",
                self.hidden_size
            )));
        }
        Ok(())
    }

    /// Widths from input to output, e.g. `[6, 10, 1]` for one hidden layer of 10.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(std::iter::repeat_n(self.hidden_size, self.hidden_layers));
        dims.push(self.output_dim);
        dims
    }

    pub fn n_params(&self) -> usize {
        self.layer_dims()
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerSpan {
    rows: usize,
    cols: usize,
    w: usize,
    b: usize,
}

fn layout(arch: &MlpArch) -> Vec<LayerSpan> {
    let mut offset = 0;
    arch.layer_dims()
        .windows(2)
        .map(|w| {
            let span = LayerSpan {
                rows: w[1],
                cols: w[0],
                w: offset,
                b: offset + w[0] * w[1],
            };
            offset += w[0] * w[1] + w[1];
            span
        })
        .collect()
}

/// Parameter-shaped buffer (gradients, moment estimates).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(Vec<f64>);

impl Gradient {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn add_assign(&mut self, other: &Gradient) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn add_scaled(&mut self, other: &Gradient, factor: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += factor * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.iter_mut().for_each(|a| *a *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Cached activations of one forward pass, reused across calls.
#[derive(Debug, Clone)]
pub struct Trace {
    xhat: Features,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
    output: f64,
}

impl Trace {
    pub fn output(&self) -> f64 {
        self.output
    }

    /// Smallest |pre-activation| over the hidden units; distance to the
    /// nearest ReLU kink.
    pub fn min_abs_preactivation(&self) -> f64 {
        let hidden = self.pre.len().saturating_sub(1);
        self.pre[..hidden]
            .iter()
            .flatten()
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    arch: MlpArch,
    norm: NormStats,
    output_scale: f64,
    params: Vec<f64>,
    layout: Vec<LayerSpan>,
}

impl MlpModel {
    /// All-zero parameters with identity input statistics.
    pub fn zeros(arch: MlpArch) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch,
            norm: NormStats::identity(),
            output_scale: 1.0,
            params: vec![0.0; arch.n_params()],
            layout: layout(&arch),
        })
    }

    /// Uniform weights `U(-a, a)` with `a = sqrt(6 / fan_in)`, i.e. standard
    /// deviation `sqrt(2 / fan_in)`; zero biases.
    pub fn init(arch: MlpArch, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for span in m.layout.clone() {
            let a = (6.0 / span.cols as f64).sqrt();
            for w in &mut m.params[span.w..span.b] {
                *w = rng.random_range(-a..a);
            }
        }
        Ok(m)
    }

    pub fn from_parts(
        arch: MlpArch,
        norm: NormStats,
        output_scale: f64,
        params: Vec<f64>,
    ) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.n_params() {
            return Err(Error::ShapeMismatch {
                expected: arch.n_params(),
                got: params.len(),
            });
        }
        if !params.iter().all(|p| p.is_finite()) {
            return Err(Error::InvalidArch("non-finite parameter".into()));
        }
        if !norm.is_valid() {
            return Err(Error::InvalidArch("invalid normalization statistics".into()));
        }
        if !(output_scale.is_finite() && output_scale > 0.0) {
            return Err(Error::InvalidArch(format!("invalid output scale {output_scale}")));
        }
        Ok(Self {
            arch,
            norm,
            output_scale,
            params,
            layout: layout(&arch),
        })
    }

    pub fn arch(&self) -> &MlpArch {
        &self.arch
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    pub fn set_norm(&mut self, norm: NormStats) {
        self.norm = norm;
    }

    pub fn output_scale(&self) -> f64 {
        self.output_scale
    }

    pub fn set_output_scale(&mut self, scale: f64) {
        self.output_scale = scale;
    }

    pub fn n_layers(&self) -> usize {
        self.layout.len()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// `(rows, cols)` of layer `l`'s weight matrix.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.layout[l].rows, self.layout[l].cols)
    }

    /// Splits a parameter-shaped buffer into layer `l`'s weights and bias.
    pub fn layer_slices<'a>(&self, flat: &'a [f64], l: usize) -> (&'a [f64], &'a [f64]) {
        let s = self.layout[l];
        (&flat[s.w..s.b], &flat[s.b..s.b + s.rows])
    }

    pub fn layer_slices_mut<'a>(
        &self,
        flat: &'a mut [f64],
        l: usize,
    ) -> (&'a mut [f64], &'a mut [f64]) {
        let s = self.layout[l];
        let (w, rest) = flat[s.w..s.b + s.rows].split_at_mut(s.b - s.w);
        (w, rest)
    }

    pub fn weights(&self, l: usize) -> &[f64] {
        self.layer_slices(&self.params, l).0
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        self.layer_slices(&self.params, l).1
    }

    pub fn zero_grad(&self) -> Gradient {
        Gradient::zeros(self.params.len())
    }

    pub fn new_trace(&self) -> Trace {
        let dims = self.arch.layer_dims();
        let outs: Vec<Vec<f64>> = dims[1..].iter().map(|&d| vec![0.0; d]).collect();
        Trace {
            xhat: [0.0; N_FEATURES],
            pre: outs.clone(),
            post: outs[..outs.len() - 1].to_vec(),
            delta: outs,
            output: 0.0,
        }
    }

    /// Forward pass that records activations in `trace`.
    pub fn forward_traced(&self, x: &Features, trace: &mut Trace) -> Result<f64> {
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        trace.xhat = self.norm.standardize(x);
        let last = self.layout.len() - 1;
        for (l, span) in self.layout.iter().enumerate() {
            let (w, b) = (&self.params[span.w..span.b], &self.params[span.b..span.b + span.rows]);
            let pre = &mut trace.pre[l];
            let input: &[f64] = if l == 0 { &trace.xhat } else { &trace.post[l - 1] };
            for r in 0..span.rows {
                let row = &w[r * span.cols..(r + 1) * span.cols];
                pre[r] = b[r] + dot(row, input);
            }
            if l < last {
                for (o, &z) in trace.post[l].iter_mut().zip(pre.iter()) {
                    *o = relu(z);
                }
            }
        }
        trace.output = self.output_scale * trace.pre[last][0];
        Ok(trace.output)
    }

    pub fn forward(&self, x: &Features) -> Result<f64> {
        let mut t = self.new_trace();
        self.forward_traced(x, &mut t)
    }

    /// Reverse pass over a recorded trace. Seeds the output pre-activation
    /// with `top`, accumulates parameter gradients into `grad` when given and
    /// returns the gradient with respect to the standardized input.
    fn backprop(&self, trace: &mut Trace, top: f64, mut grad: Option<&mut [f64]>) -> Features {
        let last = self.layout.len() - 1;
        trace.delta[last][0] = top;
        let mut dxhat = [0.0; N_FEATURES];
        for l in (0..=last).rev() {
            let span = self.layout[l];
            let w = &self.params[span.w..span.b];
            let (lower, upper) = trace.delta.split_at_mut(l);
            let delta = &upper[0];
            if let Some(g) = grad.as_deref_mut() {
                let input: &[f64] = if l == 0 { &trace.xhat } else { &trace.post[l - 1] };
                let (gw, gb) = g[span.w..span.b + span.rows].split_at_mut(span.b - span.w);
                for r in 0..span.rows {
                    let d = delta[r];
                    if d == 0.0 {
                        continue;
                    }
                    gb[r] += d;
                    for (gwc, &xc) in gw[r * span.cols..(r + 1) * span.cols].iter_mut().zip(input) {
                        *gwc += d * xc;
                    }
                }
            }
            let out: &mut [f64] = if l == 0 { &mut dxhat } else { &mut lower[l - 1] };
            out.iter_mut().for_each(|o| *o = 0.0);
            for r in 0..span.rows {
                let d = delta[r];
                if d == 0.0 {
                    continue;
                }
                for (o, &wrc) in out.iter_mut().zip(&w[r * span.cols..(r + 1) * span.cols]) {
                    *o += wrc * d;
                }
            }
            if l > 0 {
                for (o, &z) in out.iter_mut().zip(&trace.pre[l - 1]) {
                    if z <= 0.0 {
                        *o = 0.0;
                    }
                }
            }
        }
        dxhat
    }

    /// Accumulates `upstream * dNN/dθ` into `grad` and returns
    /// `upstream * dNN/dx` with respect to the raw input.
    pub fn backward_traced(&self, trace: &mut Trace, upstream: f64, grad: &mut Gradient) -> Features {
        let dxhat = self.backprop(trace, upstream * self.output_scale, Some(&mut grad.0));
        std::array::from_fn(|j| dxhat[j] / self.norm.std[j])
    }

    /// Gradient of `upstream * NN(x)` with respect to the parameters.
    pub fn grad_params(&self, x: &Features, upstream: f64) -> Result<Gradient> {
        let mut t = self.new_trace();
        self.forward_traced(x, &mut t)?;
        let mut g = self.zero_grad();
        self.backward_traced(&mut t, upstream, &mut g);
        Ok(g)
    }

    /// Gradient of `NN(x)` with respect to the raw (unstandardized) input.
    pub fn grad_input(&self, x: &Features) -> Result<Features> {
        let mut t = self.new_trace();
        self.forward_traced(x, &mut t)?;
        let dxhat = self.backprop(&mut t, self.output_scale, None);
        Ok(std::array::from_fn(|j| dxhat[j] / self.norm.std[j]))
    }

    /// Smoothness penalty `(1/M) Σ_{j ∈ env} (dNN/dx_j)²` and its parameter
    /// gradient, accumulated into `grad`.
    ///
    /// With ReLU the activation pattern is locally constant in the
    /// parameters, so the input gradient is a product of masked weight
    /// matrices `W₀ᵀ D₀ W₁ᵀ D₁ … W_Lᵀ`. Differentiating that product gives,
    /// for every layer, an outer product of the reverse-pass deltas with a
    /// forward propagation of the penalty's sensitivity `r` through the
    /// masked layers. Biases only move the masks and get zero gradient.
    pub fn smoothness_traced(
        &self,
        trace: &mut Trace,
        env_indices: &[usize],
        grad: &mut Gradient,
    ) -> Result<f64> {
        check_env_indices(env_indices)?;
        let s = self.output_scale;
        let dxhat = self.backprop(trace, 1.0, None);
        let m = env_indices.len() as f64;
        let mut penalty = 0.0;
        let mut r = vec![0.0; N_FEATURES];
        for &j in env_indices {
            let g = s * dxhat[j] / self.norm.std[j];
            penalty += g * g;
            r[j] += 2.0 / m * g * s / self.norm.std[j];
        }
        penalty /= m;

        let last = self.layout.len() - 1;
        let mut p = r;
        for (l, span) in self.layout.iter().enumerate() {
            let w = &self.params[span.w..span.b];
            let gw = &mut grad.0[span.w..span.b];
            let delta = &trace.delta[l];
            for row in 0..span.rows {
                let d = delta[row];
                if d == 0.0 {
                    continue;
                }
                for (gwc, &pc) in gw[row * span.cols..(row + 1) * span.cols].iter_mut().zip(&p) {
                    *gwc += d * pc;
                }
            }
            if l < last {
                let pre = &trace.pre[l];
                p = (0..span.rows)
                    .map(|row| {
                        if pre[row] > 0.0 {
                            dot(&w[row * span.cols..(row + 1) * span.cols], &p)
                        } else {
                            0.0
                        }
                    })
                    .collect();
            }
        }
        Ok(penalty)
    }

    pub fn smoothness_grad_params(&self, x: &Features, env_indices: &[usize]) -> Result<(f64, Gradient)> {
        check_env_indices(env_indices)?;
        let mut t = self.new_trace();
        self.forward_traced(x, &mut t)?;
        let mut g = self.zero_grad();
        let penalty = self.smoothness_traced(&mut t, env_indices, &mut g)?;
        Ok((penalty, g))
    }
}

/// Sums of the forward-difference and smoothness terms over a batch.
#[derive(Debug, Clone)]
pub(crate) struct BatchTerms {
    pub fd_value: f64,
    pub fd_grad: Gradient,
    pub penalty_sum: f64,
    pub penalty_grad: Option<Gradient>,
}

impl MlpModel {
    fn layer_matrix(&self, l: usize) -> DMatrix<f64> {
        let span = self.layout[l];
        DMatrix::from_row_slice(span.rows, span.cols, &self.params[span.w..span.b])
    }

    /// Adds a `(rows, cols)` matrix into the row-major weight block of layer `l`.
    fn add_weight_grad(&self, grad: &mut [f64], l: usize, dw: &DMatrix<f64>) {
        let span = self.layout[l];
        let gw = &mut grad[span.w..span.b];
        for r in 0..span.rows {
            for c in 0..span.cols {
                gw[r * span.cols + c] += dw[(r, c)];
            }
        }
    }

    /// Whole-batch version of the per-sample forward and reverse passes, with
    /// one row per sample: `Σ (target − NN(x))²` and its gradient, plus the
    /// summed smoothness penalty and its gradient when `env` is given.
    pub(crate) fn batch_terms(&self, inputs: &[Features], targets: &[f64], env: Option<&[usize]>) -> Result<BatchTerms> {
        if inputs.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        if let Some(env) = env {
            check_env_indices(env)?;
        }
        let b = inputs.len();
        let last = self.layout.len() - 1;
        let s = self.output_scale;
        let weights: Vec<DMatrix<f64>> = (0..=last).map(|l| self.layer_matrix(l)).collect();

        // forward: pre[l] is (b, rows_l)
        let xhat = DMatrix::from_fn(b, N_FEATURES, |i, j| (inputs[i][j] - self.norm.mean[j]) / self.norm.std[j]);
        let mut pre: Vec<DMatrix<f64>> = Vec::with_capacity(last + 1);
        let mut post: Vec<DMatrix<f64>> = Vec::with_capacity(last);
        for l in 0..=last {
            let input = if l == 0 { &xhat } else { &post[l - 1] };
            let mut z = input * weights[l].transpose();
            let span = self.layout[l];
            let bias = &self.params[span.b..span.b + span.rows];
            for (c, mut col) in z.column_iter_mut().enumerate() {
                col.add_scalar_mut(bias[c]);
            }
            if l < last {
                post.push(z.map(relu));
            }
            pre.push(z);
        }
        let resid: Vec<f64> = (0..b).map(|i| targets[i] - s * pre[last][(i, 0)]).collect();
        let fd_value = resid.iter().map(|r| r * r).sum();

        let mask = |d: &mut DMatrix<f64>, z: &DMatrix<f64>| {
            d.zip_apply(z, |dv, zv| {
                if zv <= 0.0 {
                    *dv = 0.0
                }
            })
        };

        // reverse pass for the squared residuals
        let mut fd_grad = self.zero_grad();
        let mut delta = DMatrix::from_fn(b, 1, |i, _| -2.0 * resid[i] * s);
        for l in (0..=last).rev() {
            let input = if l == 0 { &xhat } else { &post[l - 1] };
            self.add_weight_grad(&mut fd_grad.0, l, &(delta.transpose() * input));
            let span = self.layout[l];
            for (c, g) in fd_grad.0[span.b..span.b + span.rows].iter_mut().enumerate() {
                *g += delta.column(c).sum();
            }
            if l > 0 {
                let mut next = &delta * &weights[l];
                mask(&mut next, &pre[l - 1]);
                delta = next;
            }
        }

        let Some(env) = env else {
            return Ok(BatchTerms {
                fd_value,
                fd_grad,
                penalty_sum: 0.0,
                penalty_grad: None,
            });
        };

        // unit-seeded deltas give the input gradient of every sample
        let mut deltas: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, 0); last + 1];
        deltas[last] = DMatrix::from_element(b, 1, 1.0);
        for l in (1..=last).rev() {
            let mut next = &deltas[l] * &weights[l];
            mask(&mut next, &pre[l - 1]);
            deltas[l - 1] = next;
        }
        let dxhat = &deltas[0] * &weights[0];
        let m = env.len() as f64;
        let mut penalty_sum = 0.0;
        let mut p = DMatrix::<f64>::zeros(b, N_FEATURES);
        for &j in env {
            let k = s / self.norm.std[j];
            for i in 0..b {
                let g = k * dxhat[(i, j)];
                penalty_sum += g * g / m;
                p[(i, j)] += 2.0 / m * g * k;
            }
        }
        let mut penalty_grad = self.zero_grad();
        for l in 0..=last {
            self.add_weight_grad(&mut penalty_grad.0, l, &(deltas[l].transpose() * &p));
            if l < last {
                let mut next = &p * weights[l].transpose();
                mask(&mut next, &pre[l]);
                p = next;
            }
        }
        Ok(BatchTerms {
            fd_value,
            fd_grad,
            penalty_sum,
            penalty_grad: Some(penalty_grad),
        })
    }
}

pub(crate) fn check_env_indices(env_indices: &[usize]) -> Result<()> {
    if env_indices.is_empty() {
        return Err(Error::EmptyIndexSet);
    }
    if let Some(&bad) = env_indices.iter().find(|&&j| j >= N_FEATURES) {
        return Err(Error::IndexOutOfRange(bad));
    }
    Ok(())
}

#[inline]
fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn mlp_init(arch: MlpArch, seed: u64) -> Result<MlpModel> {
    MlpModel::init(arch, seed)
}

pub fn mlp_forward(m: &MlpModel, x: &Features) -> Result<f64> {
    m.forward(x)
}

pub fn mlp_grad_params(m: &MlpModel, x: &Features, upstream: f64) -> Result<Gradient> {
    m.grad_params(x, upstream)
}

pub fn mlp_grad_input(m: &MlpModel, x: &Features) -> Result<Features> {
    m.grad_input(x)
}

pub fn smoothness_grad_params(m: &MlpModel, x: &Features, env_indices: &[usize]) -> Result<(f64, Gradient)> {
    m.smoothness_grad_params(x, env_indices)
}
