//! Training objectives and their exact parameter gradients.
//!
//! * forward-difference regression: `Σ (target − NN(x))²` over a batch,
//! * the same plus `λ ·` mean smoothness penalty over the batch,
//! * the rollout loss: Euler-integrate the network from the first recorded
//!   temperature, feeding the predicted temperature back as an input, and sum
//!   squared deviations from the recording. Its gradient is obtained by
//!   backpropagating through the whole unrolled recursion.
//!
//! All objectives use sum reduction over their terms.

use crate::dataset::{check_session, check_time_axis, feature, DriveSession, Features, Sample};
use crate::error::{Error, Result};
use crate::nn::{check_env_indices, Gradient, MlpModel, Trace};

/// Rollouts whose temperature magnitude exceeds this (°C) are treated as
/// diverged.
pub const DIVERGENCE_GUARD: f64 = 1e4;

/// Default cap on the number of Euler steps backpropagated at once.
pub const DEFAULT_MAX_UNROLL: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdTarget {
    pub input: Features,
    /// °C/s
    pub target_derivative: f64,
    /// s
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Gradient,
}

/// Forward-difference derivative targets, one per consecutive sample pair.
pub fn fd_targets(s: &DriveSession) -> Result<Vec<FdTarget>> {
    check_session(s)?;
    Ok(s.samples
        .windows(2)
        .map(|w| {
            let dt = w[1].t_rel - w[0].t_rel;
            FdTarget {
                input: w[0].features(),
                target_derivative: (w[1].battery_temp - w[0].battery_temp) / dt,
                dt,
            }
        })
        .collect())
}

/// Partial sums over a slice of a batch. Slices can be evaluated
/// independently and merged in order.
#[derive(Debug, Clone)]
pub(crate) struct BatchSums {
    pub count: usize,
    pub fd_value: f64,
    pub fd_grad: Gradient,
    pub penalty_sum: f64,
    pub penalty_grad: Option<Gradient>,
}

impl BatchSums {
    pub fn merge(&mut self, other: BatchSums) {
        self.count += other.count;
        self.fd_value += other.fd_value;
        self.fd_grad.add_assign(&other.fd_grad);
        self.penalty_sum += other.penalty_sum;
        if let (Some(a), Some(b)) = (self.penalty_grad.as_mut(), other.penalty_grad.as_ref()) {
            a.add_assign(b);
        }
    }

    /// Combines into the final objective; the penalty is averaged over
    /// `count`.
    pub fn finish(self, lambda: f64) -> LossValue {
        match self.penalty_grad {
            Some(pg) if lambda != 0.0 => {
                let w = lambda / self.count as f64;
                let mut grad = self.fd_grad;
                grad.add_scaled(&pg, w);
                LossValue {
                    value: self.fd_value + lambda * (self.penalty_sum / self.count as f64),
                    grad,
                }
            }
            _ => LossValue {
                value: self.fd_value,
                grad: self.fd_grad,
            },
        }
    }
}

/// Evaluates the forward-difference terms (and the smoothness penalty when
/// `env` is given) over `batch`.
pub(crate) fn batch_sums(m: &MlpModel, batch: &[FdTarget], env: Option<&[usize]>) -> Result<BatchSums> {
    let inputs: Vec<_> = batch.iter().map(|t| t.input).collect();
    let targets: Vec<_> = batch.iter().map(|t| t.target_derivative).collect();
    let t = m.batch_terms(&inputs, &targets, env)?;
    Ok(BatchSums {
        count: batch.len(),
        fd_value: t.fd_value,
        fd_grad: t.fd_grad,
        penalty_sum: t.penalty_sum,
        penalty_grad: t.penalty_grad,
    })
}

/// Sum of squared forward-difference residuals.
pub fn loss_no(m: &MlpModel, batch: &[FdTarget]) -> Result<LossValue> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(batch_sums(m, batch, None)?.finish(0.0))
}

/// Forward-difference loss plus `lambda` times the batch-mean smoothness
/// penalty over `env_indices`. With `lambda == 0` this is exactly
/// [`loss_no`].
pub fn loss_reg(m: &MlpModel, batch: &[FdTarget], lambda: f64, env_indices: &[usize]) -> Result<LossValue> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidConfig(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    if lambda == 0.0 {
        return loss_no(m, batch);
    }
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_env_indices(env_indices)?;
    Ok(batch_sums(m, batch, Some(env_indices))?.finish(lambda))
}

/// Rollout loss over a full session, starting from its first recorded
/// temperature.
pub fn loss_ts(m: &MlpModel, s: &DriveSession) -> Result<LossValue> {
    check_session(s)?;
    loss_ts_samples(m, &s.samples)
}

/// Rollout loss over an arbitrary contiguous run of samples (a session or a
/// chunk of one). Environmental inputs come from the recording; the
/// temperature input is the rollout's own prediction.
pub fn loss_ts_samples(m: &MlpModel, samples: &[Sample]) -> Result<LossValue> {
    if samples.len() < 2 {
        return Err(Error::TooShort {
            session: String::new(),
            len: samples.len(),
        });
    }
    check_time_axis("", samples)?;
    let n = samples.len();
    let mut traces: Vec<Trace> = (0..n - 1).map(|_| m.new_trace()).collect();
    let mut u = vec![0.0; n];
    u[0] = samples[0].battery_temp;
    for i in 0..n - 1 {
        let x = samples[i].features_with_temp(u[i]);
        let y = m.forward_traced(&x, &mut traces[i])?;
        let h = samples[i + 1].t_rel - samples[i].t_rel;
        u[i + 1] = u[i] + h * y;
        if !(u[i + 1].abs() <= DIVERGENCE_GUARD) {
            return Err(Error::DivergedRollout {
                step: i + 1,
                value: u[i + 1],
            });
        }
    }
    let mut value = 0.0;
    for i in 1..n {
        let r = samples[i].battery_temp - u[i];
        value += r * r;
    }

    // adjoint sweep: `carry` holds dL/du_{i+1} from steps after i+1
    let mut grad = m.zero_grad();
    let mut carry = 0.0;
    for i in (0..n - 1).rev() {
        let adj = -2.0 * (samples[i + 1].battery_temp - u[i + 1]) + carry;
        let h = samples[i + 1].t_rel - samples[i].t_rel;
        let dx = m.backward_traced(&mut traces[i], adj * h, &mut grad);
        carry = adj + dx[feature::BATTERY_TEMP];
    }
    Ok(LossValue { value, grad })
}

/// Splits a session into runs of at most `max_unroll` steps. Consecutive
/// chunks share their boundary sample, so each chunk restarts from a
/// recorded temperature.
pub fn unroll_chunks(samples: &[Sample], max_unroll: usize) -> Vec<&[Sample]> {
    let step = max_unroll.max(1);
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < samples.len() {
        let end = (start + step + 1).min(samples.len());
        out.push(&samples[start..end]);
        start = end - 1;
    }
    out
}
