//! Explicit Euler rollout of a learned temperature derivative.
//!
//! `u_{i+1} = u_i + h_i · f(x_i)` with `h_i = t_{i+1} − t_i`. The
//! environmental part of `x_i` is taken from the recording; its battery
//! temperature entry is the rollout's own `u_i`.

use serde::{Deserialize, Serialize};

use crate::dataset::{check_session, DriveSession, Features, Sample};
use crate::error::{Error, Result};
use crate::losses::DIVERGENCE_GUARD;
use crate::metrics::{metrics, Metrics};
use crate::nn::MlpModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub times: Vec<f64>,
    pub predicted_temps: Vec<f64>,
    pub final_temp: f64,
}

/// Rollout with an arbitrary right-hand side `rhs(x) -> du/dt`.
pub fn euler_rollout_with<F>(samples: &[Sample], u0: f64, mut rhs: F) -> Result<Rollout>
where
    F: FnMut(&Features) -> Result<f64>,
{
    if !u0.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    let mut temps = Vec::with_capacity(samples.len());
    let mut u = u0;
    temps.push(u);
    for (i, w) in samples.windows(2).enumerate() {
        let h = w[1].t_rel - w[0].t_rel;
        u += h * rhs(&w[0].features_with_temp(u))?;
        if !(u.abs() <= DIVERGENCE_GUARD) {
            return Err(Error::DivergedRollout { step: i + 1, value: u });
        }
        temps.push(u);
    }
    Ok(Rollout {
        times: samples.iter().map(|s| s.t_rel).collect(),
        final_temp: u,
        predicted_temps: temps,
    })
}

pub fn euler_rollout(m: &MlpModel, s: &DriveSession, u0: f64) -> Result<Rollout> {
    check_session(s)?;
    let mut trace = m.new_trace();
    euler_rollout_with(&s.samples, u0, |x| m.forward_traced(x, &mut trace))
}

/// Rolls out from the first recorded temperature and scores against the
/// recording.
pub fn rollout_and_score(m: &MlpModel, s: &DriveSession) -> Result<(Rollout, Metrics)> {
    check_session(s)?;
    let r = euler_rollout(m, s, s.samples[0].battery_temp)?;
    let score = metrics(&r.predicted_temps, &s.temperatures())?;
    Ok((r, score))
}
