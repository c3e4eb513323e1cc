//! Central finite differences and a randomized gradient-check suite for the
//! network and every training objective.
//!
//! Errors are measured per coordinate as `|a − n| / max(|a|, |n|, τ)` with
//! `τ = 1e-3 · max_k |n_k|`: coordinates far below the largest gradient entry
//! are judged against that scale instead of their own, since finite
//! differences cannot resolve them more finely.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataset::{feature, DriveSession, Features, NormStats, Sample};
use crate::error::Result;
use crate::losses::{fd_targets, loss_no, loss_reg, loss_ts, LossValue};
use crate::nn::{MlpArch, MlpModel};

pub const FD_STEP: f64 = 1e-6;

/// Instances with a hidden pre-activation closer than this to zero anywhere
/// in the evaluation are resampled, since a perturbation may cross the kink.
pub const KINK_MARGIN: f64 = 1e-5;

/// `∂f/∂x_i ≈ (f(x + h e_i) − f(x − h e_i)) / 2h` for every coordinate.
pub fn central_diff(x: &[f64], h: f64, f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let idx: Vec<usize> = (0..x.len()).collect();
    central_diff_at(x, &idx, h, f)
}

/// Central differences for the listed coordinates only.
pub fn central_diff_at(x: &[f64], idx: &[usize], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    idx.iter()
        .map(|&i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Largest per-coordinate relative error, using the scale-aware floor
/// described in the module docs.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-3 * scale;
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| rel_error(*a, *n, floor))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub instances: usize,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub instances: usize,
    pub seed: u64,
    pub max_layers: usize,
    pub max_hidden: usize,
    /// Number of Euler steps in the rollout-loss sessions.
    pub session_steps: usize,
    /// Parameter coordinates checked per instance and objective.
    pub coords_per_instance: usize,
    pub lambda: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            seed: 0,
            max_layers: 4,
            max_hidden: 50,
            session_steps: 10,
            coords_per_instance: 48,
            lambda: 0.1,
        }
    }
}

/// Random network, realistic-looking inputs and a short session.
struct Instance {
    model: MlpModel,
    session: DriveSession,
}

fn random_instance(rng: &mut ChaCha8Rng, cfg: &SuiteConfig) -> Instance {
    let arch = MlpArch::new(rng.random_range(1..=cfg.max_layers), rng.random_range(1..=cfg.max_hidden));
    let mut model = MlpModel::init(arch, rng.random()).expect("valid arch");
    let mut params = model.params().to_vec();
    for l in 0..model.n_layers() {
        for b in model.layer_slices_mut(&mut params, l).1 {
            *b = rng.random_range(-0.3..0.3);
        }
    }
    model.params_mut().copy_from_slice(&params);
    let norm = NormStats {
        mean: [5.0, 30.0, 60.0, 70.0, 10.0, 15.0],
        std: [3.0, 40.0, 30.0, 20.0, 8.0, 9.0],
    };
    model.set_norm(norm);
    model.set_output_scale(0.1);

    let mut t = 0.0;
    let mut u = norm.mean[feature::BATTERY_TEMP] + rng.random_range(-10.0..10.0);
    let samples = (0..=cfg.session_steps)
        .map(|i| {
            if i > 0 {
                t += rng.random_range(0.5..2.0);
                u += rng.random_range(-0.5..0.5);
            }
            let x: Features = std::array::from_fn(|j| norm.mean[j] + norm.std[j] * rng.random_range(-1.5..1.5));
            Sample {
                t_rel: t,
                power: x[feature::POWER],
                speed: x[feature::SPEED],
                battery_level: x[feature::BATTERY_LEVEL],
                outside_temp: x[feature::OUTSIDE_TEMP],
                battery_temp: u,
            }
        })
        .collect();
    Instance {
        model,
        session: DriveSession::new("gradcheck", samples),
    }
}

/// Smallest distance to a ReLU kink over every input the objectives evaluate:
/// the recorded inputs and the free-running rollout inputs.
fn kink_distance(m: &MlpModel, s: &DriveSession) -> f64 {
    let mut trace = m.new_trace();
    let mut dist = f64::INFINITY;
    let mut u = s.samples[0].battery_temp;
    for w in s.samples.windows(2) {
        for x in [w[0].features(), w[0].features_with_temp(u)] {
            if m.forward_traced(&x, &mut trace).is_err() {
                return 0.0;
            }
            dist = dist.min(trace.min_abs_preactivation());
        }
        u += (w[1].t_rel - w[0].t_rel) * trace.output();
    }
    dist
}

fn check_objective(
    m: &MlpModel,
    idx: &[usize],
    f: impl Fn(&MlpModel) -> Result<LossValue>,
) -> Result<f64> {
    let analytic = f(m)?.grad;
    let a: Vec<f64> = idx.iter().map(|&i| analytic.as_slice()[i]).collect();
    let arch = *m.arch();
    let (norm, scale) = (*m.norm(), m.output_scale());
    let mut failure = None;
    let numeric = central_diff_at(m.params(), idx, FD_STEP, |p| {
        let mm = MlpModel::from_parts(arch, norm, scale, p.to_vec()).expect("same shape");
        match f(&mm) {
            Ok(v) => v.value,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(max_rel_error(&a, &numeric))
}

/// Runs the four gradient suites: forward-difference loss, regularized loss,
/// rollout loss (parameter gradients) and the network's input gradient.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst = [0.0f64; 4];
    let mut done = 0;
    while done < cfg.instances {
        let inst = random_instance(&mut rng, cfg);
        let (m, s) = (&inst.model, &inst.session);
        if kink_distance(m, s) < KINK_MARGIN {
            continue;
        }
        let k = cfg.coords_per_instance.min(m.n_params());
        let mut idx = sample_indices(&mut rng, m.n_params(), k).into_vec();
        idx.sort_unstable();
        let batch = fd_targets(s)?;
        let env = feature::ENVIRONMENTAL;

        worst[0] = worst[0].max(check_objective(m, &idx, |mm| loss_no(mm, &batch))?);
        worst[1] = worst[1].max(check_objective(m, &idx, |mm| loss_reg(mm, &batch, cfg.lambda, &env))?);
        worst[2] = worst[2].max(check_objective(m, &idx, |mm| loss_ts(mm, s))?);

        for t in &batch {
            let analytic = m.grad_input(&t.input)?;
            let numeric = central_diff(&t.input, FD_STEP, |x| {
                m.forward(&x.try_into().expect("six inputs")).unwrap_or(f64::NAN)
            });
            worst[3] = worst[3].max(max_rel_error(&analytic, &numeric));
        }
        done += 1;
    }
    let names = ["loss_no", "loss_reg", "loss_ts", "input_gradient"];
    let tols = [1e-5, 1e-4, 1e-4, 1e-5];
    Ok((0..4)
        .map(|i| SuiteResult {
            name: names[i],
            tolerance: tols[i],
            max_rel_error: worst[i],
            instances: done,
        })
        .collect())
}
