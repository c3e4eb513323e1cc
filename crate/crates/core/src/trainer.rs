//! Training loops and held-out evaluation.
//!
//! Forward-difference objectives pool every target of every training session,
//! reshuffle each epoch and take one Adam step per minibatch. The rollout
//! objective walks the (shuffled) training sessions, split into chunks of at
//! most `max_unroll` steps, and takes one Adam step per `sessions_per_step`
//! chunks.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{feature, fit_norm_stats, Dataset, MIN_STD};
use crate::error::{Error, Result};
use crate::integrator::rollout_and_score;
use crate::losses::{batch_sums, fd_targets, loss_ts_samples, unroll_chunks, FdTarget, LossValue, DEFAULT_MAX_UNROLL};
use crate::metrics::{mean_metrics, Metrics};
use crate::nn::{check_env_indices, AdamState, MlpArch, MlpModel, TrainingMeta};

/// Stream of the seeded generator reserved for epoch shuffling.
const SHUFFLE_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    Baseline,
    Regularized { lambda: f64 },
    TimeStability,
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Baseline => "baseline",
            Objective::Regularized { .. } => "regularized",
            Objective::TimeStability => "time_stability",
        }
    }

    pub fn lambda(&self) -> Option<f64> {
        match self {
            Objective::Regularized { lambda } => Some(*lambda),
            _ => None,
        }
    }

    /// A zero-weight penalty is the baseline objective.
    pub fn canonical(self) -> Self {
        match self {
            Objective::Regularized { lambda } if lambda == 0.0 => Objective::Baseline,
            o => o,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub arch: MlpArch,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub max_unroll: usize,
    /// Rollout chunks accumulated per optimizer step.
    pub sessions_per_step: usize,
    /// Inputs covered by the smoothness penalty.
    pub env_indices: Vec<usize>,
    /// Stop after this many epochs without a lower training loss.
    pub patience: Option<usize>,
    /// Worker threads for gradient evaluation; values above 1 may change the
    /// low-order bits of summed gradients.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Baseline,
            arch: MlpArch::default(),
            lr: 1e-3,
            batch_size: 4096,
            epochs: 100,
            seed: 0,
            max_unroll: DEFAULT_MAX_UNROLL,
            sessions_per_step: 1,
            env_indices: feature::ENVIRONMENTAL.to_vec(),
            patience: None,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if let Objective::Regularized { lambda } = self.objective {
            if !(lambda.is_finite() && lambda >= 0.0) {
                return bad(format!("lambda must be finite and >= 0, got {lambda}"));
            }
            check_env_indices(&self.env_indices)?;
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("learning rate must be finite and >= 0, got {}", self.lr));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 || self.max_unroll == 0 || self.sessions_per_step == 0 || self.threads == 0 {
            return bad("batch size, max unroll, sessions per step and threads must be positive".into());
        }
        if self.patience == Some(0) {
            return bad("patience must be at least 1".into());
        }
        Ok(())
    }

    /// Same configuration with a zero-weight penalty mapped to the baseline.
    pub fn canonical(&self) -> Self {
        Self {
            objective: self.objective.canonical(),
            ..self.clone()
        }
    }

    pub fn training_meta(&self, epochs_run: usize) -> TrainingMeta {
        let objective = self.objective.canonical();
        TrainingMeta {
            objective: objective.name().to_string(),
            lambda: objective.lambda(),
            seed: self.seed,
            epochs: epochs_run,
            lr: self.lr,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub config: TrainConfig,
    /// Objective value per loss term, averaged over each epoch.
    pub epoch_losses: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    pub model: MlpModel,
}

impl TrainReport {
    pub fn epochs_run(&self) -> usize {
        self.epoch_losses.len()
    }

    pub fn mean_epoch_seconds(&self) -> f64 {
        self.epoch_seconds.iter().sum::<f64>() / self.epoch_seconds.len().max(1) as f64
    }

    pub fn final_loss(&self) -> f64 {
        *self.epoch_losses.last().unwrap_or(&f64::NAN)
    }
}

/// Standard deviation of the forward-difference targets, used as the
/// network's output scale.
fn target_scale(targets: &[FdTarget]) -> f64 {
    let n = targets.len() as f64;
    let mean = targets.iter().map(|t| t.target_derivative).sum::<f64>() / n;
    let var = targets.iter().map(|t| (t.target_derivative - mean).powi(2)).sum::<f64>() / n;
    let s = var.sqrt();
    if s.is_finite() && s >= MIN_STD {
        s
    } else {
        1.0
    }
}

/// Initial model: seeded weights, input statistics and output scale from the
/// training data.
pub fn initial_model(cfg: &TrainConfig, train: &Dataset) -> Result<MlpModel> {
    let targets = all_targets(train)?;
    let mut m = MlpModel::init(cfg.arch, cfg.seed)?;
    m.set_norm(fit_norm_stats(train)?);
    m.set_output_scale(target_scale(&targets));
    Ok(m)
}

fn all_targets(train: &Dataset) -> Result<Vec<FdTarget>> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut out = Vec::with_capacity(train.n_samples());
    for s in &train.sessions {
        out.extend(fd_targets(s)?);
    }
    Ok(out)
}

/// Forward-difference objective over one minibatch, optionally split across
/// `threads` workers and merged in slice order.
fn minibatch_loss(m: &MlpModel, batch: &[FdTarget], lambda: Option<f64>, env: &[usize], threads: usize) -> Result<LossValue> {
    let env = lambda.map(|_| env);
    let sums = if threads > 1 && batch.len() >= 2 * threads {
        let chunk = batch.len().div_ceil(threads);
        let parts: Vec<_> = batch
            .par_chunks(chunk)
            .map(|c| batch_sums(m, c, env))
            .collect::<Result<Vec<_>>>()?;
        let mut it = parts.into_iter();
        let mut acc = it.next().expect("non-empty batch");
        for p in it {
            acc.merge(p);
        }
        acc
    } else {
        batch_sums(m, batch, env)?
    };
    Ok(sums.finish(lambda.unwrap_or(0.0)))
}

fn rollout_loss(m: &MlpModel, chunks: &[&[crate::dataset::Sample]], threads: usize) -> Result<LossValue> {
    let parts: Vec<LossValue> = if threads > 1 && chunks.len() > 1 {
        chunks.par_iter().map(|c| loss_ts_samples(m, c)).collect::<Result<_>>()?
    } else {
        chunks.iter().map(|c| loss_ts_samples(m, c)).collect::<Result<_>>()?
    };
    let mut it = parts.into_iter();
    let mut acc = it.next().expect("at least one chunk");
    for p in it {
        acc.value += p.value;
        acc.grad.add_assign(&p.grad);
    }
    Ok(acc)
}

pub fn train(cfg: &TrainConfig, train: &Dataset) -> Result<TrainReport> {
    let cfg = cfg.canonical();
    cfg.validate()?;
    let mut model = initial_model(&cfg, train)?;
    train_from(&cfg, train, &mut model)
}

/// Runs the training loop starting from `model`, which is updated in place.
pub fn train_from(cfg: &TrainConfig, train: &Dataset, model: &mut MlpModel) -> Result<TrainReport> {
    let cfg = cfg.canonical();
    cfg.validate()?;
    let targets = all_targets(train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut adam = AdamState::for_model(model, cfg.lr);
    adam.validate()?;

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut epoch_seconds = Vec::with_capacity(cfg.epochs);
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    let mut order: Vec<usize> = Vec::new();

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut total = 0.0;
        let mut terms = 0usize;
        match cfg.objective {
            Objective::Baseline | Objective::Regularized { .. } => {
                let lambda = cfg.objective.lambda();
                order.clear();
                order.extend(0..targets.len());
                order.shuffle(&mut rng);
                let mut batch = Vec::with_capacity(cfg.batch_size);
                for idx in order.chunks(cfg.batch_size) {
                    batch.clear();
                    batch.extend(idx.iter().map(|&i| targets[i]));
                    let lv = minibatch_loss(model, &batch, lambda, &cfg.env_indices, cfg.threads)?;
                    if !lv.value.is_finite() || !lv.grad.is_finite() {
                        return Err(Error::NonFiniteLoss { epoch });
                    }
                    total += lv.value;
                    terms += batch.len();
                    adam.update(model.params_mut(), lv.grad.as_slice())?;
                }
            }
            Objective::TimeStability => {
                order.clear();
                order.extend(0..train.len());
                order.shuffle(&mut rng);
                let chunks: Vec<&[crate::dataset::Sample]> = order
                    .iter()
                    .flat_map(|&i| unroll_chunks(&train.sessions[i].samples, cfg.max_unroll))
                    .collect();
                for group in chunks.chunks(cfg.sessions_per_step) {
                    let lv = match rollout_loss(model, group, cfg.threads) {
                        Err(Error::DivergedRollout { .. }) => return Err(Error::NonFiniteLoss { epoch }),
                        r => r?,
                    };
                    if !lv.value.is_finite() || !lv.grad.is_finite() {
                        return Err(Error::NonFiniteLoss { epoch });
                    }
                    total += lv.value;
                    terms += group.iter().map(|c| c.len() - 1).sum::<usize>();
                    adam.update(model.params_mut(), lv.grad.as_slice())?;
                }
            }
        }
        let loss = total / terms.max(1) as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        epoch_losses.push(loss);
        epoch_seconds.push(start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE));
        log::debug!("epoch {epoch}: loss {loss:.6e}");

        if let Some(patience) = cfg.patience {
            if loss < best {
                best = loss;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    log::info!("no improvement for {patience} epochs, stopping after epoch {epoch}");
                    break;
                }
            }
        }
    }
    Ok(TrainReport {
        config: cfg,
        epoch_losses,
        epoch_seconds,
        model: model.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionScore {
    pub session_id: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub sessions: Vec<SessionScore>,
    pub mean: Metrics,
}

/// Rolls out every test session from its first recorded temperature and
/// averages the scores with equal weight per session.
pub fn evaluate(m: &MlpModel, test: &Dataset) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let sessions = test
        .sessions
        .par_iter()
        .map(|s| {
            let (_, metrics) = rollout_and_score(m, s)?;
            Ok(SessionScore {
                session_id: s.id.clone(),
                metrics,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<Metrics> = sessions.iter().map(|s| s.metrics).collect();
    Ok(Evaluation {
        mean: mean_metrics(&rows)?,
        sessions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DriveSession, Sample};
    use rand::Rng;

    /// Sessions whose temperature derivative is an exact linear function of
    /// the inputs.
    pub(crate) fn linear_physics(n_sessions: usize, len: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sessions = (0..n_sessions)
            .map(|k| {
                let mut u: f64 = rng.random_range(0.0..30.0);
                let outside = rng.random_range(-5.0..30.0);
                let mut power: f64 = rng.random_range(0.0..80.0);
                let samples = (0..len)
                    .map(|i| {
                        power = (power + rng.random_range(-5.0..5.0)).clamp(-60.0, 160.0);
                        let s = Sample {
                            t_rel: 10.0 * i as f64,
                            power,
                            speed: 0.5 * power + 20.0,
                            battery_level: 90.0 - 0.05 * i as f64,
                            outside_temp: outside,
                            battery_temp: u,
                        };
                        u += 10.0 * (1e-4 * power - 2e-3 * (u - outside));
                        s
                    })
                    .collect();
                DriveSession::new(format!("lin-{k}"), samples)
            })
            .collect();
        Dataset::new(sessions).unwrap()
    }

    fn small_cfg(objective: Objective, epochs: usize) -> TrainConfig {
        TrainConfig {
            objective,
            arch: MlpArch::new(2, 16),
            lr: 3e-3,
            batch_size: 64,
            epochs,
            seed: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_initial_model() {
        let ds = linear_physics(3, 30, 0);
        let cfg = TrainConfig {
            lr: 0.0,
            ..small_cfg(Objective::Baseline, 1)
        };
        let r = train(&cfg, &ds).unwrap();
        assert_eq!(r.model, initial_model(&cfg, &ds).unwrap());
        assert_eq!(r.epoch_losses.len(), 1);
    }

    #[test]
    fn learns_linear_physics() {
        let ds = linear_physics(4, 60, 1);
        let r = train(&small_cfg(Objective::Baseline, 200), &ds).unwrap();
        assert!(r.final_loss() < 1e-3, "{}", r.final_loss());
        let half = r.epoch_losses[99];
        assert!(r.final_loss() <= 1.05 * half);
        // normalized by the target variance the fit should also be good
        let targets = all_targets(&ds).unwrap();
        let s = target_scale(&targets);
        assert!(r.final_loss() / (s * s) < 0.05);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = linear_physics(3, 40, 2);
        for obj in [Objective::Baseline, Objective::Regularized { lambda: 0.1 }, Objective::TimeStability] {
            let cfg = small_cfg(obj, 3);
            let a = train(&cfg, &ds).unwrap();
            let b = train(&cfg, &ds).unwrap();
            assert_eq!(a.model, b.model);
            assert_eq!(a.epoch_losses, b.epoch_losses);
            assert!(a.epoch_seconds.iter().all(|t| *t > 0.0));
        }
    }

    #[test]
    fn zero_lambda_is_baseline() {
        let ds = linear_physics(3, 40, 3);
        let a = train(&small_cfg(Objective::Baseline, 3), &ds).unwrap();
        let b = train(&small_cfg(Objective::Regularized { lambda: 0.0 }, 3), &ds).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.epoch_losses, b.epoch_losses);
        assert_eq!(a.config.training_meta(3), b.config.training_meta(3));
    }

    #[test]
    fn rollout_training_reduces_loss() {
        let ds = linear_physics(3, 40, 4);
        let r = train(&small_cfg(Objective::TimeStability, 30), &ds).unwrap();
        assert!(r.final_loss() < r.epoch_losses[0]);
    }

    #[test]
    fn parallel_gradients_close_to_sequential() {
        let ds = linear_physics(3, 40, 5);
        for obj in [Objective::Regularized { lambda: 0.1 }, Objective::TimeStability] {
            let seq = TrainConfig {
                sessions_per_step: 3,
                ..small_cfg(obj, 2)
            };
            let par = TrainConfig { threads: 4, ..seq.clone() };
            let a = train(&seq, &ds).unwrap();
            let b = train(&par, &ds).unwrap();
            for (x, y) in a.epoch_losses.iter().zip(&b.epoch_losses) {
                assert!((x - y).abs() <= 1e-9 * x.abs());
            }
        }
    }

    #[test]
    fn patience_stops_early() {
        let ds = linear_physics(2, 30, 6);
        let cfg = TrainConfig {
            lr: 0.0,
            patience: Some(2),
            ..small_cfg(Objective::Baseline, 50)
        };
        assert_eq!(train(&cfg, &ds).unwrap().epochs_run(), 3);
    }

    #[test]
    fn invalid_configs() {
        let ds = linear_physics(2, 30, 7);
        for cfg in [
            small_cfg(Objective::Baseline, 0),
            small_cfg(Objective::Regularized { lambda: -1.0 }, 1),
            TrainConfig {
                batch_size: 0,
                ..small_cfg(Objective::Baseline, 1)
            },
        ] {
            assert!(matches!(train(&cfg, &ds), Err(Error::InvalidConfig(_))));
        }
        assert!(matches!(train(&small_cfg(Objective::Baseline, 1), &Dataset::default()), Err(Error::EmptyDataset)));
    }

    #[test]
    fn evaluation_averages_sessions() {
        let ds = linear_physics(2, 30, 8);
        let m = initial_model(&small_cfg(Objective::Baseline, 1), &ds).unwrap();
        let one = Dataset::new(vec![ds.sessions[0].clone()]).unwrap();
        let e1 = evaluate(&m, &one).unwrap();
        assert_eq!(e1.mean, e1.sessions[0].metrics);
        let e2 = evaluate(&m, &ds).unwrap();
        let (a, b) = (e2.sessions[0].metrics, e2.sessions[1].metrics);
        assert_eq!(e2.mean.relative_error_pct, (a.relative_error_pct + b.relative_error_pct) / 2.0);
    }
}
