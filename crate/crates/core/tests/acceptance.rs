//! Acceptance criteria AC1–AC8. Runs as a plain binary (no libtest harness)
//! so every criterion prints exactly one PASS/FAIL line; the process exits
//! non-zero if any criterion fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use lifenet::cli::derive_seed;
use lifenet::datagen::{
    cell_rhs, generate_charging_sessions, generate_dataset, integrate_cell, simulate_cell_with, DriveProfile,
    PhysicsParams,
};
use lifenet::dataset::{feature, split_dataset, Dataset, DriveSession, Features, NormStats, Sample};
use lifenet::gradcheck::{run_suite, SuiteConfig};
use lifenet::integrator::{euler_rollout, euler_rollout_with};
use lifenet::metrics::KELVIN_OFFSET;
use lifenet::nn::{MlpArch, MlpModel};
use lifenet::surrogate::{fit_charge_time, fit_ols, fit_peak_power, PlantCoefficients};
use lifenet::trainer::{evaluate, train, Objective, TrainConfig, TrainReport};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- AC1

fn ac1_gradients() -> Outcome {
    let start = Instant::now();
    let results = match run_suite(&SuiteConfig::default()) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("suite error: {e}")),
    };
    let elapsed = start.elapsed();
    let mut parts = Vec::new();
    let mut ok = elapsed < Duration::from_secs(60);
    for r in &results {
        ok &= r.passed() && r.instances == 100;
        parts.push(format!("{} {:.2e}<={:.0e}", r.name, r.max_rel_error, r.tolerance));
    }
    outcome(ok, format!("{} in {:.1}s", parts.join(", "), elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------- AC2, AC3

const AC_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// 48 simulated sessions split 40/8, exactly as `generate --sessions 48
/// --test-fraction 0.1667` does.
fn synthetic_split(seed: u64) -> (Dataset, Dataset) {
    let ds = generate_dataset(48, seed, &PhysicsParams::default()).expect("generation");
    split_dataset(&ds, 0.1667, derive_seed(seed, 3)).expect("split")
}

fn config(objective: Objective, seed: u64) -> TrainConfig {
    TrainConfig {
        objective,
        arch: MlpArch::new(4, 50),
        lr: 1e-3,
        epochs: 300,
        seed,
        ..TrainConfig::default()
    }
}

struct SeedRun {
    mse: [f64; 3],
    rel: [f64; 3],
    epoch_seconds: [f64; 3],
}

fn run_seed(seed: u64) -> Result<SeedRun, String> {
    let (train_set, test_set) = synthetic_split(seed);
    if train_set.len() != 40 || test_set.len() != 8 {
        return Err(format!("split {}/{}", train_set.len(), test_set.len()));
    }
    let objectives = [
        Objective::Baseline,
        Objective::Regularized { lambda: 0.1 },
        Objective::TimeStability,
    ];
    let mut run = SeedRun {
        mse: [0.0; 3],
        rel: [0.0; 3],
        epoch_seconds: [0.0; 3],
    };
    for (k, obj) in objectives.into_iter().enumerate() {
        let report: TrainReport = train(&config(obj, seed), &train_set).map_err(|e| e.to_string())?;
        let eval = evaluate(&report.model, &test_set).map_err(|e| e.to_string())?;
        run.mse[k] = eval.mean.mse;
        run.rel[k] = eval.mean.relative_error_pct;
        run.epoch_seconds[k] = report.mean_epoch_seconds();
    }
    Ok(run)
}

fn ordering_holds(mse: [f64; 3]) -> bool {
    let [base, reg, ts] = mse;
    ts <= reg && reg <= 1.05 * base
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn ac2_learnability(first: &Result<SeedRun, String>, elapsed: Duration) -> Outcome {
    match first {
        Ok(r) => {
            let rel = r.rel[0];
            outcome(
                rel <= 5.0,
                format!(
                    "baseline 4x50 held-out relative error {rel:.4}% (<= 5%), mse {:.4}, {:.0}s for the training run",
                    r.mse[0],
                    r.epoch_seconds[0] * 300.0
                ),
            )
        }
        Err(e) => outcome(false, format!("training failed after {:.0}s: {e}", elapsed.as_secs_f64())),
    }
}

fn ac3_ordering(first: Result<SeedRun, String>) -> Outcome {
    let first = match first {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("seed {} failed: {e}", AC_SEEDS[0])),
    };
    let time_ok = first.epoch_seconds[2] > first.epoch_seconds[0];
    let timing = format!(
        "time/epoch baseline {:.3}s, regularized {:.3}s, time-stability {:.3}s",
        first.epoch_seconds[0], first.epoch_seconds[1], first.epoch_seconds[2]
    );
    let fmt = |m: [f64; 3]| format!("mse ts {:.4} / reg {:.4} / base {:.4}", m[2], m[1], m[0]);
    if ordering_holds(first.mse) {
        return outcome(time_ok, format!("seed {}: {}; {timing}", AC_SEEDS[0], fmt(first.mse)));
    }
    let mut runs = vec![first];
    for &seed in &AC_SEEDS[1..] {
        match run_seed(seed) {
            Ok(r) => runs.push(r),
            Err(e) => return outcome(false, format!("seed {seed} failed: {e}")),
        }
    }
    let med: [f64; 3] = std::array::from_fn(|k| median(runs.iter().map(|r| r.mse[k]).collect()));
    let per_seed: Vec<String> = runs
        .iter()
        .zip(AC_SEEDS)
        .map(|(r, s)| format!("s{s}:{}", if ordering_holds(r.mse) { "ok" } else { "no" }))
        .collect();
    outcome(
        ordering_holds(med) && time_ok,
        format!(
            "seed {} ordering failed ({}); median over 5 seeds {} [{}]; {timing}",
            AC_SEEDS[0],
            fmt(runs[0].mse),
            fmt(med),
            per_seed.join(" ")
        ),
    )
}

// ---------------------------------------------------------------- AC4

fn ac4_reduction() -> Outcome {
    let ds = generate_dataset(4, 21, &PhysicsParams::default()).expect("generation");
    let cfg = |objective| TrainConfig {
        objective,
        arch: MlpArch::new(2, 16),
        epochs: 5,
        batch_size: 256,
        seed: 9,
        ..TrainConfig::default()
    };
    let base_cfg = cfg(Objective::Baseline);
    let reg_cfg = cfg(Objective::Regularized { lambda: 0.0 });
    let (a, b) = match (train(&base_cfg, &ds), train(&reg_cfg, &ds)) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return outcome(false, "training failed"),
    };
    let write = |r: &TrainReport, cfg: &TrainConfig| {
        let mut buf = Vec::new();
        lifenet::nn::write_checkpoint(&r.model, Some(cfg.canonical().training_meta(r.epochs_run())), &mut buf)
            .expect("serialize");
        buf
    };
    let same = write(&a, &base_cfg) == write(&b, &reg_cfg);
    outcome(same, format!("checkpoint bytes identical: {same}"))
}

// ---------------------------------------------------------------- AC5

fn random_session(rng: &mut ChaCha8Rng, len: usize) -> DriveSession {
    let mut t = 0.0;
    let samples = (0..len)
        .map(|i| {
            if i > 0 {
                t += rng.random_range(0.1..20.0);
            }
            Sample {
                t_rel: t,
                power: rng.random_range(-60.0..160.0),
                speed: rng.random_range(0.0..160.0),
                battery_level: rng.random_range(10.0..100.0),
                outside_temp: rng.random_range(-9.0..35.0),
                battery_temp: rng.random_range(-5.0..33.0),
            }
        })
        .collect();
    DriveSession::new("r", samples)
}

fn ac5_euler() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let session = random_session(&mut rng, 200);
    let times = session.times();

    let zero = MlpModel::zeros(MlpArch::new(2, 8)).unwrap();
    let r = euler_rollout(&zero, &session, 17.25).unwrap();
    let constant_ok = r.predicted_temps.iter().all(|&u| u == 17.25);

    // constant network: only the output bias is non-zero
    let c = 0.0625;
    let mut net = MlpModel::zeros(MlpArch::new(2, 8)).unwrap();
    let n = net.n_params();
    net.params_mut()[n - 1] = c;
    let r = euler_rollout(&net, &session, 3.0).unwrap();
    let mut expect = 3.0;
    let mut linear_ok = true;
    for (k, w) in times.windows(2).enumerate() {
        expect += c * (w[1] - w[0]);
        linear_ok &= r.predicted_temps[k + 1] == expect;
    }
    let total: f64 = times.windows(2).map(|w| w[1] - w[0]).sum();
    let closed_form_gap = (r.final_temp - (3.0 + c * total)).abs();
    linear_ok &= closed_form_gap <= 1e-12 * (3.0 + c * total);

    let mut additive_ok = true;
    for _ in 0..1000 {
        let mut m = MlpModel::init(MlpArch::new(rng.random_range(1..=4), rng.random_range(1..=32)), rng.random()).unwrap();
        m.set_norm(NormStats {
            mean: [100.0, 40.0, 60.0, 50.0, 10.0, 15.0],
            std: [80.0, 50.0, 40.0, 25.0, 12.0, 10.0],
        });
        m.set_output_scale(0.01);
        let len = rng.random_range(2..60);
        let s = random_session(&mut rng, len);
        let u0 = s.samples[0].battery_temp;
        let r = match euler_rollout(&m, &s, u0) {
            Ok(r) => r,
            Err(_) => continue,
        };
        for i in 0..s.len() - 1 {
            let h = s.samples[i + 1].t_rel - s.samples[i].t_rel;
            let f = m.forward(&s.samples[i].features_with_temp(r.predicted_temps[i])).unwrap();
            additive_ok &= r.predicted_temps[i + 1] == r.predicted_temps[i] + h * f;
        }
    }
    outcome(
        constant_ok && linear_ok && additive_ok,
        format!("zero net constant: {constant_ok}; constant net exact: {linear_ok}; additivity over 1000 rollouts: {additive_ok}"),
    )
}

// ---------------------------------------------------------------- AC6

/// Smooth drive sampled every `step` seconds, with the power signal also
/// available in continuous time.
fn smooth_power(t: f64) -> f64 {
    70.0 + 50.0 * (2.0 * std::f64::consts::PI * t / 1200.0).sin()
}

fn smooth_profile(step: f64, duration: f64) -> DriveProfile {
    let n = (duration / step).round() as usize + 1;
    let times: Vec<f64> = (0..n).map(|k| k as f64 * step).collect();
    DriveProfile {
        duration,
        step,
        power: times.iter().map(|&t| smooth_power(t)).collect(),
        speed: vec![80.0; n],
        battery_level: times.iter().map(|&t| 90.0 - t / 120.0).collect(),
        outside_temp: 5.0,
        seed: 0,
    }
}

fn euler_error(p: &PhysicsParams, step: f64) -> f64 {
    let duration = 3600.0;
    let (t0, amb) = (20.0, 5.0);
    let prof = smooth_profile(step, duration);
    let times: Vec<f64> = (0..prof.len()).map(|k| k as f64 * step).collect();
    let truth = integrate_cell(p, amb, t0, &times, 200, smooth_power);
    let samples: Vec<Sample> = (0..prof.len())
        .map(|k| Sample {
            t_rel: times[k],
            power: prof.power[k],
            speed: prof.speed[k],
            battery_level: prof.battery_level[k],
            outside_temp: amb,
            battery_temp: truth[k],
        })
        .collect();
    let oracle = |x: &Features| {
        Ok(cell_rhs(
            p,
            x[feature::BATTERY_TEMP] + KELVIN_OFFSET,
            x[feature::OUTSIDE_TEMP] + KELVIN_OFFSET,
            x[feature::POWER],
        ))
    };
    let r = euler_rollout_with(&samples, t0, oracle).unwrap();
    r.predicted_temps.iter().zip(&truth).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

fn ac6_convergence() -> Outcome {
    let p = PhysicsParams::default();
    let steps = [40.0, 20.0, 10.0, 5.0];
    let errs: Vec<f64> = steps.iter().map(|&h| euler_error(&p, h)).collect();
    let ratios: Vec<f64> = errs.windows(2).map(|w| w[0] / w[1]).collect();
    let euler_ok = ratios.iter().all(|&r| r >= 2.0);

    // RK4 against a 100x finer reference, one decade of step sizes
    let stiff = PhysicsParams {
        mass_kg: 1.0,
        ..PhysicsParams::default()
    };
    let power = |t: f64| 80.0 + 60.0 * (t / 7.0).sin();
    let span = [0.0, 40.0];
    let end = |n: usize| *integrate_cell(&stiff, 10.0, 25.0, &span, n, power).last().unwrap();
    let reference = end(2000);
    let (coarse, fine) = ((end(20) - reference).abs(), (end(200) - reference).abs());
    let order = (coarse / fine).log10();
    let rk4_ok = (3.5..=4.5).contains(&order);

    // the data generator's own RK4 substeps converge at the sample grid
    let prof = smooth_profile(10.0, 3600.0);
    let a = simulate_cell_with(&p, &prof, 20.0, 10).unwrap();
    let b = simulate_cell_with(&p, &prof, 20.0, 20).unwrap();
    let halving_gap = a
        .samples
        .iter()
        .zip(&b.samples)
        .map(|(x, y)| (x.battery_temp - y.battery_temp).abs())
        .fold(0.0, f64::max);
    outcome(
        euler_ok && rk4_ok && halving_gap < 1e-8,
        format!(
            "Euler max errors {:?} K, ratios {:?} (>= 2); RK4 observed order {order:.3}; RK4 substep-halving gap {halving_gap:.1e} K",
            errs.iter().map(|e| format!("{e:.3e}")).collect::<Vec<_>>(),
            ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>()
        ),
    )
}

// ---------------------------------------------------------------- AC7

fn ac7_surrogate() -> Outcome {
    let start = Instant::now();
    let plant = PlantCoefficients::default();
    let rows = generate_charging_sessions(200, 70, &plant, 0.0).unwrap();
    let (fp, ft) = (fit_peak_power(&rows).unwrap(), fit_charge_time(&rows).unwrap());
    let want_p = [plant.c_soc, plant.c_t, plant.o];
    let want_t = [plant.c_soc_s, plant.c_soc_e, plant.c_t_t, plant.o_t];
    let recover = fp.coefficients.iter().zip(want_p).chain(ft.coefficients.iter().zip(want_t))
        .map(|(g, w)| (g - w).abs())
        .fold(0.0, f64::max);
    let r2_gap = (1.0 - fp.r_squared).abs().max((1.0 - ft.r_squared).abs());
    let noiseless_ok = recover <= 1e-6 && r2_gap <= 1e-12;

    let trials = 200;
    let mut covered = [0usize; 7];
    for trial in 0..trials {
        let rows = generate_charging_sessions(100, 1000 + trial, &plant, 2.0).unwrap();
        let (fp, ft) = (fit_peak_power(&rows).unwrap(), fit_charge_time(&rows).unwrap());
        let est = fp.coefficients.iter().chain(&ft.coefficients);
        let se = fp.std_errors.iter().chain(&ft.std_errors);
        for (k, ((b, s), w)) in est.zip(se).zip(want_p.iter().chain(&want_t)).enumerate() {
            if (b - w).abs() <= 3.0 * s {
                covered[k] += 1;
            }
        }
    }
    let min_cov = *covered.iter().min().unwrap() as f64 / trials as f64;
    let coverage_ok = min_cov >= 0.95;

    // independent least-squares oracle: Householder QR
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut oracle_gap: f64 = 0.0;
    for _ in 0..20 {
        let x = DMatrix::from_fn(50, 3, |_, j| if j == 2 { 1.0 } else { rng.random_range(-5.0..5.0) });
        let y = DVector::from_fn(50, |_, _| rng.random_range(-10.0..10.0));
        let fit = fit_ols(&x, &y, &["a", "b", "c"]).unwrap();
        let qr = x.clone().qr();
        let beta = qr.r().solve_upper_triangular(&(qr.q().transpose() * &y)).unwrap();
        for k in 0..3 {
            oracle_gap = oracle_gap.max((fit.coefficients[k] - beta[k]).abs());
        }
    }
    let elapsed = start.elapsed();
    outcome(
        noiseless_ok && coverage_ok && oracle_gap <= 1e-8 && elapsed < Duration::from_secs(60),
        format!(
            "noiseless max coefficient error {recover:.1e}, |1-R²| {r2_gap:.1e}; 3-SE coverage min {:.1}% over {trials} trials; QR oracle gap {oracle_gap:.1e}; {:.1}s",
            100.0 * min_cov,
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- AC8

fn run_cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_lifenet"))
        .current_dir(dir)
        .args(["--threads", "1", "--log-level", "warn"])
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn pipeline(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let steps: Vec<Vec<&str>> = vec![
        vec![
            "--seed", "8", "generate", "--sessions", "6", "--test-fraction", "0.34", "--test-out", "test.csv", "--out",
            "train.csv", "--min-duration", "600", "--max-duration", "900", "--charging", "charging.csv",
            "--charging-sessions", "60", "--noise", "1.5",
        ],
        vec![
            "--seed", "8", "train", "--objective", "baseline", "--layers", "2", "--hidden", "16", "--epochs", "4",
            "--batch", "256", "--data", "train.csv", "--test", "test.csv", "--out", "base.json",
        ],
        vec![
            "--seed", "8", "train", "--objective", "reg", "--lambda", "0.1", "--layers", "2", "--hidden", "16",
            "--epochs", "4", "--batch", "256", "--data", "train.csv", "--test", "test.csv", "--out", "reg.json",
        ],
        vec![
            "--seed", "8", "train", "--objective", "ts", "--layers", "2", "--hidden", "16", "--epochs", "4", "--data",
            "train.csv", "--test", "test.csv", "--out", "ts.json",
        ],
        vec![
            "eval", "--model", "base.json", "--model", "reg.json", "--model", "ts.json", "--data", "test.csv",
            "--report", "eval.csv", "--sessions-report", "eval_sessions.csv",
        ],
        vec!["surrogate-fit", "--data", "charging.csv", "--report", "fit.csv", "--out", "fit.json"],
        vec!["--seed", "8", "sweep", "--grid", "grid.json", "--layers", "2", "--hidden", "8", "--epochs", "3", "--batch", "256", "--data", "train.csv", "--test", "test.csv", "--out", "sweep.csv"],
        vec!["--seed", "8", "gradcheck", "--instances", "3", "--out", "gradcheck.json"],
    ];
    fs::write(dir.join("grid.json"), r#"{"lambda": [0.0, 0.1], "hidden": [4, 8]}"#).map_err(|e| e.to_string())?;
    // the timing sidecars read by `eval` are wall-clock measurements; pin them
    // so the comparison table depends only on deterministic inputs
    for (k, step) in steps.iter().enumerate() {
        run_cli(dir, step)?;
        if k == 3 {
            for m in ["base", "reg", "ts"] {
                fs::write(dir.join(format!("{m}.timing.json")), "{\"epoch_seconds\":[1.0],\"mean_epoch_seconds\":1.0}\n")
                    .map_err(|e| e.to_string())?;
            }
        }
    }
    let test = fs::read_to_string(dir.join("test.csv")).map_err(|e| e.to_string())?;
    let session = test.lines().nth(1).and_then(|l| l.split(',').next()).unwrap_or("").to_string();
    run_cli(dir, &[
        "rollout", "--model", "ts.json", "--data", "test.csv", "--session", &session, "--out", "rollout.csv",
        "--surrogate", "fit.json", "--peak-power-out", "peak.csv",
    ])?;
    let mut files: Vec<String> = fs::read_dir(dir)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| !n.ends_with(".timing.json"))
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|n| fs::read(dir.join(&n)).map(|b| (n, b)).map_err(|e| e.to_string()))
        .collect()
}

fn ac8_determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    match (pipeline(a.path()), pipeline(b.path())) {
        (Ok(x), Ok(y)) => {
            let names: Vec<&str> = x.iter().map(|(n, _)| n.as_str()).collect();
            let differing: Vec<&str> = x
                .iter()
                .zip(&y)
                .filter(|(p, q)| p != q)
                .map(|(p, _)| p.0.as_str())
                .collect();
            outcome(
                differing.is_empty() && x.len() == y.len() && x.len() >= 18,
                format!("{} artifacts compared ({}); differing: {:?}", x.len(), names.join(" "), differing),
            )
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, format!("pipeline failed: {e}")),
    }
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, o: Outcome| {
        println!("{name} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };
    report("AC1 gradient correctness", ac1_gradients());
    let start = Instant::now();
    let first = run_seed(AC_SEEDS[0]);
    report("AC2 synthetic learnability", ac2_learnability(&first, start.elapsed()));
    report("AC3 objective ordering", ac3_ordering(first));
    report("AC4 reduction identity", ac4_reduction());
    report("AC5 Euler rollout exactness", ac5_euler());
    report("AC6 integrator convergence", ac6_convergence());
    report("AC7 surrogate recovery", ac7_surrogate());
    report("AC8 determinism", ac8_determinism());

    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.passed).map(|(n, _)| *n).collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
