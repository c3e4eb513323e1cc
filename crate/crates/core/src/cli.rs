//! The `lifenet` command line.
//!
//! Exit codes: 0 on success, 1 for usage and validation errors, 2 for runtime
//! failures (divergence, non-finite losses, I/O).

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::datagen::{generate_charging_sessions, generate_dataset_with, GenerateConfig, PhysicsParams};
use crate::dataset::{load_drive_csv, save_drive_csv, split_dataset, Dataset};
use crate::error::{Error, Result};
use crate::gradcheck::{run_suite, SuiteConfig};
use crate::integrator::rollout_and_score;
use crate::losses::DEFAULT_MAX_UNROLL;
use crate::nn::{load_checkpoint, save_checkpoint, MlpArch};
use crate::surrogate::{
    predict_charging, read_charging_csv, write_charging_csv, write_fit_report, PlantCoefficients, SurrogateFits,
};
use crate::sweep::{sweep, write_sweep_csv, SweepGrid};
use crate::trainer::{evaluate, train, Evaluation, Objective, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "lifenet", version, about = "Battery temperature neural operator: data, training, rollout, surrogate")]
pub struct Cli {
    /// Worker threads; 1 gives bit-reproducible results.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, global = true, value_enum, default_value_t = LogLevel::Info)]
    pub log_level: LogLevel,
    /// Seed for every random choice of the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LogLevel {
    Error,
    Warn,
    Info,
    Debug,
    Trace,
}

impl LogLevel {
    fn filter(self) -> log::LevelFilter {
        match self {
            LogLevel::Error => log::LevelFilter::Error,
            LogLevel::Warn => log::LevelFilter::Warn,
            LogLevel::Info => log::LevelFilter::Info,
            LogLevel::Debug => log::LevelFilter::Debug,
            LogLevel::Trace => log::LevelFilter::Trace,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate drive sessions (and optionally charging sessions).
    Generate(GenerateArgs),
    /// Train a model on a drive CSV.
    Train(TrainArgs),
    /// Roll a model out over one session.
    Rollout(RolloutArgs),
    /// Score one or more models on held-out sessions.
    Eval(EvalArgs),
    /// Grid search over penalty weight or architecture.
    Sweep(SweepArgs),
    /// Fit the charging-statistics models.
    SurrogateFit(SurrogateFitArgs),
    /// Evaluate fitted charging models at one operating point.
    SurrogatePredict(SurrogatePredictArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub sessions: usize,
    /// Physics parameters JSON; bundled defaults when omitted.
    #[arg(long)]
    pub physics: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Seconds between samples.
    #[arg(long, default_value_t = 10.0)]
    pub step: f64,
    #[arg(long, default_value_t = 2700.0)]
    pub min_duration: f64,
    #[arg(long, default_value_t = 4500.0)]
    pub max_duration: f64,
    /// Move this fraction of the sessions to --test-out.
    #[arg(long, requires = "test_out")]
    pub test_fraction: Option<f64>,
    #[arg(long, requires = "test_fraction")]
    pub test_out: Option<PathBuf>,
    /// Also write synthetic charging sessions here.
    #[arg(long)]
    pub charging: Option<PathBuf>,
    #[arg(long, default_value_t = 200, requires = "charging")]
    pub charging_sessions: usize,
    /// Planted charging coefficients JSON; built-in values when omitted.
    #[arg(long, requires = "charging")]
    pub plant: Option<PathBuf>,
    /// Standard deviation of the charging response noise.
    #[arg(long, default_value_t = 0.0, requires = "charging")]
    pub noise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveArg {
    Baseline,
    Reg,
    Ts,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Baseline)]
    pub objective: ObjectiveArg,
    /// Smoothness penalty weight; required with `--objective reg`.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 100)]
    pub hidden: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 4096)]
    pub batch: usize,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    /// Longest rollout backpropagated in one piece.
    #[arg(long, default_value_t = DEFAULT_MAX_UNROLL)]
    pub max_unroll: usize,
    /// Rollout chunks per optimizer step.
    #[arg(long, default_value_t = 1)]
    pub sessions_per_step: usize,
    /// Stop after this many epochs without improvement.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Comma-separated input indices covered by the smoothness penalty.
    #[arg(long, value_delimiter = ',')]
    pub env_indices: Option<Vec<usize>>,
}

impl ModelArgs {
    fn config(&self, seed: u64, threads: usize) -> Result<TrainConfig> {
        let objective = match (self.objective, self.lambda) {
            (ObjectiveArg::Reg, Some(lambda)) => Objective::Regularized { lambda },
            (ObjectiveArg::Reg, None) => {
                return Err(Error::InvalidConfig("--objective reg requires --lambda".into()))
            }
            (_, Some(_)) => {
                return Err(Error::InvalidConfig("--lambda is only valid with --objective reg".into()))
            }
            (ObjectiveArg::Baseline, None) => Objective::Baseline,
            (ObjectiveArg::Ts, None) => Objective::TimeStability,
        };
        let mut cfg = TrainConfig {
            objective,
            arch: MlpArch::new(self.layers, self.hidden),
            lr: self.lr,
            batch_size: self.batch,
            epochs: self.epochs,
            seed,
            max_unroll: self.max_unroll,
            sessions_per_step: self.sessions_per_step,
            patience: self.patience,
            threads,
            ..TrainConfig::default()
        };
        if let Some(env) = &self.env_indices {
            cfg.env_indices = env.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out sessions scored after training.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct RolloutArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Session id; may be omitted when the file holds a single session.
    #[arg(long)]
    pub session: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Fitted charging models used for --peak-power-out.
    #[arg(long, requires = "peak_power_out")]
    pub surrogate: Option<PathBuf>,
    /// Peak charging power along the predicted temperature trajectory.
    #[arg(long, requires = "surrogate")]
    pub peak_power_out: Option<PathBuf>,
    /// Target state of charge for the charging-time column.
    #[arg(long, default_value_t = 100.0)]
    pub target_soc: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Checkpoint(s) to compare; repeat the flag for several models.
    #[arg(long, required = true)]
    pub model: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// One row per model: MAE, MSE, relative error, time per epoch.
    #[arg(long)]
    pub report: PathBuf,
    /// Per-session scores.
    #[arg(long)]
    pub sessions_report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GridPreset {
    Lambda,
    Architecture,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Grid JSON with optional `lambda`, `hidden` and `layers` lists.
    #[arg(long, conflicts_with = "preset")]
    pub grid: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = GridPreset::Lambda)]
    pub preset: GridPreset,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SurrogateFitArgs {
    /// Charging-session CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Coefficient table CSV.
    #[arg(long)]
    pub report: PathBuf,
    /// Fitted models as JSON, for surrogate-predict and rollout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SurrogatePredictArgs {
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long)]
    pub soc_start: f64,
    #[arg(long)]
    pub soc_end: f64,
    /// Battery temperature, °C.
    #[arg(long)]
    pub temp: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    /// Parameter coordinates checked per instance and objective.
    #[arg(long, default_value_t = 48)]
    pub coords: usize,
    /// Write the results as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Derives an independent seed for a sub-task from the run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.random()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// `model.json` → `model.<suffix>.json`.
pub fn sidecar_path(model: &Path, suffix: &str) -> PathBuf {
    let stem = model.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    model.with_file_name(format!("{stem}.{suffix}.json"))
}

#[derive(Serialize)]
struct TrainReportFile<'a> {
    config: &'a TrainConfig,
    epochs_run: usize,
    epoch_losses: &'a [f64],
    final_loss: f64,
    evaluation: Option<&'a Evaluation>,
}

#[derive(Serialize, serde::Deserialize)]
pub struct TimingFile {
    pub epoch_seconds: Vec<f64>,
    pub mean_epoch_seconds: f64,
}

fn cmd_generate(a: &GenerateArgs, seed: u64) -> Result<()> {
    let physics = match &a.physics {
        Some(p) => PhysicsParams::load(p)?,
        None => PhysicsParams::default(),
    };
    let cfg = GenerateConfig {
        step: a.step,
        min_duration: a.min_duration,
        max_duration: a.max_duration,
        ..GenerateConfig::default()
    };
    let ds = generate_dataset_with(&cfg, a.sessions, seed, &physics)?;
    match (a.test_fraction, &a.test_out) {
        (Some(frac), Some(test_out)) => {
            let (train_set, test_set) = split_dataset(&ds, frac, derive_seed(seed, 3))?;
            save_drive_csv(&train_set, &a.out)?;
            save_drive_csv(&test_set, test_out)?;
            log::info!("wrote {} train and {} test sessions", train_set.len(), test_set.len());
        }
        _ => {
            save_drive_csv(&ds, &a.out)?;
            log::info!("wrote {} sessions ({} samples)", ds.len(), ds.n_samples());
        }
    }
    if let Some(path) = &a.charging {
        let plant = match &a.plant {
            Some(p) => serde_json::from_reader(std::io::BufReader::new(File::open(p)?))?,
            None => PlantCoefficients::default(),
        };
        let rows = generate_charging_sessions(a.charging_sessions, derive_seed(seed, 2), &plant, a.noise)?;
        let mut w = create(path)?;
        write_charging_csv(&rows, &mut w)?;
        w.flush()?;
        log::info!("wrote {} charging sessions", rows.len());
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs, seed: u64, threads: usize) -> Result<()> {
    let cfg = a.model.config(seed, threads)?.canonical();
    log::info!("training config: {}", serde_json::to_string(&cfg)?);
    let train_set = load_drive_csv(&a.data)?;
    let test_set = a.test.as_ref().map(load_drive_csv).transpose()?;
    let report = train(&cfg, &train_set)?;
    let evaluation = test_set.as_ref().map(|t| evaluate(&report.model, t)).transpose()?;
    save_checkpoint(&report.model, Some(cfg.training_meta(report.epochs_run())), &a.out)?;
    write_json(
        &sidecar_path(&a.out, "report"),
        &TrainReportFile {
            config: &cfg,
            epochs_run: report.epochs_run(),
            epoch_losses: &report.epoch_losses,
            final_loss: report.final_loss(),
            evaluation: evaluation.as_ref(),
        },
    )?;
    write_json(
        &sidecar_path(&a.out, "timing"),
        &TimingFile {
            epoch_seconds: report.epoch_seconds.clone(),
            mean_epoch_seconds: report.mean_epoch_seconds(),
        },
    )?;
    log::info!("final training loss {:.6e}", report.final_loss());
    if let Some(e) = &evaluation {
        log::info!(
            "test: mae {:.4} mse {:.4} relative error {:.4}%",
            e.mean.mae,
            e.mean.mse,
            e.mean.relative_error_pct
        );
    }
    Ok(())
}

fn select_session<'a>(ds: &'a Dataset, id: Option<&str>) -> Result<&'a crate::dataset::DriveSession> {
    match id {
        Some(id) => ds.get(id).ok_or_else(|| Error::UnknownSessionId(id.to_string())),
        None if ds.len() == 1 => Ok(&ds.sessions[0]),
        None => Err(Error::InvalidConfig(format!(
            "the data holds {} sessions; choose one with --session",
            ds.len()
        ))),
    }
}

fn cmd_rollout(a: &RolloutArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&a.model)?;
    let ds = load_drive_csv(&a.data)?;
    let session = select_session(&ds, a.session.as_deref())?;
    let (r, score) = rollout_and_score(&model, session)?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(create(&a.out)?);
    w.write_record(["t_rel_s", "predicted_temp_c", "ground_truth_temp_c"])?;
    for (k, s) in session.samples.iter().enumerate() {
        w.write_record([
            r.times[k].to_string(),
            r.predicted_temps[k].to_string(),
            s.battery_temp.to_string(),
        ])?;
    }
    w.flush()?;
    log::info!(
        "session {}: mae {:.4} mse {:.4} relative error {:.4}%",
        session.id,
        score.mae,
        score.mse,
        score.relative_error_pct
    );
    if let (Some(fit), Some(out)) = (&a.surrogate, &a.peak_power_out) {
        let fits = SurrogateFits::load(fit)?;
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(create(out)?);
        w.write_record([
            "t_rel_s",
            "predicted_temp_c",
            "battery_level_pct",
            "peak_power_kw",
            "charge_time_min",
        ])?;
        for (k, s) in session.samples.iter().enumerate() {
            let p = predict_charging(
                &fits.peak_power,
                &fits.charge_time,
                s.battery_level,
                a.target_soc,
                r.predicted_temps[k],
            );
            w.write_record([
                r.times[k].to_string(),
                r.predicted_temps[k].to_string(),
                s.battery_level.to_string(),
                p.peak_power.to_string(),
                p.charge_time.to_string(),
            ])?;
        }
        w.flush()?;
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let test_set = load_drive_csv(&a.data)?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(create(&a.report)?);
    w.write_record([
        "model",
        "objective",
        "lambda",
        "mae",
        "mse",
        "relative_error_pct",
        "time_per_epoch_s",
    ])?;
    let mut per_session = Vec::new();
    for path in &a.model {
        let (model, meta) = load_checkpoint(path)?;
        let e = evaluate(&model, &test_set)?;
        let timing_path = sidecar_path(path, "timing");
        let time = if timing_path.exists() {
            let t: TimingFile = serde_json::from_reader(std::io::BufReader::new(File::open(&timing_path)?))?;
            t.mean_epoch_seconds.to_string()
        } else {
            String::new()
        };
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        w.write_record([
            name.clone(),
            meta.as_ref().map(|m| m.objective.clone()).unwrap_or_default(),
            meta.and_then(|m| m.lambda).map(|l| l.to_string()).unwrap_or_default(),
            e.mean.mae.to_string(),
            e.mean.mse.to_string(),
            e.mean.relative_error_pct.to_string(),
            time,
        ])?;
        per_session.push((name, e));
    }
    w.flush()?;
    if let Some(path) = &a.sessions_report {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(create(path)?);
        w.write_record(["model", "session_id", "mae", "mse", "relative_error_pct"])?;
        for (name, e) in &per_session {
            for s in &e.sessions {
                w.write_record([
                    name.clone(),
                    s.session_id.clone(),
                    s.metrics.mae.to_string(),
                    s.metrics.mse.to_string(),
                    s.metrics.relative_error_pct.to_string(),
                ])?;
            }
        }
        w.flush()?;
    }
    Ok(())
}

fn cmd_sweep(a: &SweepArgs, seed: u64) -> Result<()> {
    // grid points run in parallel, each training single-threaded
    let base = a.model.config(seed, 1)?;
    let grid = match (&a.grid, a.preset) {
        (Some(p), _) => SweepGrid::load(p)?,
        (None, GridPreset::Lambda) => SweepGrid::lambda_preset(),
        (None, GridPreset::Architecture) => SweepGrid::architecture_preset(),
    };
    log::info!("sweep grid: {}", serde_json::to_string(&grid)?);
    let rows = sweep(&base, &grid, &load_drive_csv(&a.data)?, &load_drive_csv(&a.test)?)?;
    let mut w = create(&a.out)?;
    write_sweep_csv(&rows, &mut w)?;
    w.flush()?;
    Ok(())
}

fn cmd_surrogate_fit(a: &SurrogateFitArgs) -> Result<()> {
    let rows = read_charging_csv(std::io::BufReader::new(File::open(&a.data)?))?;
    let fits = SurrogateFits::fit(&rows)?;
    let mut w = create(&a.report)?;
    write_fit_report(&fits, &mut w)?;
    w.flush()?;
    if let Some(out) = &a.out {
        fits.save(out)?;
    }
    log::info!(
        "R² peak power {:.4}, charging time {:.4}",
        fits.peak_power.r_squared,
        fits.charge_time.r_squared
    );
    Ok(())
}

fn cmd_surrogate_predict(a: &SurrogatePredictArgs) -> Result<()> {
    let fits = SurrogateFits::load(&a.fit)?;
    for v in [a.soc_start, a.soc_end, a.temp] {
        if !v.is_finite() {
            return Err(Error::NonFiniteInput);
        }
    }
    let p = predict_charging(&fits.peak_power, &fits.charge_time, a.soc_start, a.soc_end, a.temp);
    println!("{}", serde_json::to_string(&p)?);
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs, seed: u64) -> Result<bool> {
    let cfg = SuiteConfig {
        instances: a.instances,
        seed,
        coords_per_instance: a.coords,
        ..SuiteConfig::default()
    };
    let results = run_suite(&cfg)?;
    let mut ok = true;
    for r in &results {
        println!(
            "{:<16} max relative error {:.3e} (tolerance {:.0e}) {}",
            r.name,
            r.max_rel_error,
            r.tolerance,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        ok &= r.passed();
    }
    if let Some(out) = &a.out {
        write_json(out, &results)?;
    }
    Ok(ok)
}

#[derive(Serialize)]
struct ResolvedConfig<'a, T: Serialize> {
    command: &'a str,
    threads: usize,
    log_level: LogLevel,
    seed: u64,
    args: &'a T,
}

fn print_config<T: Serialize>(cli: &Cli, command: &str, args: &T) {
    let cfg = ResolvedConfig {
        command,
        threads: cli.threads,
        log_level: cli.log_level,
        seed: cli.seed,
        args,
    };
    if let Ok(s) = serde_json::to_string(&cfg) {
        eprintln!("config: {s}");
    }
}

fn dispatch(cli: &Cli) -> Result<bool> {
    let (seed, threads) = (cli.seed, cli.threads);
    match &cli.command {
        Command::Generate(a) => {
            print_config(cli, "generate", a);
            cmd_generate(a, seed)?
        }
        Command::Train(a) => {
            print_config(cli, "train", a);
            cmd_train(a, seed, threads)?
        }
        Command::Rollout(a) => {
            print_config(cli, "rollout", a);
            cmd_rollout(a)?
        }
        Command::Eval(a) => {
            print_config(cli, "eval", a);
            cmd_eval(a)?
        }
        Command::Sweep(a) => {
            print_config(cli, "sweep", a);
            cmd_sweep(a, seed)?
        }
        Command::SurrogateFit(a) => {
            print_config(cli, "surrogate-fit", a);
            cmd_surrogate_fit(a)?
        }
        Command::SurrogatePredict(a) => {
            print_config(cli, "surrogate-predict", a);
            cmd_surrogate_predict(a)?
        }
        Command::Gradcheck(a) => {
            print_config(cli, "gradcheck", a);
            return cmd_gradcheck(a, seed);
        }
    }
    Ok(true)
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(cli.log_level.filter())
        .format_timestamp(None)
        .try_init();
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return 1;
    }
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    match dispatch(&cli) {
        Ok(true) => 0,
        Ok(false) => 2,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}
