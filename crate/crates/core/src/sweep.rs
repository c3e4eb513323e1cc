//! Grid search over penalty weight and network size.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nn::MlpArch;
use crate::trainer::{evaluate, train, Objective, TrainConfig};

/// Lists of values to combine. Missing lists keep the base configuration's
/// value; a `lambda` list switches the objective to the regularized one.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<usize>>,
}

impl SweepGrid {
    /// Penalty weights from zero up to 1e4.
    pub fn lambda_preset() -> Self {
        Self {
            lambda: Some(vec![0.0, 1e-6, 1e-4, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0, 10000.0]),
            ..Self::default()
        }
    }

    /// Hidden widths {10, 20, 50, 100} crossed with depths {2, 4, 6, 8}.
    pub fn architecture_preset() -> Self {
        Self {
            hidden: Some(vec![10, 20, 50, 100]),
            layers: Some(vec![2, 4, 6, 8]),
            ..Self::default()
        }
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Ok(serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?)
    }

    /// Every combination, in lambda-major, then hidden, then layers order.
    pub fn points(&self, base: &TrainConfig) -> Result<Vec<TrainConfig>> {
        let lambdas: Vec<Option<f64>> = match &self.lambda {
            Some(v) => v.iter().map(|&l| Some(l)).collect(),
            None => vec![None],
        };
        let hidden = self.hidden.clone().unwrap_or_else(|| vec![base.arch.hidden_size]);
        let layers = self.layers.clone().unwrap_or_else(|| vec![base.arch.hidden_layers]);
        if lambdas.is_empty() || hidden.is_empty() || layers.is_empty() {
            return Err(Error::InvalidConfig("sweep grid has an empty axis".into()));
        }
        let mut out = Vec::new();
        for l in &lambdas {
            for &h in &hidden {
                for &n in &layers {
                    let objective = match l {
                        Some(lambda) => Objective::Regularized { lambda: *lambda },
                        None => base.objective,
                    };
                    out.push(TrainConfig {
                        objective,
                        arch: MlpArch::new(n, h),
                        ..base.clone()
                    });
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub objective: String,
    pub lambda: Option<f64>,
    pub hidden_layers: usize,
    pub hidden_size: usize,
    /// `None` when training or evaluation failed.
    pub mse: Option<f64>,
    pub mae: Option<f64>,
    pub relative_error_pct: Option<f64>,
    pub error: Option<String>,
    pub best: bool,
}

/// Trains and evaluates one model per grid point. Points are independent and
/// run in parallel; failures are recorded in their row. The row with the
/// lowest averaged test MSE is marked `best`.
pub fn sweep(base: &TrainConfig, grid: &SweepGrid, train_set: &Dataset, test_set: &Dataset) -> Result<Vec<SweepRow>> {
    let points = grid.points(base)?;
    let mut rows: Vec<SweepRow> = points
        .par_iter()
        .map(|cfg| {
            let lambda = match cfg.objective {
                Objective::Regularized { lambda } => Some(lambda),
                _ => None,
            };
            let mut row = SweepRow {
                objective: cfg.objective.canonical().name().to_string(),
                lambda,
                hidden_layers: cfg.arch.hidden_layers,
                hidden_size: cfg.arch.hidden_size,
                mse: None,
                mae: None,
                relative_error_pct: None,
                error: None,
                best: false,
            };
            match train(cfg, train_set).and_then(|r| evaluate(&r.model, test_set)) {
                Ok(e) => {
                    row.mse = Some(e.mean.mse);
                    row.mae = Some(e.mean.mae);
                    row.relative_error_pct = Some(e.mean.relative_error_pct);
                }
                Err(e) => {
                    log::warn!("grid point {:?} failed: {e}", cfg.arch);
                    row.error = Some(e.to_string());
                }
            }
            row
        })
        .collect();
    let best = rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.mse.map(|m| (i, m)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i);
    if let Some(i) = best {
        rows[i].best = true;
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    w.write_record([
        "objective",
        "lambda",
        "hidden_layers",
        "hidden_size",
        "status",
        "mse",
        "mae",
        "relative_error_pct",
        "best",
        "error",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.objective.clone(),
            opt(r.lambda),
            r.hidden_layers.to_string(),
            r.hidden_size.to_string(),
            if r.error.is_none() { "ok" } else { "failed" }.to_string(),
            opt(r.mse),
            opt(r.mae),
            opt(r.relative_error_pct),
            r.best.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
