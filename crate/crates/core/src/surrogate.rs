//! Linear models of charging statistics.
//!
//! Peak charging power is regressed on start state-of-charge and battery
//! temperature; charging time on start and end state-of-charge and battery
//! temperature. Both are ordinary least squares solved through the normal
//! equations, with classical standard errors and Student-t p-values.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dataset::parse_finite;
use crate::error::{Error, Result};

/// Designs whose Gram matrix exceeds this condition number are refused.
pub const MAX_CONDITION: f64 = 1e12;

/// Coefficients are flagged significant below this p-value.
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

pub const CHARGING_CSV_HEADER: [&str; 6] = [
    "session_id",
    "soc_start_pct",
    "soc_end_pct",
    "battery_temp_c",
    "peak_power_kw",
    "charge_time_min",
];

pub const PEAK_POWER_TERMS: [&str; 3] = ["c_soc", "c_T", "o"];
pub const CHARGE_TIME_TERMS: [&str; 4] = ["c_soc_s", "c_soc_e", "c_T_t", "o_t"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChargingSession {
    pub session_id: String,
    /// Percent.
    pub soc_start: f64,
    /// Percent.
    pub soc_end: f64,
    /// °C
    pub battery_temp: f64,
    /// kW
    pub peak_power: f64,
    /// Minutes.
    pub charge_time: f64,
}

impl ChargingSession {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let vals = [
            self.soc_start,
            self.soc_end,
            self.battery_temp,
            self.peak_power,
            self.charge_time,
        ];
        if !vals.iter().all(|v| v.is_finite()) {
            return Err("non-finite field".into());
        }
        if !(0.0 <= self.soc_start && self.soc_start < self.soc_end && self.soc_end <= 100.0) {
            return Err(format!(
                "need 0 <= soc_start < soc_end <= 100, got {} and {}",
                self.soc_start, self.soc_end
            ));
        }
        if self.peak_power <= 0.0 {
            return Err(format!("peak power must be positive, got {}", self.peak_power));
        }
        if self.charge_time <= 0.0 {
            return Err(format!("charge time must be positive, got {}", self.charge_time));
        }
        Ok(())
    }
}

/// Planted coefficients for synthetic charging data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantCoefficients {
    pub c_soc: f64,
    pub c_t: f64,
    pub o: f64,
    pub c_soc_s: f64,
    pub c_soc_e: f64,
    pub c_t_t: f64,
    pub o_t: f64,
}

impl Default for PlantCoefficients {
    fn default() -> Self {
        Self {
            c_soc: -0.6109,
            c_t: 3.7923,
            o: 39.7772,
            c_soc_s: -0.4505,
            c_soc_e: 0.7690,
            c_t_t: -0.6267,
            o_t: -6.9412,
        }
    }
}

impl PlantCoefficients {
    pub fn peak_power(&self, soc_start: f64, battery_temp: f64) -> f64 {
        self.c_soc * soc_start + self.c_t * battery_temp + self.o
    }

    pub fn charge_time(&self, soc_start: f64, soc_end: f64, battery_temp: f64) -> f64 {
        self.c_soc_s * soc_start + self.c_soc_e * soc_end + self.c_t_t * battery_temp + self.o_t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub t_stats: Vec<f64>,
    pub p_values: Vec<f64>,
    pub r_squared: f64,
    pub residual_variance: f64,
    pub ss_res: f64,
    pub ss_tot: f64,
    pub n: usize,
}

impl OlsFit {
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.coefficients[i])
    }

    pub fn significant(&self, i: usize) -> bool {
        self.p_values[i] < SIGNIFICANCE_LEVEL
    }

    /// `Σ β_k x_k` for a full design row (intercept column included).
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        assert_eq!(row.len(), self.coefficients.len(), "design row width");
        self.coefficients.iter().zip(row).map(|(b, x)| b * x).sum()
    }
}

/// Condition number of a symmetric positive semi-definite matrix;
/// infinite when it is singular.
pub fn condition_number(gram: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(gram.clone()).eigenvalues;
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Lower-triangular `L` with `A = L Lᵀ`; `None` when `A` is not positive
/// definite.
fn cholesky(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let p = a.nrows();
    let mut l = DMatrix::<f64>::zeros(p, p);
    for j in 0..p {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..p {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Some(l)
}

/// Solves `L Lᵀ x = b`.
fn cholesky_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let p = l.nrows();
    let mut z = b.clone();
    for i in 0..p {
        for k in 0..i {
            z[i] -= l[(i, k)] * z[k];
        }
        z[i] /= l[(i, i)];
    }
    for i in (0..p).rev() {
        for k in i + 1..p {
            z[i] -= l[(k, i)] * z[k];
        }
        z[i] /= l[(i, i)];
    }
    z
}

/// Ordinary least squares via the normal equations `XᵀX β = Xᵀy`. The
/// design must contain an intercept column for R² to have its usual meaning.
pub fn fit_ols(x: &DMatrix<f64>, y: &DVector<f64>, names: &[&str]) -> Result<OlsFit> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(Error::LengthMismatch { left: n, right: y.len() });
    }
    if names.len() != p {
        return Err(Error::LengthMismatch {
            left: p,
            right: names.len(),
        });
    }
    if n <= p {
        return Err(Error::TooFewRows { rows: n, cols: p });
    }
    if !x.iter().chain(y.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let gram = x.transpose() * x;
    let condition = condition_number(&gram);
    if !(condition <= MAX_CONDITION) {
        return Err(Error::SingularDesign { condition });
    }
    let l = cholesky(&gram).ok_or(Error::SingularDesign { condition })?;
    let beta = cholesky_solve(&l, &(x.transpose() * y));

    let resid = y - x * &beta;
    let ss_res = resid.norm_squared();
    let mean = y.mean();
    let ss_tot = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    let df = (n - p) as f64;
    let sigma2 = ss_res / df;

    let t_dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    let mut std_errors = Vec::with_capacity(p);
    let mut t_stats = Vec::with_capacity(p);
    let mut p_values = Vec::with_capacity(p);
    for k in 0..p {
        let mut e = DVector::zeros(p);
        e[k] = 1.0;
        let inv_kk = cholesky_solve(&l, &e)[k];
        let se = (sigma2 * inv_kk).sqrt();
        let t = if se > 0.0 {
            beta[k] / se
        } else if beta[k] == 0.0 {
            0.0
        } else {
            beta[k].signum() * f64::INFINITY
        };
        let pv = if t.is_infinite() {
            0.0
        } else {
            (2.0 * t_dist.sf(t.abs())).clamp(0.0, 1.0)
        };
        std_errors.push(se);
        t_stats.push(t);
        p_values.push(pv);
    }
    Ok(OlsFit {
        names: names.iter().map(|s| s.to_string()).collect(),
        coefficients: beta.iter().copied().collect(),
        std_errors,
        t_stats,
        p_values,
        r_squared,
        residual_variance: sigma2,
        ss_res,
        ss_tot,
        n,
    })
}

fn check_sessions(sessions: &[ChargingSession]) -> Result<()> {
    for (index, s) in sessions.iter().enumerate() {
        s.validate()
            .map_err(|reason| Error::InvalidChargingSession { index, reason })?;
    }
    Ok(())
}

/// Peak power on `(soc_start, battery_temp, 1)`.
pub fn fit_peak_power(sessions: &[ChargingSession]) -> Result<OlsFit> {
    check_sessions(sessions)?;
    let x = DMatrix::from_fn(sessions.len(), 3, |i, j| match j {
        0 => sessions[i].soc_start,
        1 => sessions[i].battery_temp,
        _ => 1.0,
    });
    let y = DVector::from_iterator(sessions.len(), sessions.iter().map(|s| s.peak_power));
    fit_ols(&x, &y, &PEAK_POWER_TERMS)
}

/// Charging time on `(soc_start, soc_end, battery_temp, 1)`.
pub fn fit_charge_time(sessions: &[ChargingSession]) -> Result<OlsFit> {
    check_sessions(sessions)?;
    let x = DMatrix::from_fn(sessions.len(), 4, |i, j| match j {
        0 => sessions[i].soc_start,
        1 => sessions[i].soc_end,
        2 => sessions[i].battery_temp,
        _ => 1.0,
    });
    let y = DVector::from_iterator(sessions.len(), sessions.iter().map(|s| s.charge_time));
    fit_ols(&x, &y, &CHARGE_TIME_TERMS)
}

/// Both fitted charging models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateFits {
    pub peak_power: OlsFit,
    pub charge_time: OlsFit,
}

impl SurrogateFits {
    pub fn fit(sessions: &[ChargingSession]) -> Result<Self> {
        Ok(Self {
            peak_power: fit_peak_power(sessions)?,
            charge_time: fit_charge_time(sessions)?,
        })
    }

    pub fn predict(&self, soc_start: f64, soc_end: f64, battery_temp: f64) -> ChargingPrediction {
        predict_charging(&self.peak_power, &self.charge_time, soc_start, soc_end, battery_temp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.peak_power.coefficients.len() != PEAK_POWER_TERMS.len()
            || self.charge_time.coefficients.len() != CHARGE_TIME_TERMS.len()
        {
            return Err(Error::Parse("surrogate fit has the wrong number of coefficients".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let fits: Self = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
        fits.validate()?;
        Ok(fits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChargingPrediction {
    /// kW
    pub peak_power: f64,
    /// Minutes.
    pub charge_time: f64,
}

/// Range of battery temperatures (°C) the models are meant for.
pub const VALID_TEMP_RANGE: (f64, f64) = (-5.79, 33.9);
/// Range of state-of-charge values (%) the models are meant for.
pub const VALID_SOC_RANGE: (f64, f64) = (10.0, 100.0);

/// Evaluates both linear models. Inputs outside the validity ranges are
/// evaluated anyway and logged as a warning.
///
/// # Panics
///
/// If the fits do not have 3 and 4 coefficients respectively.
pub fn predict_charging(
    fit_p: &OlsFit,
    fit_t: &OlsFit,
    soc_start: f64,
    soc_end: f64,
    battery_temp: f64,
) -> ChargingPrediction {
    let in_range = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
    if !in_range(battery_temp, VALID_TEMP_RANGE)
        || !in_range(soc_start, VALID_SOC_RANGE)
        || !in_range(soc_end, VALID_SOC_RANGE)
    {
        log::warn!(
            "charging prediction outside the fitted range: soc_start={soc_start} soc_end={soc_end} temp={battery_temp}"
        );
    }
    ChargingPrediction {
        peak_power: fit_p.predict_row(&[soc_start, battery_temp, 1.0]),
        charge_time: fit_t.predict_row(&[soc_start, soc_end, battery_temp, 1.0]),
    }
}

pub fn read_charging_csv<R: Read>(reader: R) -> Result<Vec<ChargingSession>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().ne(CHARGING_CSV_HEADER.iter().copied()) {
        return Err(Error::Parse(format!(
            "unexpected charging CSV header: {}",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let f = |i: usize| parse_finite(CHARGING_CSV_HEADER[i], &rec[i]);
        let s = ChargingSession {
            session_id: rec[0].to_string(),
            soc_start: f(1)?,
            soc_end: f(2)?,
            battery_temp: f(3)?,
            peak_power: f(4)?,
            charge_time: f(5)?,
        };
        s.validate().map_err(|reason| Error::InvalidChargingSession {
            index: out.len(),
            reason,
        })?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_charging_csv<W: Write>(sessions: &[ChargingSession], writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    w.write_record(CHARGING_CSV_HEADER)?;
    for s in sessions {
        w.write_record([
            s.session_id.clone(),
            s.soc_start.to_string(),
            s.soc_end.to_string(),
            s.battery_temp.to_string(),
            s.peak_power.to_string(),
            s.charge_time.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Coefficient table: one row per term of both models.
pub fn write_fit_report<W: Write>(fits: &SurrogateFits, writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    w.write_record([
        "model",
        "term",
        "estimate",
        "std_error",
        "t_stat",
        "p_value",
        "significant_p05",
        "r_squared",
        "n",
    ])?;
    for (model, fit) in [("peak_power", &fits.peak_power), ("charge_time", &fits.charge_time)] {
        for k in 0..fit.coefficients.len() {
            w.write_record([
                model.to_string(),
                fit.names[k].clone(),
                fit.coefficients[k].to_string(),
                fit.std_errors[k].to_string(),
                fit.t_stats[k].to_string(),
                fit.p_values[k].to_string(),
                fit.significant(k).to_string(),
                fit.r_squared.to_string(),
                fit.n.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
