//! Drive-session data: samples, validation, splitting, input statistics and
//! the drive CSV format.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of model inputs.
pub const N_FEATURES: usize = 6;

/// One model input vector, ordered as in [`feature`].
pub type Features = [f64; N_FEATURES];

/// Positions of each quantity inside a [`Features`] vector.
pub mod feature {
    pub const T_REL: usize = 0;
    pub const POWER: usize = 1;
    pub const SPEED: usize = 2;
    pub const BATTERY_LEVEL: usize = 3;
    pub const OUTSIDE_TEMP: usize = 4;
    pub const BATTERY_TEMP: usize = 5;

    /// Indices of the environmental inputs (everything except relative time).
    pub const ENVIRONMENTAL: [usize; 5] = [POWER, SPEED, BATTERY_LEVEL, OUTSIDE_TEMP, BATTERY_TEMP];

    pub const NAMES: [&str; super::N_FEATURES] = [
        "t_rel",
        "power",
        "speed",
        "battery_level",
        "outside_temp",
        "battery_temp",
    ];
}

/// Header of the drive-session CSV.
pub const DRIVE_CSV_HEADER: [&str; 7] = [
    "session_id",
    "t_rel_s",
    "power_kw",
    "speed_kmh",
    "battery_level_pct",
    "outside_temp_c",
    "battery_temp_c",
];

/// One timestamped measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Seconds since session start.
    pub t_rel: f64,
    /// kW, negative while recuperating.
    pub power: f64,
    /// km/h.
    pub speed: f64,
    /// Percent.
    pub battery_level: f64,
    /// °C.
    pub outside_temp: f64,
    /// °C.
    pub battery_temp: f64,
}

impl Sample {
    pub fn features(&self) -> Features {
        [
            self.t_rel,
            self.power,
            self.speed,
            self.battery_level,
            self.outside_temp,
            self.battery_temp,
        ]
    }

    /// Features with the battery temperature replaced, as used when the
    /// temperature comes from a rollout instead of the recording.
    pub fn features_with_temp(&self, battery_temp: f64) -> Features {
        let mut x = self.features();
        x[feature::BATTERY_TEMP] = battery_temp;
        x
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        self.features()
            .iter()
            .zip(feature::NAMES)
            .find(|(v, _)| !v.is_finite())
            .map(|(_, name)| name)
    }
}

/// Ordered samples of a single drive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriveSession {
    pub id: String,
    pub samples: Vec<Sample>,
}

impl DriveSession {
    pub fn new(id: impl Into<String>, samples: Vec<Sample>) -> Self {
        Self {
            id: id.into(),
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t_rel).collect()
    }

    pub fn temperatures(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.battery_temp).collect()
    }

    /// Session restricted to its first `k` samples.
    pub fn truncated(&self, k: usize) -> DriveSession {
        DriveSession::new(self.id.clone(), self.samples[..k.min(self.len())].to_vec())
    }
}

/// Checks every session invariant and hands the session back unchanged.
pub fn validate_session(raw: DriveSession) -> Result<DriveSession> {
    check_session(&raw)?;
    Ok(raw)
}

pub(crate) fn check_session(s: &DriveSession) -> Result<()> {
    for (index, sample) in s.samples.iter().enumerate() {
        if let Some(field) = sample.first_non_finite() {
            return Err(Error::NonFinite {
                session: s.id.clone(),
                index,
                field,
            });
        }
    }
    if s.samples.len() < 2 {
        return Err(Error::TooShort {
            session: s.id.clone(),
            len: s.samples.len(),
        });
    }
    check_time_axis(&s.id, &s.samples)?;
    let t0 = s.samples[0].t_rel;
    if t0 != 0.0 {
        return Err(Error::NonZeroStart {
            session: s.id.clone(),
            t0,
        });
    }
    Ok(())
}

/// Monotonicity and sign checks shared with sub-session chunks, which do not
/// start at zero.
pub(crate) fn check_time_axis(id: &str, samples: &[Sample]) -> Result<()> {
    for (index, s) in samples.iter().enumerate() {
        if s.t_rel < 0.0 {
            return Err(Error::NegativeTime {
                session: id.to_string(),
                index,
            });
        }
        if index > 0 && s.t_rel <= samples[index - 1].t_rel {
            return Err(Error::NonMonotonicTime {
                session: id.to_string(),
                index,
            });
        }
    }
    Ok(())
}

/// A collection of drive sessions with unique ids.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub sessions: Vec<DriveSession>,
}

impl Dataset {
    /// Builds a dataset, validating every session and the id uniqueness.
    pub fn new(sessions: Vec<DriveSession>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &sessions {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::DuplicateSessionId(s.id.clone()));
            }
            check_session(s)?;
        }
        Ok(Self { sessions })
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn n_samples(&self) -> usize {
        self.sessions.iter().map(DriveSession::len).sum()
    }

    pub fn get(&self, id: &str) -> Option<&DriveSession> {
        self.sessions.iter().find(|s| s.id == id)
    }

    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.sessions.iter().flat_map(|s| s.samples.iter())
    }
}

/// Number of test sessions for a fractional split: rounded, and kept within
/// `[1, n - 1]` so both sides are non-empty.
pub fn test_count(n_sessions: usize, test_fraction: f64) -> usize {
    let k = (test_fraction * n_sessions as f64).round() as usize;
    k.clamp(1, n_sessions.saturating_sub(1).max(1))
}

/// Random split by whole sessions. Each side keeps the original session
/// order.
pub fn split_dataset(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidFraction(test_fraction));
    }
    let n = ds.len();
    if n < 2 {
        return Err(Error::TooFewSessions { needed: 2, got: n });
    }
    let k = test_count(n, test_fraction);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut is_test = vec![false; n];
    for &i in &order[..k] {
        is_test[i] = true;
    }
    Ok(partition(ds, &is_test))
}

/// Split with an explicit list of test-session ids.
pub fn split_dataset_by_ids<S: AsRef<str>>(
    ds: &Dataset,
    test_ids: &[S],
) -> Result<(Dataset, Dataset)> {
    let mut is_test = vec![false; ds.len()];
    for id in test_ids {
        let id = id.as_ref();
        let pos = ds
            .sessions
            .iter()
            .position(|s| s.id == id)
            .ok_or_else(|| Error::UnknownSessionId(id.to_string()))?;
        is_test[pos] = true;
    }
    let n_test = is_test.iter().filter(|&&t| t).count();
    if n_test == 0 || n_test == ds.len() {
        return Err(Error::TooFewSessions {
            needed: 2,
            got: ds.len(),
        });
    }
    Ok(partition(ds, &is_test))
}

fn partition(ds: &Dataset, is_test: &[bool]) -> (Dataset, Dataset) {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (s, &t) in ds.sessions.iter().zip(is_test) {
        if t {
            test.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    (Dataset { sessions: train }, Dataset { sessions: test })
}

/// Per-feature mean and standard deviation of the model inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Features,
    pub std: Features,
}

impl NormStats {
    /// Standardization that leaves inputs unchanged.
    pub fn identity() -> Self {
        Self {
            mean: [0.0; N_FEATURES],
            std: [1.0; N_FEATURES],
        }
    }

    pub fn standardize(&self, x: &Features) -> Features {
        std::array::from_fn(|j| (x[j] - self.mean[j]) / self.std[j])
    }

    pub(crate) fn is_valid(&self) -> bool {
        self.mean.iter().all(|m| m.is_finite())
            && self.std.iter().all(|s| s.is_finite() && *s > 0.0)
    }
}

/// Population standard deviations below this are treated as constant
/// features and replaced by 1.
pub const MIN_STD: f64 = 1e-12;

/// Fits input statistics over every sample of every session.
pub fn fit_norm_stats(train: &Dataset) -> Result<NormStats> {
    let rows: Vec<Features> = train.samples().map(Sample::features).collect();
    fit_norm_stats_rows(&rows)
}

pub(crate) fn fit_norm_stats_rows(rows: &[Features]) -> Result<NormStats> {
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    // Welford accumulation
    let mut mean = [0.0; N_FEATURES];
    let mut m2 = [0.0; N_FEATURES];
    for (k, x) in rows.iter().enumerate() {
        let n = (k + 1) as f64;
        for j in 0..N_FEATURES {
            let d = x[j] - mean[j];
            mean[j] += d / n;
            m2[j] += d * (x[j] - mean[j]);
        }
    }
    let n = rows.len() as f64;
    let std = std::array::from_fn(|j| {
        let s = (m2[j] / n).max(0.0).sqrt();
        if s < MIN_STD {
            1.0
        } else {
            s
        }
    });
    Ok(NormStats { mean, std })
}

#[derive(Debug, Serialize, Deserialize)]
struct DriveRow {
    session_id: String,
    t_rel_s: String,
    power_kw: String,
    speed_kmh: String,
    battery_level_pct: String,
    outside_temp_c: String,
    battery_temp_c: String,
}

/// Parses a finite decimal number; `inf`, `nan` and friends are rejected.
pub fn parse_finite(field: &str, raw: &str) -> Result<f64> {
    let t = raw.trim();
    let looks_decimal = !t.is_empty()
        && t
            .chars()
            .all(|c| c.is_ascii_digit() || matches!(c, '.' | '-' | '+' | 'e' | 'E'))
        && t.chars().any(|c| c.is_ascii_digit());
    let v = if looks_decimal {
        t.parse::<f64>().ok()
    } else {
        None
    };
    match v {
        Some(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Parse(format!("field `{field}`: `{raw}` is not a finite decimal"))),
    }
}

/// Reads a drive CSV. Rows of one session must be contiguous.
pub fn read_drive_csv<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().ne(DRIVE_CSV_HEADER.iter().copied()) {
        return Err(Error::Parse(format!(
            "unexpected drive CSV header: {}",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut sessions: Vec<DriveSession> = Vec::new();
    let mut closed = HashSet::new();
    for row in rdr.deserialize() {
        let row: DriveRow = row?;
        let sample = Sample {
            t_rel: parse_finite("t_rel_s", &row.t_rel_s)?,
            power: parse_finite("power_kw", &row.power_kw)?,
            speed: parse_finite("speed_kmh", &row.speed_kmh)?,
            battery_level: parse_finite("battery_level_pct", &row.battery_level_pct)?,
            outside_temp: parse_finite("outside_temp_c", &row.outside_temp_c)?,
            battery_temp: parse_finite("battery_temp_c", &row.battery_temp_c)?,
        };
        match sessions.last_mut() {
            Some(last) if last.id == row.session_id => last.samples.push(sample),
            _ => {
                if let Some(last) = sessions.last() {
                    closed.insert(last.id.clone());
                }
                if closed.contains(&row.session_id) {
                    return Err(Error::Parse(format!(
                        "rows of session `{}` are not contiguous",
                        row.session_id
                    )));
                }
                sessions.push(DriveSession::new(row.session_id, vec![sample]));
            }
        }
    }
    Dataset::new(sessions)
}

pub fn write_drive_csv<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    w.write_record(DRIVE_CSV_HEADER)?;
    for s in &ds.sessions {
        for x in &s.samples {
            w.write_record([
                s.id.clone(),
                x.t_rel.to_string(),
                x.power.to_string(),
                x.speed.to_string(),
                x.battery_level.to_string(),
                x.outside_temp.to_string(),
                x.battery_temp.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_drive_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    read_drive_csv(std::fs::File::open(path)?)
}

pub fn save_drive_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_drive_csv(ds, f)
}
