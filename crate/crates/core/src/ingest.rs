//! Hourly airport delay matrices from flight records, outlier clipping,
//! z-score standardization and train/validation/test windowing.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::ops::Range;

use chrono::{DateTime, Duration, Timelike, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minutes charged per cancelled flight.
pub const DEFAULT_CANCELLATION_DELAY: f64 = 180.0;

/// Per-airport clipping quantile; clips about 4.26% of continuous data.
pub const DEFAULT_OUTLIER_QUANTILE: f64 = 0.9574;

/// Records departing more than this many minutes early are rejected.
const EARLY_DEPARTURE_LIMIT_MIN: i64 = 1440;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("airport list is empty")]
    NoAirports,
    #[error("record for unknown airport {0:?}")]
    UnknownAirport(String),
    #[error("duplicate flight records: {0}")]
    Duplicates(String),
    #[error("invalid flight record at {airport} {scheduled}: {reason}")]
    InvalidRecord {
        airport: String,
        scheduled: DateTime<Utc>,
        reason: &'static str,
    },
    #[error("time span is empty or not aligned to whole hours")]
    BadSpan,
    #[error("airport {0:?} has no observed hours")]
    AllMasked(String),
    #[error("quantile {0} must lie strictly between 0 and 1")]
    BadQuantile(f64),
    #[error("training data has zero variance")]
    ZeroVariance,
    #[error("split fractions must be nonnegative and sum to 1, got {0:?}")]
    BadFractions([f64; 3]),
    #[error("series of {got} hours is too short; need at least {need}")]
    TooShort { got: usize, need: usize },
    #[error("matrix shape mismatch: {0}")]
    Shape(String),
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, IngestError>;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FlightRecord {
    pub airport: String,
    pub scheduled: DateTime<Utc>,
    pub actual: Option<DateTime<Utc>>,
    pub cancelled: bool,
}

impl FlightRecord {
    fn check(&self) -> Result<()> {
        let invalid = |reason| IngestError::InvalidRecord {
            airport: self.airport.clone(),
            scheduled: self.scheduled,
            reason,
        };
        match (self.cancelled, self.actual) {
            (true, Some(_)) => Err(invalid("cancelled flight has an actual departure")),
            (false, None) => Err(invalid("operated flight has no actual departure")),
            (false, Some(a)) if a < self.scheduled - Duration::minutes(EARLY_DEPARTURE_LIMIT_MIN) => {
                Err(invalid("actual departure more than a day before schedule"))
            }
            _ => Ok(()),
        }
    }

    /// Departure delay in whole minutes, floored at zero.
    fn delay_minutes(&self) -> f64 {
        self.actual
            .map(|a| (a - self.scheduled).num_minutes().max(0) as f64)
            .unwrap_or(0.0)
    }
}

/// `N × T` hourly average departure delays in minutes.
///
/// Stored airport-major so each airport's series is a contiguous slice.
#[derive(Clone, Debug, PartialEq)]
pub struct DelayMatrix {
    airports: Vec<String>,
    start: DateTime<Utc>,
    hours: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl DelayMatrix {
    pub fn new(
        airports: Vec<String>,
        start: DateTime<Utc>,
        hours: usize,
        values: Vec<f64>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        if airports.is_empty() {
            return Err(IngestError::NoAirports);
        }
        let cells = airports.len() * hours;
        if values.len() != cells || mask.len() != cells {
            return Err(IngestError::Shape(format!(
                "{} airports x {hours} hours needs {cells} cells, got {} values and {} mask entries",
                airports.len(),
                values.len(),
                mask.len()
            )));
        }
        Ok(Self {
            airports,
            start,
            hours,
            values,
            mask,
        })
    }

    /// Fully observed matrix from per-airport series.
    pub fn from_series(airports: Vec<String>, start: DateTime<Utc>, series: &[Vec<f64>]) -> Result<Self> {
        let hours = series.first().map_or(0, Vec::len);
        if series.iter().any(|s| s.len() != hours) || series.len() != airports.len() {
            return Err(IngestError::Shape("ragged series".into()));
        }
        let values: Vec<f64> = series.iter().flatten().copied().collect();
        let mask = vec![true; values.len()];
        Self::new(airports, start, hours, values, mask)
    }

    pub fn airports(&self) -> &[String] {
        &self.airports
    }

    pub fn n_airports(&self) -> usize {
        self.airports.len()
    }

    pub fn hours(&self) -> usize {
        self.hours
    }

    pub fn start(&self) -> DateTime<Utc> {
        self.start
    }

    pub fn value(&self, airport: usize, hour: usize) -> f64 {
        self.values[airport * self.hours + hour]
    }

    pub fn observed(&self, airport: usize, hour: usize) -> bool {
        self.mask[airport * self.hours + hour]
    }

    pub fn series(&self, airport: usize) -> &[f64] {
        &self.values[airport * self.hours..(airport + 1) * self.hours]
    }

    pub fn mask_series(&self, airport: usize) -> &[bool] {
        &self.mask[airport * self.hours..(airport + 1) * self.hours]
    }

    /// Sub-matrix over an hour range.
    pub fn slice_hours(&self, range: Range<usize>) -> DelayMatrix {
        let len = range.len();
        let mut values = Vec::with_capacity(len * self.n_airports());
        let mut mask = Vec::with_capacity(len * self.n_airports());
        for i in 0..self.n_airports() {
            values.extend_from_slice(&self.series(i)[range.clone()]);
            mask.extend_from_slice(&self.mask_series(i)[range.clone()]);
        }
        DelayMatrix {
            airports: self.airports.clone(),
            start: self.start + Duration::hours(range.start as i64),
            hours: len,
            values,
            mask,
        }
    }

    /// Same layout with every value passed through `f`.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> DelayMatrix {
        DelayMatrix {
            values: self.values.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// Writes `time,<airport_1>,...` with one row per hour.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        self.write_grid(w, |i, t| format_value(self.value(i, t)))
    }

    /// Writes the observation mask as 0/1 in the same layout as the values.
    pub fn write_mask_csv<W: Write>(&self, w: W) -> Result<()> {
        self.write_grid(w, |i, t| if self.observed(i, t) { "1".into() } else { "0".into() })
    }

    fn write_grid<W: Write>(&self, w: W, cell: impl Fn(usize, usize) -> String) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["time".to_string()];
        header.extend(self.airports.iter().cloned());
        out.write_record(&header)?;
        for t in 0..self.hours {
            let time = self.start + Duration::hours(t as i64);
            let mut row = vec![time.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)];
            row.extend((0..self.n_airports()).map(|i| cell(i, t)));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a matrix written by [`DelayMatrix::write_csv`], with an optional
    /// mask file; without one every hour counts as observed.
    pub fn read_csv<R: Read, M: Read>(values: R, mask: Option<M>) -> Result<Self> {
        let (airports, times, rows) = read_grid(values)?;
        let start = *times.first().ok_or(IngestError::TooShort { got: 0, need: 1 })?;
        for (k, t) in times.iter().enumerate() {
            if *t != start + Duration::hours(k as i64) {
                return Err(IngestError::Parse {
                    line: k as u64 + 2,
                    msg: format!("expected consecutive hours, found {t}"),
                });
            }
        }
        let n = airports.len();
        let hours = rows.len();
        let mut value = vec![0.0; n * hours];
        for (t, row) in rows.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                value[i * hours + t] = *v;
            }
        }
        let mask_vec = match mask {
            None => vec![true; n * hours],
            Some(m) => {
                let (mask_airports, mask_times, mask_rows) = read_grid(m)?;
                if mask_airports != airports || mask_times != times {
                    return Err(IngestError::Shape("mask header or times differ from values".into()));
                }
                let mut out = vec![false; n * hours];
                for (t, row) in mask_rows.iter().enumerate() {
                    for (i, v) in row.iter().enumerate() {
                        out[i * hours + t] = *v != 0.0;
                    }
                }
                out
            }
        };
        Self::new(airports, start, hours, value, mask_vec)
    }
}

fn format_value(v: f64) -> String {
    // shortest representation that round-trips exactly
    format!("{v:?}")
}

type Grid = (Vec<String>, Vec<DateTime<Utc>>, Vec<Vec<f64>>);

fn read_grid<R: Read>(r: R) -> Result<Grid> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    if header.get(0) != Some("time") || header.len() < 2 {
        return Err(IngestError::Parse {
            line: 1,
            msg: "header must be time,<airport>,...".into(),
        });
    }
    let airports: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut times = Vec::new();
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k as u64 + 2;
        if rec.len() != airports.len() + 1 {
            return Err(IngestError::Parse {
                line,
                msg: format!("expected {} fields, found {}", airports.len() + 1, rec.len()),
            });
        }
        times.push(parse_time(&rec[0], line)?);
        let row = rec
            .iter()
            .skip(1)
            .map(|f| {
                f.trim().parse::<f64>().map_err(|e| IngestError::Parse {
                    line,
                    msg: format!("{f:?}: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok((airports, times, rows))
}

fn parse_time(s: &str, line: u64) -> Result<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s.trim())
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| IngestError::Parse {
            line,
            msg: format!("bad timestamp {s:?}: {e}"),
        })
}

/// Reads `airport_id,scheduled_utc,actual_utc,cancelled` records.
pub fn read_flights<R: Read>(r: R) -> Result<Vec<FlightRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k as u64 + 2;
        if rec.len() != 4 {
            return Err(IngestError::Parse {
                line,
                msg: format!("expected 4 fields, found {}", rec.len()),
            });
        }
        let cancelled = match rec[3].trim() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => {
                return Err(IngestError::Parse {
                    line,
                    msg: format!("cancelled flag {other:?}"),
                })
            }
        };
        let actual = match rec[2].trim() {
            "" => None,
            s => Some(parse_time(s, line)?),
        };
        let record = FlightRecord {
            airport: rec[0].trim().to_string(),
            scheduled: parse_time(&rec[1], line)?,
            actual,
            cancelled,
        };
        record.check().map_err(|e| IngestError::Parse {
            line,
            msg: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Average delay per scheduled departure for each airport and hour.
///
/// Each cell is `(total delay + rho * cancellations) / scheduled flights`
/// over flights scheduled in that hour. Hours with no scheduled flights are
/// 0 and unmasked. Records scheduled outside `[start, end)` are ignored.
pub fn bin_delays(
    records: &[FlightRecord],
    airports: &[String],
    start: DateTime<Utc>,
    end: DateTime<Utc>,
    rho: f64,
) -> Result<DelayMatrix> {
    if airports.is_empty() {
        return Err(IngestError::NoAirports);
    }
    let aligned = |t: DateTime<Utc>| t.minute() == 0 && t.second() == 0 && t.nanosecond() == 0;
    if end <= start || !aligned(start) || !aligned(end) {
        return Err(IngestError::BadSpan);
    }
    let hours = (end - start).num_hours() as usize;
    let index: HashMap<&str, usize> = airports.iter().enumerate().map(|(i, a)| (a.as_str(), i)).collect();

    let mut sorted: Vec<&FlightRecord> = records.iter().collect();
    sorted.sort();
    let dupes: Vec<String> = sorted
        .windows(2)
        .filter(|w| w[0] == w[1])
        .map(|w| format!("{}@{}", w[0].airport, w[0].scheduled.to_rfc3339()))
        .collect();
    if !dupes.is_empty() {
        return Err(IngestError::Duplicates(dupes.join(", ")));
    }

    let n = airports.len();
    let mut delay = vec![0.0; n * hours];
    let mut cancelled = vec![0.0; n * hours];
    let mut scheduled = vec![0.0; n * hours];
    for rec in sorted {
        rec.check()?;
        let i = *index
            .get(rec.airport.as_str())
            .ok_or_else(|| IngestError::UnknownAirport(rec.airport.clone()))?;
        if rec.scheduled < start || rec.scheduled >= end {
            continue;
        }
        let t = (rec.scheduled - start).num_hours() as usize;
        let cell = i * hours + t;
        scheduled[cell] += 1.0;
        if rec.cancelled {
            cancelled[cell] += 1.0;
        } else {
            delay[cell] += rec.delay_minutes();
        }
    }
    let mut values = vec![0.0; n * hours];
    let mut mask = vec![false; n * hours];
    for c in 0..n * hours {
        if scheduled[c] > 0.0 {
            values[c] = (delay[c] + rho * cancelled[c]) / scheduled[c];
            mask[c] = true;
        }
    }
    DelayMatrix::new(airports.to_vec(), start, hours, values, mask)
}

/// Linear-interpolation quantile of sorted data (Hyndman-Fan type 7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Clips each airport's observed values at its `upper_quantile`.
///
/// Returns the clipped matrix and the fraction of observed cells that were
/// clipped.
pub fn remove_outliers(m: &DelayMatrix, upper_quantile: f64) -> Result<(DelayMatrix, f64)> {
    if !(upper_quantile > 0.0 && upper_quantile < 1.0) {
        return Err(IngestError::BadQuantile(upper_quantile));
    }
    let mut out = m.clone();
    let mut clipped = 0usize;
    let mut observed = 0usize;
    for i in 0..m.n_airports() {
        let mut obs: Vec<f64> = m
            .series(i)
            .iter()
            .zip(m.mask_series(i))
            .filter_map(|(&v, &ok)| ok.then_some(v))
            .collect();
        if obs.is_empty() {
            return Err(IngestError::AllMasked(m.airports[i].clone()));
        }
        obs.sort_by(f64::total_cmp);
        let cap = quantile_sorted(&obs, upper_quantile);
        observed += obs.len();
        let hours = m.hours;
        for t in 0..hours {
            let c = i * hours + t;
            if out.mask[c] && out.values[c] > cap {
                out.values[c] = cap;
                clipped += 1;
            }
        }
    }
    Ok((out, clipped as f64 / observed as f64))
}

/// Global mean and population standard deviation of observed delays.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZScoreParams {
    pub mean: f64,
    pub std: f64,
}

impl ZScoreParams {
    /// Fits on observed cells only; pass the training slice.
    pub fn fit(train: &DelayMatrix) -> Result<Self> {
        let obs: Vec<f64> = train
            .values
            .iter()
            .zip(&train.mask)
            .filter_map(|(&v, &ok)| ok.then_some(v))
            .collect();
        Self::fit_values(&obs)
    }

    pub fn fit_values(obs: &[f64]) -> Result<Self> {
        if obs.is_empty() {
            return Err(IngestError::ZeroVariance);
        }
        let n = obs.len() as f64;
        let mean = obs.iter().sum::<f64>() / n;
        let var = obs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > f64::EPSILON * mean.abs().max(1.0)) {
            return Err(IngestError::ZeroVariance);
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    /// Standardizes every cell and sets unobserved cells to 0.
    pub fn apply_matrix(&self, m: &DelayMatrix) -> DelayMatrix {
        let mut out = m.map_values(|v| self.apply(v));
        for (v, &ok) in out.values.iter_mut().zip(&m.mask) {
            if !ok {
                *v = 0.0;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

/// Contiguous hour ranges of the three segments.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Splits `hours` into contiguous train/val/test segments, each long enough
/// to hold at least one window of `r + 1` inputs and `horizon` targets.
pub fn split_ranges(hours: usize, fractions: SplitFractions, r: usize, horizon: usize) -> Result<SplitRanges> {
    let f = [fractions.train, fractions.val, fractions.test];
    if f.iter().any(|&x| !(x > 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(IngestError::BadFractions(f));
    }
    let window = r + horizon + 1;
    let smallest = f.iter().copied().fold(f64::INFINITY, f64::min);
    let need = ((window as f64 / smallest).ceil() as usize).max(window);
    let a = (hours as f64 * f[0]).round() as usize;
    let b = (hours as f64 * (f[0] + f[1])).round() as usize;
    let ranges = SplitRanges {
        train: 0..a,
        val: a..b,
        test: b..hours,
    };
    if [&ranges.train, &ranges.val, &ranges.test].iter().any(|s| s.len() < window) {
        return Err(IngestError::TooShort { got: hours, need });
    }
    Ok(ranges)
}

/// Inputs `X^{t-r..t}` paired with targets `Y^{t+1..t+horizon}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Hour index of the last input step.
    pub t: usize,
    /// `(r + 1) × N`, oldest first.
    pub inputs: Vec<Vec<f64>>,
    /// `horizon × N`.
    pub targets: Vec<Vec<f64>>,
    pub target_mask: Vec<Vec<bool>>,
}

/// All windows lying wholly inside `range`.
pub fn windows(m: &DelayMatrix, range: Range<usize>, r: usize, horizon: usize) -> Vec<Sample> {
    let n = m.n_airports();
    let column = |t: usize| (0..n).map(|i| m.value(i, t)).collect::<Vec<f64>>();
    if range.len() < r + horizon + 1 {
        return Vec::new();
    }
    (range.start + r..range.end - horizon)
        .map(|t| Sample {
            t,
            inputs: (t - r..=t).map(column).collect(),
            targets: (t + 1..=t + horizon).map(column).collect(),
            target_mask: (t + 1..=t + horizon)
                .map(|h| (0..n).map(|i| m.observed(i, h)).collect())
                .collect(),
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct SampleSets {
    pub ranges: SplitRanges,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Splits `m` in time and cuts each segment into sliding windows. No window
/// straddles a segment boundary.
pub fn split_windows(m: &DelayMatrix, fractions: SplitFractions, r: usize, horizon: usize) -> Result<SampleSets> {
    let ranges = split_ranges(m.hours(), fractions, r, horizon)?;
    Ok(SampleSets {
        train: windows(m, ranges.train.clone(), r, horizon),
        val: windows(m, ranges.val.clone(), r, horizon),
        test: windows(m, ranges.test.clone(), r, horizon),
        ranges,
    })
}
