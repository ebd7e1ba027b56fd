//! Dataset ingestion and per-channel access.
//!
//! All times are held in days (one unit of model time is one day, optionally
//! rescaled by [`TimeUnitConfig`]). Missing cells are carried as a validity
//! mask and never filled, except in [`export_zero_filled`].

use std::fs;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::error::{DamError, Result};
use crate::stats;

pub const SECONDS_PER_DAY: f64 = 86_400.0;

/// Conversion from source ticks to model time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeUnitConfig {
    /// Seconds per source tick (the sample resolution).
    pub base_seconds: f64,
    /// Real-time seconds that map onto one model day. 86400 leaves time
    /// unscaled; larger values compress long-resolution data onto the basis.
    #[serde(default = "default_base_frequency")]
    pub base_frequency: f64,
}

fn default_base_frequency() -> f64 {
    SECONDS_PER_DAY
}

impl TimeUnitConfig {
    pub fn new(base_seconds: f64) -> Self {
        Self {
            base_seconds,
            base_frequency: SECONDS_PER_DAY,
        }
    }

    pub fn with_base_frequency(mut self, base_frequency: f64) -> Self {
        self.base_frequency = base_frequency;
        self
    }

    /// Multiplier applied to day-valued times.
    pub fn scaling(&self) -> f64 {
        SECONDS_PER_DAY / self.base_frequency
    }

    /// Model-time length of one tick.
    pub fn resolution_days(&self) -> f64 {
        self.base_seconds / self.base_frequency
    }

    pub fn seconds_to_days(&self, seconds: f64) -> f64 {
        seconds / self.base_frequency
    }

    pub fn ticks_to_days(&self, tick: f64) -> f64 {
        tick * self.base_seconds / self.base_frequency
    }

    fn validate(&self) -> Result<()> {
        if !(self.base_seconds > 0.0 && self.base_frequency > 0.0) {
            return Err(DamError::Config(format!(
                "time unit needs positive base_seconds and base_frequency, got {} and {}",
                self.base_seconds, self.base_frequency
            )));
        }
        Ok(())
    }
}

/// One univariate channel.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeValueSeries {
    pub name: String,
    pub times: Vec<f64>,
    /// Values in dataset units; `NaN` where `valid` is false.
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
    /// Days between consecutive samples.
    pub resolution: f64,
}

impl TimeValueSeries {
    pub fn new(
        name: impl Into<String>,
        times: Vec<f64>,
        values: Vec<f64>,
        valid: Vec<bool>,
        resolution: f64,
    ) -> Result<Self> {
        if times.len() != values.len() {
            return Err(DamError::LengthMismatch {
                left: times.len(),
                right: values.len(),
            });
        }
        if times.len() != valid.len() {
            return Err(DamError::LengthMismatch {
                left: times.len(),
                right: valid.len(),
            });
        }
        if !(resolution > 0.0) {
            return Err(DamError::Config(format!(
                "resolution must be positive, got {resolution}"
            )));
        }
        if let Some(i) = times.windows(2).position(|w| w[1] <= w[0]) {
            return Err(DamError::NonMonotonic { row: i + 1 });
        }
        Ok(Self {
            name: name.into(),
            times,
            values,
            valid,
            resolution,
        })
    }

    /// A regular, fully observed series starting at time 0.
    pub fn regular(name: impl Into<String>, values: Vec<f64>, resolution: f64) -> Self {
        let times = (0..values.len()).map(|i| i as f64 * resolution).collect();
        let valid = values.iter().map(|v| v.is_finite()).collect();
        Self {
            name: name.into(),
            times,
            values,
            valid,
            resolution,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Appends `steps` unobserved points at the series resolution, so an
    /// anchor can sit just past the last observation.
    pub fn extended(&self, steps: usize) -> TimeValueSeries {
        let mut out = self.clone();
        let last = self.times.last().copied().unwrap_or(-self.resolution);
        for k in 1..=steps {
            out.times.push(last + k as f64 * self.resolution);
            out.values.push(f64::NAN);
            out.valid.push(false);
        }
        out
    }

    /// Values restricted to an index range (including invalid entries).
    pub fn slice(&self, range: Range<usize>) -> TimeValueSeries {
        TimeValueSeries {
            name: self.name.clone(),
            times: self.times[range.clone()].to_vec(),
            values: self.values[range.clone()].to_vec(),
            valid: self.valid[range].to_vec(),
            resolution: self.resolution,
        }
    }
}

/// Shifts times so that `times[now_index] == 0`; the past becomes negative.
pub fn rebase_to_now(series: &TimeValueSeries, now_index: usize) -> Result<TimeValueSeries> {
    let origin = *series.times.get(now_index).ok_or(DamError::IndexOutOfRange {
        index: now_index,
        len: series.len(),
    })?;
    let mut out = series.clone();
    for t in &mut out.times {
        *t -= origin;
    }
    Ok(out)
}

/// Contiguous, ordered train/valid/test index ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Range<usize>,
    pub valid: Range<usize>,
    pub test: Range<usize>,
}

impl DatasetSplit {
    /// Boundaries at `train_end` and `valid_end`, test running to `len`.
    pub fn from_boundaries(len: usize, train_end: usize, valid_end: usize) -> Result<Self> {
        if !(train_end <= valid_end && valid_end <= len) {
            return Err(DamError::Config(format!(
                "split boundaries {train_end}, {valid_end} invalid for length {len}"
            )));
        }
        Ok(Self {
            train: 0..train_end,
            valid: train_end..valid_end,
            test: valid_end..len,
        })
    }

    /// Train and validation fractions; the test split takes the remainder.
    pub fn from_fractions(len: usize, train: f64, valid: f64) -> Result<Self> {
        if !(train >= 0.0 && valid >= 0.0 && train + valid <= 1.0 + 1e-12) {
            return Err(DamError::Config(format!(
                "split fractions {train}, {valid} must be non-negative and sum to at most 1"
            )));
        }
        let train_end = (train * len as f64).round() as usize;
        let valid_end = ((train + valid) * len as f64).round().min(len as f64) as usize;
        Self::from_boundaries(len, train_end, valid_end)
    }

    /// Everything in training.
    pub fn all_train(len: usize) -> Self {
        Self {
            train: 0..len,
            valid: len..len,
            test: len..len,
        }
    }
}

/// How the first CSV column encodes time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TimeColumn {
    /// Integer tick index; spacing given by `TimeUnitConfig::base_seconds`.
    #[default]
    Tick,
    /// Elapsed seconds.
    Seconds,
    /// ISO-8601 date-times, converted to elapsed seconds from the first row.
    Iso8601,
    /// Model days, taken as-is.
    Days,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    pub time_column: TimeColumn,
    pub time_unit: TimeUnitConfig,
    /// Restrict to these value columns (by header name). `None` keeps all.
    pub columns: Option<Vec<String>>,
}

impl CsvSchema {
    pub fn ticks(base_seconds: f64) -> Self {
        Self {
            time_column: TimeColumn::Tick,
            time_unit: TimeUnitConfig::new(base_seconds),
            columns: None,
        }
    }
}

const ISO_FORMATS: &[&str] = &[
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M:%S%.f",
    "%Y-%m-%dT%H:%M:%S%.f",
];

fn parse_iso(s: &str) -> Option<f64> {
    for fmt in ISO_FORMATS {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp_millis() as f64 / 1000.0);
        }
    }
    chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|dt| dt.and_utc().timestamp() as f64)
}

fn is_missing(cell: &str) -> bool {
    matches!(cell, "" | "nan" | "NaN" | "NA" | "null")
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Vec<TimeValueSeries>> {
    let file = fs::File::open(path).map_err(|e| DamError::io(path, e))?;
    read_csv(file, schema)
}

/// Parses CSV text: a header row, a time column, then one series per
/// remaining column. Row numbers in errors are 1-based data rows.
pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Vec<TimeValueSeries>> {
    schema.time_unit.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| DamError::MalformedRow {
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    if headers.len() < 2 {
        return Err(DamError::MalformedRow {
            row: 0,
            message: "need a time column and at least one value column".into(),
        });
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let selected: Vec<usize> = match &schema.columns {
        None => (0..names.len()).collect(),
        Some(wanted) => wanted
            .iter()
            .map(|w| {
                names.iter().position(|n| n == w).ok_or_else(|| {
                    DamError::Config(format!("column `{w}` not found in header"))
                })
            })
            .collect::<Result<_>>()?,
    };

    let unit = schema.time_unit;
    let mut times = Vec::new();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); selected.len()];
    let mut valid: Vec<Vec<bool>> = vec![Vec::new(); selected.len()];
    let mut iso_origin = None;
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| DamError::MalformedRow {
            row,
            message: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(DamError::MalformedRow {
                row,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let cell = &record[0];
        let bad_time = || DamError::MalformedRow {
            row,
            message: format!("unparseable time `{cell}`"),
        };
        let t = match schema.time_column {
            TimeColumn::Tick => {
                let tick: i64 = cell.parse().map_err(|_| bad_time())?;
                unit.ticks_to_days(tick as f64)
            }
            TimeColumn::Seconds => unit.seconds_to_days(cell.parse().map_err(|_| bad_time())?),
            TimeColumn::Iso8601 => {
                let secs = parse_iso(cell).ok_or_else(bad_time)?;
                let origin = *iso_origin.get_or_insert(secs);
                unit.seconds_to_days(secs - origin)
            }
            TimeColumn::Days => cell.parse::<f64>().map_err(|_| bad_time())? * unit.scaling(),
        };
        if !t.is_finite() {
            return Err(bad_time());
        }
        if let Some(&prev) = times.last() {
            if t <= prev {
                return Err(DamError::NonMonotonic { row });
            }
        }
        times.push(t);
        for (k, &c) in selected.iter().enumerate() {
            let cell = &record[c + 1];
            if is_missing(cell) {
                cols[k].push(f64::NAN);
                valid[k].push(false);
            } else {
                let v: f64 = cell.parse().map_err(|_| DamError::MalformedRow {
                    row,
                    message: format!("non-numeric value `{cell}` in column `{}`", names[c]),
                })?;
                cols[k].push(v);
                valid[k].push(v.is_finite());
            }
        }
    }
    let resolution = unit.resolution_days();
    Ok(selected
        .iter()
        .zip(cols.into_iter().zip(valid))
        .map(|(&c, (values, valid))| TimeValueSeries {
            name: names[c].clone(),
            times: times.clone(),
            values,
            valid,
            resolution,
        })
        .collect())
}

/// Serialises channels sharing one time axis. Invalid cells are written empty.
pub fn write_csv<W: Write>(
    writer: W,
    series: &[TimeValueSeries],
    schema: &CsvSchema,
) -> Result<()> {
    let first = series
        .first()
        .ok_or_else(|| DamError::Config("nothing to write".into()))?;
    if series.iter().any(|s| s.times != first.times) {
        return Err(DamError::Config(
            "channels written to one csv must share their time axis".into(),
        ));
    }
    let unit = schema.time_unit;
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![match schema.time_column {
        TimeColumn::Tick => "tick".to_string(),
        TimeColumn::Seconds => "seconds".to_string(),
        TimeColumn::Days => "days".to_string(),
        TimeColumn::Iso8601 => {
            return Err(DamError::Config(
                "writing ISO-8601 timestamps is not supported; use tick or seconds".into(),
            ))
        }
    }];
    header.extend(series.iter().map(|s| s.name.clone()));
    let csv_err = |e: csv::Error| DamError::Config(format!("csv write failed: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..first.len() {
        let t = first.times[i];
        let mut rec = vec![match schema.time_column {
            TimeColumn::Tick => {
                format!("{}", (t * unit.base_frequency / unit.base_seconds).round() as i64)
            }
            TimeColumn::Seconds => format!("{}", t * unit.base_frequency),
            _ => format!("{}", t / unit.scaling()),
        }];
        for s in series {
            rec.push(if s.valid[i] {
                format!("{}", s.values[i])
            } else {
                String::new()
            });
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| DamError::io("<csv writer>", e))?;
    Ok(())
}

/// Copies with missing cells replaced by zero, for tools that cannot take a mask.
pub fn export_zero_filled(series: &TimeValueSeries) -> Vec<f64> {
    series
        .values
        .iter()
        .zip(&series.valid)
        .map(|(&v, &ok)| if ok { v } else { 0.0 })
        .collect()
}

/// Split declaration in a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum SplitSpec {
    /// Train and validation fractions; test gets the rest.
    Fractions([f64; 2]),
    /// End indices of the train and validation splits.
    Boundaries([usize; 2]),
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Fractions([0.7, 0.1])
    }
}

/// Dataset manifest (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    /// CSV path, relative to the manifest file.
    pub path: PathBuf,
    pub resolution_seconds: f64,
    /// Seconds of real time per model day ("time unit scaling").
    #[serde(default = "default_base_frequency")]
    pub time_unit_seconds: f64,
    #[serde(default)]
    pub time_column: TimeColumn,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub columns: Option<Vec<String>>,
}

impl DatasetManifest {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DamError::io(path, e))?;
        let mut m: DatasetManifest = toml::from_str(&text)
            .map_err(|e| DamError::Config(format!("{}: {e}", path.display())))?;
        if m.path.is_relative() {
            if let Some(dir) = path.parent() {
                m.path = dir.join(&m.path);
            }
        }
        Ok(m)
    }

    pub fn schema(&self) -> CsvSchema {
        CsvSchema {
            time_column: self.time_column,
            time_unit: TimeUnitConfig::new(self.resolution_seconds)
                .with_base_frequency(self.time_unit_seconds),
            columns: self.columns.clone(),
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        let series = load_csv(&self.path, &self.schema())?;
        let len = series.first().map_or(0, TimeValueSeries::len);
        let split = match self.split {
            SplitSpec::Fractions([a, b]) => DatasetSplit::from_fractions(len, a, b)?,
            SplitSpec::Boundaries([a, b]) => DatasetSplit::from_boundaries(len, a, b)?,
        };
        Ok(Dataset {
            name: self.name.clone(),
            series,
            split,
        })
    }
}

/// A multivariate dataset: channels sharing a time axis and split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub series: Vec<TimeValueSeries>,
    pub split: DatasetSplit,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.series.first().map_or(0, TimeValueSeries::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The two factors behind a series' sampling utility.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtilityComponents {
    /// Standard deviation of the mean periodic profile (average day or week).
    pub profile_std: f64,
    /// Mean over profile positions of the standard deviation around the profile.
    pub residual_std: f64,
    /// Profile length in samples; 0 when neither day nor week fit.
    pub period: usize,
}

impl UtilityComponents {
    pub fn utility(&self) -> f64 {
        if self.period == 0 {
            self.profile_std
        } else {
            self.profile_std * self.residual_std
        }
    }
}

/// Utility proxy used to weight series during training.
///
/// The profile is an average day when the resolution gives at least two
/// samples per day and the series covers two full days, else an average
/// week under the same conditions, else the overall standard deviation is
/// used. The two components are combined by product.
pub fn compute_utility(series: &TimeValueSeries) -> f64 {
    utility_components(series).utility()
}

pub fn utility_components(series: &TimeValueSeries) -> UtilityComponents {
    let observed: Vec<f64> = series
        .values
        .iter()
        .zip(&series.valid)
        .filter_map(|(&v, &ok)| ok.then_some(v))
        .collect();
    if observed.is_empty() {
        return UtilityComponents {
            profile_std: 0.0,
            residual_std: 0.0,
            period: 0,
        };
    }
    let fits = |days: f64| {
        let p = (days / series.resolution).round();
        (p >= 2.0 && series.len() as f64 >= 2.0 * p).then_some(p as usize)
    };
    let Some(period) = fits(1.0).or_else(|| fits(7.0)) else {
        return UtilityComponents {
            profile_std: stats::std(&observed),
            residual_std: 0.0,
            period: 0,
        };
    };

    let cycles = series.len() / period;
    let mut profile = Vec::with_capacity(period);
    let mut residual = Vec::with_capacity(period);
    for phase in 0..period {
        let column: Vec<f64> = (0..cycles)
            .map(|c| c * period + phase)
            .filter(|&i| series.valid[i])
            .map(|i| series.values[i])
            .collect();
        if column.is_empty() {
            continue;
        }
        profile.push(stats::mean(&column));
        residual.push(stats::std(&column));
    }
    UtilityComponents {
        profile_std: stats::std(&profile),
        residual_std: stats::mean(&residual),
        period,
    }
}

/// How utilities become sampling weights across datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum UtilityNormalization {
    /// Raw utilities compared across the whole corpus.
    #[default]
    Global,
    /// Each dataset receives equal total mass, split by utility within it.
    PerDataset,
}

/// Sampling weights, one vector per dataset, parallel to its channels.
pub fn sampling_weights(utilities: &[Vec<f64>], mode: UtilityNormalization) -> Vec<Vec<f64>> {
    match mode {
        UtilityNormalization::Global => utilities.to_vec(),
        UtilityNormalization::PerDataset => utilities
            .iter()
            .map(|u| {
                let total: f64 = u.iter().sum();
                if total > 0.0 {
                    u.iter().map(|x| x / total).collect()
                } else {
                    vec![0.0; u.len()]
                }
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hourly() -> CsvSchema {
        CsvSchema::ticks(3600.0)
    }

    #[test]
    fn hourly_ticks_convert_to_days() {
        let csv = "tick,a\n0,1.0\n1,2.0\n2,3.0\n";
        let s = read_csv(csv.as_bytes(), &hourly()).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].times, vec![0.0, 1.0 / 24.0, 2.0 / 24.0]);
        assert_eq!(s[0].resolution, 1.0 / 24.0);
    }

    #[test]
    fn empty_cell_is_masked() {
        let csv = "tick,a\n0,1.0\n1,\n2,3.0\n";
        let s = read_csv(csv.as_bytes(), &hourly()).unwrap();
        assert_eq!(s[0].valid, vec![true, false, true]);
        assert!(s[0].values[1].is_nan());
    }

    #[test]
    fn malformed_row_reports_row_number() {
        let csv = "tick,a\n0,1.0\n1,abc\n";
        match read_csv(csv.as_bytes(), &hourly()) {
            Err(DamError::MalformedRow { row, .. }) => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
        let csv = "tick,a\n0,1.0\n1,2.0,3.0\n";
        assert!(matches!(
            read_csv(csv.as_bytes(), &hourly()),
            Err(DamError::MalformedRow { row: 2, .. })
        ));
    }

    #[test]
    fn non_monotonic_is_rejected() {
        let csv = "tick,a\n0,1\n2,1\n1,1\n";
        assert!(matches!(
            read_csv(csv.as_bytes(), &hourly()),
            Err(DamError::NonMonotonic { row: 3 })
        ));
    }

    #[test]
    fn iso_timestamps() {
        let csv = "date,OT\n2016-07-01 00:00:00,1\n2016-07-01 01:00:00,2\n2016-07-02 01:00:00,3\n";
        let schema = CsvSchema {
            time_column: TimeColumn::Iso8601,
            ..hourly()
        };
        let s = read_csv(csv.as_bytes(), &schema).unwrap();
        assert_eq!(s[0].times, vec![0.0, 1.0 / 24.0, 25.0 / 24.0]);
    }

    #[test]
    fn time_unit_scaling_compresses_time() {
        // Daily data viewed with one model day per week.
        let unit = TimeUnitConfig::new(86_400.0).with_base_frequency(7.0 * 86_400.0);
        assert!((unit.resolution_days() - 1.0 / 7.0).abs() < 1e-15);
        assert!((unit.scaling() - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn rebase_examples() {
        let s = TimeValueSeries::regular("x", vec![1.0, 2.0, 3.0], 1.0);
        assert_eq!(rebase_to_now(&s, 2).unwrap().times, vec![-2.0, -1.0, 0.0]);
        assert_eq!(rebase_to_now(&s, 0).unwrap().times, vec![0.0, 1.0, 2.0]);
        assert!(matches!(
            rebase_to_now(&s, 3),
            Err(DamError::IndexOutOfRange { index: 3, len: 3 })
        ));
        let h = TimeValueSeries::regular("h", vec![0.0; 48], 1.0 / 24.0);
        assert!((rebase_to_now(&h, 24).unwrap().times[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn splits_are_ordered_and_contiguous() {
        let s = DatasetSplit::from_fractions(100, 0.7, 0.1).unwrap();
        assert_eq!(s.train, 0..70);
        assert_eq!(s.valid, 70..80);
        assert_eq!(s.test, 80..100);
        assert!(DatasetSplit::from_boundaries(10, 8, 5).is_err());
        assert!(DatasetSplit::from_fractions(10, 0.9, 0.5).is_err());
    }

    #[test]
    fn utility_of_constant_is_zero() {
        let s = TimeValueSeries::regular("c", vec![5.0; 24 * 10], 1.0 / 24.0);
        assert_eq!(compute_utility(&s), 0.0);
    }

    #[test]
    fn utility_of_pure_daily_sinusoid() {
        // Profile std of a sampled unit sinusoid is 1/sqrt(2) for >= 3 samples
        // per period; the residual around the profile is exactly zero.
        let values: Vec<f64> = (0..24 * 20)
            .map(|i| (2.0 * std::f64::consts::PI * i as f64 / 24.0).sin())
            .collect();
        let s = TimeValueSeries::regular("sin", values, 1.0 / 24.0);
        let c = utility_components(&s);
        assert_eq!(c.period, 24);
        assert!((c.profile_std - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(c.residual_std < 1e-12);
        assert!(compute_utility(&s) < 1e-12);
    }

    #[test]
    fn utility_all_invalid_is_zero() {
        let s = TimeValueSeries::regular("n", vec![f64::NAN; 100], 1.0 / 24.0);
        assert_eq!(compute_utility(&s), 0.0);
    }

    #[test]
    fn utility_falls_back_to_week_then_std() {
        let values: Vec<f64> = (0..70).map(|i| (i % 7) as f64).collect();
        let s = TimeValueSeries::regular("d", values, 1.0);
        assert_eq!(utility_components(&s).period, 7);
        let s = TimeValueSeries::regular("w", vec![1.0, 3.0, 1.0, 3.0], 7.0);
        let c = utility_components(&s);
        assert_eq!(c.period, 0);
        assert_eq!(c.utility(), 1.0);
    }

    #[test]
    fn per_dataset_weights_give_equal_mass() {
        let w = sampling_weights(&[vec![1.0, 3.0], vec![10.0]], UtilityNormalization::PerDataset);
        assert_eq!(w, vec![vec![0.25, 0.75], vec![1.0]]);
    }
}
