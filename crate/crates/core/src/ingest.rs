//! Raw log and profile ingestion with quality-control filters.
//!
//! The filters run in a fixed order: continuous-range QC, exact-duplicate
//! removal, the activity threshold, then truncation after a user's first
//! positive pregnancy test. Every dropped row is attributed to exactly one
//! rule in the [`QcReport`].

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use flate2::read::MultiGzDecoder;
use serde::{Deserialize, Serialize};

use crate::codec::schema::{normalize_method, FeatureId, FeatureSchema};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LogValue {
    /// A binary feature was logged.
    Unit,
    /// A continuous measurement (°F, bpm or kg).
    Real(f64),
}

impl Serialize for LogValue {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.real().serialize(s)
    }
}

impl<'de> Deserialize<'de> for LogValue {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(match Option::<f64>::deserialize(d)? {
            Some(v) => LogValue::Real(v),
            None => LogValue::Unit,
        })
    }
}

impl LogValue {
    pub fn real(self) -> Option<f64> {
        match self {
            LogValue::Unit => None,
            LogValue::Real(v) => Some(v),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DailyLog {
    pub user_id: String,
    pub date: NaiveDate,
    pub feature: FeatureId,
    pub value: LogValue,
}

impl DailyLog {
    /// Builds a log, checking that a real value is attached iff the feature is continuous.
    pub fn new(
        user_id: impl Into<String>,
        date: NaiveDate,
        feature: FeatureId,
        value: LogValue,
    ) -> Result<Self> {
        match (feature.is_continuous(), value) {
            (true, LogValue::Real(v)) if v.is_finite() => {}
            (false, LogValue::Unit) => {}
            _ => {
                return Err(Error::Domain(format!(
                    "{feature}: value {value:?} does not match the feature kind"
                )))
            }
        }
        Ok(DailyLog {
            user_id: user_id.into(),
            date,
            feature,
            value,
        })
    }

    pub fn binary(user_id: &str, date: NaiveDate, feature: FeatureId) -> Self {
        Self::new(user_id, date, feature, LogValue::Unit).expect("binary feature")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    pub age: Option<f64>,
    pub birth_control: Option<String>,
}

pub const MIN_AGE: f64 = 10.0;
pub const MAX_AGE: f64 = 70.0;

/// Inclusive `[low, high]` acceptance range for a continuous feature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub low: f64,
    pub high: f64,
}

impl Range {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.low && v <= self.high
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QcConfig {
    /// Basal body temperature, °F.
    pub bbt: Range,
    /// Resting heart rate, bpm.
    pub resting_heart_rate: Range,
    /// Body weight, kg.
    pub weight: Range,
    pub min_logs_per_user: usize,
    /// Count the activity threshold on parsed rows instead of QC'd rows.
    pub count_before_qc: bool,
    /// Abort on the first malformed or unknown line instead of skipping it.
    pub strict: bool,
}

impl Default for QcConfig {
    fn default() -> Self {
        QcConfig {
            bbt: Range { low: 90.0, high: 110.0 },
            resting_heart_rate: Range { low: 30.0, high: 150.0 },
            weight: Range { low: 30.0, high: 300.0 },
            min_logs_per_user: 300,
            count_before_qc: false,
            strict: false,
        }
    }
}

impl QcConfig {
    fn range_for(&self, f: FeatureId) -> Option<Range> {
        match f.continuous_index()? {
            0 => Some(self.bbt),
            1 => Some(self.resting_heart_rate),
            _ => Some(self.weight),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounts {
    pub malformed: usize,
    pub unknown_feature: usize,
    pub value_mismatch: usize,
    pub bbt_out_of_range: usize,
    pub resting_heart_rate_out_of_range: usize,
    pub weight_out_of_range: usize,
    pub exact_duplicate: usize,
    pub inactive_user: usize,
    pub after_positive_test: usize,
}

impl DropCounts {
    pub fn total(&self) -> usize {
        self.malformed
            + self.unknown_feature
            + self.value_mismatch
            + self.bbt_out_of_range
            + self.resting_heart_rate_out_of_range
            + self.weight_out_of_range
            + self.exact_duplicate
            + self.inactive_user
            + self.after_positive_test
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileCounts {
    pub rows_read: usize,
    pub malformed: usize,
    pub age_out_of_range: usize,
    pub unknown_birth_control: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QcReport {
    pub rows_read: usize,
    pub rows_retained: usize,
    pub dropped: DropCounts,
    pub users_read: usize,
    pub users_retained: usize,
    pub profiles: ProfileCounts,
    pub thresholds: QcConfig,
}

impl QcReport {
    pub fn new(thresholds: QcConfig) -> Self {
        QcReport {
            rows_read: 0,
            rows_retained: 0,
            dropped: DropCounts::default(),
            users_read: 0,
            users_retained: 0,
            profiles: ProfileCounts::default(),
            thresholds,
        }
    }

    /// `rows_read == rows_retained + Σ dropped`.
    pub fn is_conserved(&self) -> bool {
        self.rows_read == self.rows_retained + self.dropped.total()
    }

    /// Folds the counts of a disjoint shard into this report.
    pub fn merge(&mut self, other: &QcReport) {
        self.rows_read += other.rows_read;
        self.rows_retained += other.rows_retained;
        self.users_read += other.users_read;
        self.users_retained += other.users_retained;
        let d = &mut self.dropped;
        let o = &other.dropped;
        d.malformed += o.malformed;
        d.unknown_feature += o.unknown_feature;
        d.value_mismatch += o.value_mismatch;
        d.bbt_out_of_range += o.bbt_out_of_range;
        d.resting_heart_rate_out_of_range += o.resting_heart_rate_out_of_range;
        d.weight_out_of_range += o.weight_out_of_range;
        d.exact_duplicate += o.exact_duplicate;
        d.inactive_user += o.inactive_user;
        d.after_positive_test += o.after_positive_test;
        self.profiles.rows_read += other.profiles.rows_read;
        self.profiles.malformed += other.profiles.malformed;
        self.profiles.age_out_of_range += other.profiles.age_out_of_range;
        self.profiles.unknown_birth_control += other.profiles.unknown_birth_control;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogFormat {
    Csv,
    Jsonl,
}

impl LogFormat {
    /// Guesses the format from the file name, ignoring a trailing `.gz`.
    pub fn from_path(path: &Path) -> LogFormat {
        let name = path.to_string_lossy();
        let name = name.strip_suffix(".gz").unwrap_or(&name);
        if name.ends_with(".jsonl") || name.ends_with(".ndjson") || name.ends_with(".json") {
            LogFormat::Jsonl
        } else {
            LogFormat::Csv
        }
    }
}

/// Opens a possibly gzip-compressed text file. Compression is detected from the magic bytes.
pub fn open_text(path: &Path) -> Result<Box<dyn BufRead>> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 2];
    let n = file.read(&mut magic).map_err(|e| Error::io(path, e))?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    if n == 2 && magic == [0x1f, 0x8b] {
        Ok(Box::new(BufReader::new(MultiGzDecoder::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

enum LineError {
    Malformed(String),
    Unknown(String),
    Mismatch(String),
}

fn parse_date(s: &str) -> std::result::Result<NaiveDate, LineError> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d")
        .map_err(|e| LineError::Malformed(format!("bad date `{s}`: {e}")))
}

fn build_log(
    user: &str,
    date: &str,
    feature: &str,
    value: Option<f64>,
) -> std::result::Result<DailyLog, LineError> {
    let user = user.trim();
    if user.is_empty() {
        return Err(LineError::Malformed("empty user_id".into()));
    }
    let date = parse_date(date)?;
    let feature = FeatureId::from_name(feature.trim())
        .ok_or_else(|| LineError::Unknown(format!("unknown feature `{}`", feature.trim())))?;
    let value = match value {
        Some(v) => LogValue::Real(v),
        None => LogValue::Unit,
    };
    DailyLog::new(user, date, feature, value).map_err(|e| LineError::Mismatch(e.to_string()))
}

fn parse_csv_line(line: &str) -> std::result::Result<DailyLog, LineError> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 4 {
        return Err(LineError::Malformed(format!(
            "expected 4 comma-separated fields, found {}",
            fields.len()
        )));
    }
    let value = match fields[3].trim() {
        "" => None,
        v => Some(
            v.parse::<f64>()
                .map_err(|_| LineError::Malformed(format!("bad value `{v}`")))?,
        ),
    };
    build_log(fields[0], fields[1], fields[2], value)
}

#[derive(Deserialize)]
struct JsonLog {
    user_id: String,
    date: String,
    feature: String,
    #[serde(default)]
    value: Option<f64>,
}

#[derive(Serialize)]
struct JsonLogOut<'a> {
    user_id: &'a str,
    date: String,
    feature: &'static str,
    value: Option<f64>,
}

fn parse_json_line(line: &str) -> std::result::Result<DailyLog, LineError> {
    let raw: JsonLog =
        serde_json::from_str(line).map_err(|e| LineError::Malformed(e.to_string()))?;
    build_log(&raw.user_id, &raw.date, &raw.feature, raw.value)
}

/// Parses CSV `user_id,date,feature,value` or JSONL with the same keys.
///
/// A leading CSV header row is skipped. Bad lines are counted and skipped, or
/// abort with their 1-based line number in strict mode.
pub fn parse_logs<R: BufRead>(
    reader: R,
    format: LogFormat,
    strict: bool,
    report: &mut QcReport,
) -> Result<Vec<DailyLog>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() {
            continue;
        }
        if format == LogFormat::Csv && lineno == 1 && trimmed.starts_with("user_id,") {
            continue;
        }
        report.rows_read += 1;
        let parsed = match format {
            LogFormat::Csv => parse_csv_line(trimmed),
            LogFormat::Jsonl => parse_json_line(trimmed),
        };
        match parsed {
            Ok(log) => out.push(log),
            Err(err) => {
                let msg = match err {
                    LineError::Malformed(m) => {
                        report.dropped.malformed += 1;
                        m
                    }
                    LineError::Unknown(m) => {
                        report.dropped.unknown_feature += 1;
                        m
                    }
                    LineError::Mismatch(m) => {
                        report.dropped.value_mismatch += 1;
                        m
                    }
                };
                if strict {
                    return Err(Error::Parse {
                        line: lineno,
                        message: msg,
                    });
                }
            }
        }
    }
    report.rows_retained += out.len();
    Ok(out)
}

/// Drops continuous values outside the configured ranges; binary logs pass through.
pub fn qc_continuous(logs: Vec<DailyLog>, cfg: &QcConfig, report: &mut QcReport) -> Vec<DailyLog> {
    let before = logs.len();
    let out: Vec<DailyLog> = logs
        .into_iter()
        .filter(|log| {
            let (Some(range), LogValue::Real(v)) = (cfg.range_for(log.feature), log.value) else {
                return true;
            };
            if range.contains(v) {
                return true;
            }
            match log.feature.continuous_index() {
                Some(0) => report.dropped.bbt_out_of_range += 1,
                Some(1) => report.dropped.resting_heart_rate_out_of_range += 1,
                _ => report.dropped.weight_out_of_range += 1,
            }
            false
        })
        .collect();
    report.rows_retained -= before - out.len();
    out
}

/// Removes rows identical in every field to an earlier row; order preserved.
pub fn dedup_exact(logs: Vec<DailyLog>, report: &mut QcReport) -> Vec<DailyLog> {
    let before = logs.len();
    let mut seen = HashSet::with_capacity(logs.len());
    let out: Vec<DailyLog> = logs
        .into_iter()
        .filter(|l| {
            let bits = l.value.real().map(f64::to_bits);
            seen.insert((l.user_id.clone(), l.date, l.feature, bits))
        })
        .collect();
    report.dropped.exact_duplicate += before - out.len();
    report.rows_retained -= before - out.len();
    out
}

/// Number of logs per user.
pub fn log_counts(logs: &[DailyLog]) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for l in logs {
        *counts.entry(l.user_id.clone()).or_insert(0) += 1;
    }
    counts
}

/// Keeps users with at least `min_logs` logs in `logs`.
pub fn filter_active_users(
    logs: Vec<DailyLog>,
    min_logs: usize,
    report: &mut QcReport,
) -> Vec<DailyLog> {
    let counts = log_counts(&logs);
    filter_active_users_by(logs, &counts, min_logs, report)
}

/// Keeps users whose entry in `counts` reaches `min_logs`. Used when the
/// threshold is counted on a different stage than the one being filtered.
pub fn filter_active_users_by(
    logs: Vec<DailyLog>,
    counts: &HashMap<String, usize>,
    min_logs: usize,
    report: &mut QcReport,
) -> Vec<DailyLog> {
    let before = logs.len();
    let out: Vec<DailyLog> = logs
        .into_iter()
        .filter(|l| counts.get(&l.user_id).copied().unwrap_or(0) >= min_logs)
        .collect();
    report.dropped.inactive_user += before - out.len();
    report.rows_retained -= before - out.len();
    out
}

/// Removes each user's logs dated strictly after their first positive pregnancy test.
pub fn truncate_after_positive(logs: Vec<DailyLog>, report: &mut QcReport) -> Vec<DailyLog> {
    let positive = FeatureId::pregnancy_positive();
    let mut first: HashMap<&str, NaiveDate> = HashMap::new();
    for l in logs.iter().filter(|l| l.feature == positive) {
        first
            .entry(l.user_id.as_str())
            .and_modify(|d| *d = (*d).min(l.date))
            .or_insert(l.date);
    }
    let keep: Vec<bool> = logs
        .iter()
        .map(|l| first.get(l.user_id.as_str()).is_none_or(|d| l.date <= *d))
        .collect();
    let before = logs.len();
    let out: Vec<DailyLog> = logs
        .into_iter()
        .zip(keep)
        .filter_map(|(l, k)| k.then_some(l))
        .collect();
    report.dropped.after_positive_test += before - out.len();
    report.rows_retained -= before - out.len();
    out
}

/// Runs every filter in order on parsed logs.
pub fn apply_filters(logs: Vec<DailyLog>, cfg: &QcConfig, report: &mut QcReport) -> Vec<DailyLog> {
    let users_before: HashSet<&str> = logs.iter().map(|l| l.user_id.as_str()).collect();
    report.users_read += users_before.len();
    drop(users_before);

    let raw_counts = cfg.count_before_qc.then(|| log_counts(&logs));
    let logs = qc_continuous(logs, cfg, report);
    let logs = dedup_exact(logs, report);
    let logs = match raw_counts {
        Some(counts) => filter_active_users_by(logs, &counts, cfg.min_logs_per_user, report),
        None => filter_active_users(logs, cfg.min_logs_per_user, report),
    };
    let logs = truncate_after_positive(logs, report);
    report.users_retained += logs
        .iter()
        .map(|l| l.user_id.as_str())
        .collect::<HashSet<_>>()
        .len();
    logs
}

/// Parses the profile CSV `user_id,age,birth_control`; empty fields are missing.
///
/// Ages outside `[10, 70]` and birth-control methods unknown to `schema` are
/// kept as missing values.
pub fn parse_profiles<R: BufRead>(
    reader: R,
    schema: &FeatureSchema,
    strict: bool,
    report: &mut QcReport,
) -> Result<Vec<UserProfile>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || (lineno == 1 && line.starts_with("user_id,")) {
            continue;
        }
        report.profiles.rows_read += 1;
        let fields: Vec<&str> = line.split(',').collect();
        let bad = |report: &mut QcReport, msg: String| -> Result<()> {
            report.profiles.malformed += 1;
            if strict {
                Err(Error::Parse {
                    line: lineno,
                    message: msg,
                })
            } else {
                Ok(())
            }
        };
        if fields.len() != 3 || fields[0].trim().is_empty() {
            bad(report, format!("expected 3 fields, found {}", fields.len()))?;
            continue;
        }
        let age = match fields[1].trim() {
            "" => None,
            a => match a.parse::<f64>() {
                Ok(v) if (MIN_AGE..=MAX_AGE).contains(&v) => Some(v),
                Ok(_) => {
                    report.profiles.age_out_of_range += 1;
                    None
                }
                Err(_) => {
                    bad(report, format!("bad age `{a}`"))?;
                    continue;
                }
            },
        };
        let birth_control = match fields[2].trim() {
            "" => None,
            m => match schema.birth_control_index(m) {
                Some(_) => Some(normalize_method(m)),
                None => {
                    report.profiles.unknown_birth_control += 1;
                    None
                }
            },
        };
        out.push(UserProfile {
            user_id: fields[0].trim().to_string(),
            age,
            birth_control,
        });
    }
    Ok(out)
}

pub fn write_logs<W: Write>(mut w: W, logs: &[DailyLog], format: LogFormat) -> std::io::Result<()> {
    if format == LogFormat::Csv {
        writeln!(w, "user_id,date,feature,value")?;
    }
    for l in logs {
        match format {
            LogFormat::Csv => match l.value {
                LogValue::Unit => writeln!(w, "{},{},{},", l.user_id, l.date, l.feature)?,
                LogValue::Real(v) => writeln!(w, "{},{},{},{}", l.user_id, l.date, l.feature, v)?,
            },
            LogFormat::Jsonl => {
                let row = JsonLogOut {
                    user_id: &l.user_id,
                    date: l.date.to_string(),
                    feature: l.feature.name(),
                    value: l.value.real(),
                };
                serde_json::to_writer(&mut w, &row)?;
                writeln!(w)?;
            }
        }
    }
    Ok(())
}

pub fn write_profiles<W: Write>(mut w: W, profiles: &[UserProfile]) -> std::io::Result<()> {
    writeln!(w, "user_id,age,birth_control")?;
    for p in profiles {
        let age = p.age.map(|a| a.to_string()).unwrap_or_default();
        let bc = p.birth_control.as_deref().unwrap_or("");
        writeln!(w, "{},{},{}", p.user_id, age, bc)?;
    }
    Ok(())
}
