//! Fixed-shape numeric encoding of labeled cycles.
//!
//! Each of the 24 days becomes a sparse vector of width D (binary indicator
//! per predictive feature plus a presence/value pair per continuous
//! feature). Continuous values are centered on the cycle's own mean over the
//! visible days. The user block carries age, birth control and the user's
//! mean of each continuous feature.

pub mod schema;
pub mod tensor;

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

pub use schema::{FeatureId, FeatureSchema, SexType, HISTORY_DAYS, WINDOW_DAYS};

use crate::cycles::{DaySlot, Label, RawExample};
use crate::error::{Error, Result};
use crate::ingest::{DailyLog, LogValue, UserProfile};

/// Sparse real vector: `(index, value)` pairs with strictly increasing indices, no zeros.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SparseVec(pub Vec<(u32, f64)>);

impl SparseVec {
    pub fn from_dense(dense: &[f64]) -> Self {
        SparseVec(
            dense
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (i as u32, *v))
                .collect(),
        )
    }

    pub fn to_dense(&self, width: usize) -> Vec<f64> {
        let mut out = vec![0.0; width];
        for &(i, v) in &self.0 {
            out[i as usize] = v;
        }
        out
    }

    pub fn get(&self, index: usize) -> f64 {
        match self.0.binary_search_by_key(&(index as u32), |e| e.0) {
            Ok(k) => self.0[k].1,
            Err(_) => 0.0,
        }
    }

    /// Sets one coordinate; a zero removes the entry.
    pub fn set(&mut self, index: usize, value: f64) {
        let key = index as u32;
        match self.0.binary_search_by_key(&key, |e| e.0) {
            Ok(k) if value == 0.0 => {
                self.0.remove(k);
            }
            Ok(k) => self.0[k].1 = value,
            Err(_) if value == 0.0 => {}
            Err(k) => self.0.insert(k, (key, value)),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.0.iter().map(|&(i, v)| (i as usize, v))
    }

    pub fn nnz(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Mean and standard deviation used to standardize a scalar.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub sd: f64,
}

impl Moments {
    pub const IDENTITY: Moments = Moments { mean: 0.0, sd: 1.0 };

    pub fn fit(values: impl IntoIterator<Item = f64>) -> Moments {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Moments::IDENTITY;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        Moments {
            mean,
            sd: if sd > 1e-12 { sd } else { 1.0 },
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.sd
    }
}

/// Standardization statistics for age and the per-user continuous means,
/// fitted on training users only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub age: Moments,
    pub continuous: [Moments; 3],
}

impl Default for Standardizer {
    fn default() -> Self {
        Standardizer {
            age: Moments::IDENTITY,
            continuous: [Moments::IDENTITY; 3],
        }
    }
}

impl Standardizer {
    pub fn fit<'a>(users: impl IntoIterator<Item = (Option<&'a UserProfile>, [Option<f64>; 3])>) -> Self {
        let mut ages = Vec::new();
        let mut means: [Vec<f64>; 3] = Default::default();
        for (profile, m) in users {
            if let Some(a) = profile.and_then(|p| p.age) {
                ages.push(a);
            }
            for k in 0..3 {
                if let Some(v) = m[k] {
                    means[k].push(v);
                }
            }
        }
        Standardizer {
            age: Moments::fit(ages),
            continuous: [
                Moments::fit(means[0].iter().copied()),
                Moments::fit(means[1].iter().copied()),
                Moments::fit(means[2].iter().copied()),
            ],
        }
    }
}

/// One cycle ready for the predictors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedExample {
    pub user_id: String,
    pub start_date: NaiveDate,
    pub label: Label,
    /// 24 rows of width D.
    pub days: Vec<SparseVec>,
    /// `true` marks a masked day; masked rows are empty.
    pub day_mask: [bool; WINDOW_DAYS],
    /// Raw per-cycle means that were subtracted from each continuous feature.
    pub continuous_means: [Option<f64>; 3],
    /// Standardized cycle means fed to the recurrent models at every step (0 if absent).
    pub cycle_inputs: [f64; 3],
    pub user_vector: Vec<f64>,
    /// 180 rows of width D, oldest first; continuous values centered on the user mean.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history: Option<Vec<SparseVec>>,
}

impl EncodedExample {
    pub fn label_f64(&self) -> f64 {
        self.label.as_f64()
    }
}

/// Dense day vector with raw (uncentered) continuous values.
pub fn encode_day(day: &DaySlot, schema: &FeatureSchema) -> Result<Vec<f64>> {
    let mut out = vec![0.0; schema.day_width()];
    for (&f, value) in day {
        if let Some(k) = f.continuous_index() {
            let v = value
                .real()
                .ok_or_else(|| Error::Domain(format!("{f} logged without a value")))?;
            let (present, slot) = schema.continuous_slots(k);
            out[present] = 1.0;
            out[slot] = v;
        } else {
            let slot = schema
                .binary_slot(f)
                .ok_or_else(|| Error::NotBinaryFeature(f.name().to_string()))?;
            out[slot] = 1.0;
        }
    }
    Ok(out)
}

/// Subtracts the cycle mean of each continuous feature over the unmasked days.
///
/// The subtracted means are recorded in `continuous_means`. With no value in
/// the cycle the feature stays absent.
pub fn center_continuous(ex: &mut EncodedExample, schema: &FeatureSchema) {
    for k in 0..3 {
        let (present, slot) = schema.continuous_slots(k);
        let values: Vec<f64> = ex
            .days
            .iter()
            .zip(ex.day_mask.iter())
            .filter(|(row, masked)| !**masked && row.get(present) != 0.0)
            .map(|(row, _)| row.get(slot))
            .collect();
        if values.is_empty() {
            ex.continuous_means[k] = None;
            for row in &mut ex.days {
                row.set(present, 0.0);
                row.set(slot, 0.0);
            }
            continue;
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        ex.continuous_means[k] = Some(mean);
        for row in ex.days.iter_mut() {
            if row.get(present) != 0.0 {
                let centered = row.get(slot) - mean;
                row.set(slot, centered);
            }
        }
    }
}

/// User block: `(age missing, standardized age)`, birth-control one-hot, standardized user means.
pub fn encode_user(
    profile: Option<&UserProfile>,
    user_means: [Option<f64>; 3],
    stats: &Standardizer,
    schema: &FeatureSchema,
) -> Vec<f64> {
    let mut out = vec![0.0; schema.user_width()];
    match profile.and_then(|p| p.age) {
        Some(a) => out[FeatureSchema::USER_AGE_VALUE] = stats.age.apply(a),
        None => out[FeatureSchema::USER_AGE_MISSING] = 1.0,
    }
    if let Some(i) = profile
        .and_then(|p| p.birth_control.as_deref())
        .and_then(|m| schema.birth_control_index(m))
    {
        out[schema.user_birth_control_slot(i)] = 1.0;
    }
    for k in 0..3 {
        if let Some(m) = user_means[k] {
            out[schema.user_mean_slot(k)] = stats.continuous[k].apply(m);
        }
    }
    out
}

/// Mean of each continuous feature over all of a user's logs.
pub fn user_continuous_means(user_logs: &[DailyLog]) -> [Option<f64>; 3] {
    let mut sum = [0.0; 3];
    let mut n = [0usize; 3];
    for l in user_logs {
        if let (Some(k), LogValue::Real(v)) = (l.feature.continuous_index(), l.value) {
            sum[k] += v;
            n[k] += 1;
        }
    }
    std::array::from_fn(|k| (n[k] > 0).then(|| sum[k] / n[k] as f64))
}

fn encode_history(
    history: &[DaySlot],
    user_means: [Option<f64>; 3],
    schema: &FeatureSchema,
) -> Result<Vec<SparseVec>> {
    history
        .iter()
        .map(|slot| {
            let mut row = encode_day(slot, schema)?;
            for k in 0..3 {
                let (present, value) = schema.continuous_slots(k);
                if row[present] != 0.0 {
                    row[value] -= user_means[k].unwrap_or(0.0);
                }
            }
            Ok(SparseVec::from_dense(&row))
        })
        .collect()
}

/// Encodes a raw example: day rows, centering, cycle inputs, user block and optional history.
pub fn encode_example(
    raw: &RawExample,
    profile: Option<&UserProfile>,
    user_means: [Option<f64>; 3],
    stats: &Standardizer,
    schema: &FeatureSchema,
) -> Result<EncodedExample> {
    if raw.days.len() != WINDOW_DAYS {
        return Err(Error::Shape {
            expected: WINDOW_DAYS,
            actual: raw.days.len(),
            context: "raw example days",
        });
    }
    let days = raw
        .days
        .iter()
        .zip(raw.mask.iter())
        .map(|(slot, &masked)| {
            if masked {
                Ok(SparseVec::default())
            } else {
                encode_day(slot, schema).map(|d| SparseVec::from_dense(&d))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ex = EncodedExample {
        user_id: raw.user_id.clone(),
        start_date: raw.start_date,
        label: raw.label,
        days,
        day_mask: raw.mask,
        continuous_means: [None; 3],
        cycle_inputs: [0.0; 3],
        user_vector: encode_user(profile, user_means, stats, schema),
        history: None,
    };
    center_continuous(&mut ex, schema);
    for k in 0..3 {
        if let Some(m) = ex.continuous_means[k] {
            ex.cycle_inputs[k] = stats.continuous[k].apply(m);
        }
    }
    if let Some(h) = &raw.history {
        ex.history = Some(encode_history(h, user_means, schema)?);
    }
    Ok(ex)
}

/// 24 day rows followed by the user block; width `24·D + U`.
pub fn flatten_for_linear(ex: &EncodedExample, schema: &FeatureSchema) -> Vec<f64> {
    flatten_sparse(ex, schema).to_dense(schema.flat_width())
}

/// Sparse form of [`flatten_for_linear`].
pub fn flatten_sparse(ex: &EncodedExample, schema: &FeatureSchema) -> SparseVec {
    let d = schema.day_width();
    let mut out = Vec::new();
    for (day, row) in ex.days.iter().enumerate() {
        out.extend(row.iter().map(|(i, v)| ((day * d + i) as u32, v)));
    }
    let base = WINDOW_DAYS * d;
    out.extend(
        ex.user_vector
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| ((base + i) as u32, *v)),
    );
    SparseVec(out)
}

/// Logged features and uncentered continuous values recovered from an encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedDay {
    pub binary: BTreeSet<FeatureId>,
    pub continuous: [Option<f64>; 3],
}

pub fn decode_day(row: &SparseVec, means: [Option<f64>; 3], schema: &FeatureSchema) -> DecodedDay {
    let binary = schema
        .binary_features()
        .iter()
        .enumerate()
        .filter(|(slot, _)| row.get(*slot) != 0.0)
        .map(|(_, f)| *f)
        .collect();
    let continuous = std::array::from_fn(|k| {
        let (present, slot) = schema.continuous_slots(k);
        (row.get(present) != 0.0).then(|| row.get(slot) + means[k].unwrap_or(0.0))
    });
    DecodedDay { binary, continuous }
}

pub fn write_encoded<W: Write>(mut w: W, examples: &[EncodedExample]) -> Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n").map_err(|e| Error::io("<encoded dataset>", e))?;
    }
    Ok(())
}

pub fn read_encoded<R: BufRead>(r: R) -> Result<Vec<EncodedExample>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
