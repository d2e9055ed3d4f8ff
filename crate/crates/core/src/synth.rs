//! Synthetic cohorts with planted ground truth.
//!
//! Each user tracks for a fixed span starting on a period. Cycle by cycle
//! the generator draws a length, sex acts and everyday logs, then draws the
//! outcome from the planted law: on day `d` of a cycle an act of type `t`
//! (or no act, type `none`) conceives with probability
//! `min(1, r*_t · f*_d · m_u)`. After conception no further period is
//! logged; a positive test follows near the expected period and the user
//! keeps logging everyday features until the span ends.
//!
//! Every user draws from its own stream derived from `(seed, user index)`,
//! so cohorts are identical under any parallelism.

use chrono::{Days, NaiveDate};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::codec::{FeatureId, SexType};
use crate::error::{Error, Result};
use crate::ingest::{write_logs, write_profiles, DailyLog, LogFormat, LogValue, UserProfile};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Process {
    /// Day-specific conception law.
    Bms,
    /// Per-cycle Bernoulli(μ_u), unrelated to anything logged.
    Ttp,
    /// Only the most fertile day counts.
    Ettp,
}

impl std::str::FromStr for Process {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bms" => Ok(Process::Bms),
            "ttp" => Ok(Process::Ttp),
            "ettp" => Ok(Process::Ettp),
            _ => Err(Error::Config(format!("unknown process `{s}` (expected bms, ttp or ettp)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CycleLengthDist {
    pub mean: f64,
    pub sd: f64,
    pub min: u32,
    pub max: u32,
}

impl Default for CycleLengthDist {
    fn default() -> Self {
        CycleLengthDist { mean: 28.5, sd: 3.0, min: 21, max: 45 }
    }
}

/// Planted day-specific fecundability `f*_d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Fecundability {
    pub peak_day: u32,
    pub peak: f64,
    pub width_days: f64,
    /// Explicit curve by cycle day; overrides the bump when present.
    pub curve: Option<Vec<f64>>,
}

impl Default for Fecundability {
    fn default() -> Self {
        Fecundability { peak_day: 12, peak: 0.30, width_days: 2.5, curve: None }
    }
}

impl Fecundability {
    /// Values for days `0..days`.
    pub fn curve(&self, days: usize) -> Vec<f64> {
        if let Some(c) = &self.curve {
            return (0..days).map(|d| c.get(d).copied().unwrap_or(0.0)).collect();
        }
        (0..days)
            .map(|d| {
                let z = (d as f64 - self.peak_day as f64) / self.width_days;
                self.peak * (-0.5 * z * z).exp()
            })
            .collect()
    }

    pub fn argmax(&self, days: usize) -> usize {
        let c = self.curve(days);
        (0..days).fold(0, |best, d| if c[d] > c[best] { d } else { best })
    }
}

/// Planted per-type risks in [`SexType::ALL`] order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedRisks {
    pub protected: f64,
    pub unprotected: f64,
    pub withdrawal: f64,
    pub none: f64,
}

impl Default for PlantedRisks {
    fn default() -> Self {
        PlantedRisks { protected: 0.02, unprotected: 1.0, withdrawal: 0.25, none: 0.03 }
    }
}

impl PlantedRisks {
    pub fn as_array(&self) -> [f64; 4] {
        [self.protected, self.unprotected, self.withdrawal, self.none]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FertilityDist {
    /// Log-scale spread of the mean-one lognormal user factor.
    pub log_sd: f64,
    /// Relative decline per year of age above `decline_from_age`.
    pub decline_per_year: f64,
    pub decline_from_age: f64,
    /// Overrides the multiplier for every user.
    pub fixed: Option<f64>,
    /// Beta parameters of the per-user cycle success probability (TTP process).
    pub ttp_alpha: f64,
    pub ttp_beta: f64,
    /// Overrides the TTP success probability for every user.
    pub ttp_fixed: Option<f64>,
}

impl Default for FertilityDist {
    fn default() -> Self {
        FertilityDist {
            log_sd: 0.3,
            decline_per_year: 0.03,
            decline_from_age: 30.0,
            fixed: None,
            ttp_alpha: 2.0,
            ttp_beta: 12.0,
            ttp_fixed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodShare {
    pub method: String,
    pub share: f64,
    /// Multiplier on fertility while using the method.
    pub fertility_factor: f64,
}

fn default_mix() -> Vec<MethodShare> {
    [
        ("none", 0.36, 1.0),
        ("condoms", 0.24, 1.0),
        ("combined_pill", 0.16, 0.03),
        ("progestin_only_pill", 0.04, 0.03),
        ("withdrawal", 0.06, 1.0),
        ("fertility_awareness", 0.04, 1.0),
        ("hormonal_iud", 0.04, 0.03),
        ("copper_iud", 0.03, 0.03),
        ("ring", 0.02, 0.03),
        ("partner_vasectomy", 0.01, 0.0),
    ]
    .into_iter()
    .map(|(m, s, f)| MethodShare { method: m.to_string(), share: s, fertility_factor: f })
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Behavior {
    /// Probability of trying to conceive, for users on no method / on a method.
    pub trying_without_method: f64,
    pub trying_with_method: f64,
    /// Daily sex probability range for trying and other users.
    pub sex_rate_trying: (f64, f64),
    pub sex_rate_other: (f64, f64),
    /// Forces logged unprotected sex on this cycle day in every cycle.
    pub forced_unprotected_day: Option<u32>,
}

impl Default for Behavior {
    fn default() -> Self {
        Behavior {
            trying_without_method: 0.6,
            trying_with_method: 0.08,
            sex_rate_trying: (0.15, 0.4),
            sex_rate_other: (0.08, 0.3),
            forced_unprotected_day: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Propensities {
    pub sex: f64,
    pub positive_test: f64,
    pub negative_test_trying: f64,
    pub negative_test_other: f64,
    pub age: f64,
    pub birth_control: f64,
    /// Fraction of users tracking BBT, weight, resting heart rate.
    pub bbt_users: f64,
    pub weight_users: f64,
    pub heart_rate_users: f64,
    /// Daily probability of a sleep log; keeps every user above activity thresholds.
    pub sleep: f64,
}

impl Default for Propensities {
    fn default() -> Self {
        Propensities {
            sex: 0.9,
            positive_test: 0.9,
            negative_test_trying: 0.6,
            negative_test_other: 0.6,
            age: 0.85,
            birth_control: 0.9,
            bbt_users: 0.2,
            weight_users: 0.3,
            heart_rate_users: 0.15,
            sleep: 0.8,
        }
    }
}

impl Propensities {
    /// Every logging propensity set to 1.
    pub fn all_logged() -> Self {
        Propensities {
            sex: 1.0,
            positive_test: 1.0,
            negative_test_trying: 1.0,
            negative_test_other: 1.0,
            age: 1.0,
            birth_control: 1.0,
            bbt_users: 1.0,
            weight_users: 1.0,
            heart_rate_users: 1.0,
            sleep: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub n_users: usize,
    pub seed: u64,
    pub first_date: NaiveDate,
    pub start_jitter_days: u32,
    /// Tracking span per user in days (inclusive range).
    pub tracking_days: (u32, u32),
    pub cycle_length: CycleLengthDist,
    pub period_days: (u32, u32),
    pub fecundability: Fecundability,
    pub risks: PlantedRisks,
    pub fertility: FertilityDist,
    pub birth_control_mix: Vec<MethodShare>,
    pub behavior: Behavior,
    pub logging: Propensities,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            n_users: 1000,
            seed: 0,
            first_date: NaiveDate::from_ymd_opt(2019, 1, 1).expect("valid date"),
            start_jitter_days: 365,
            tracking_days: (200, 330),
            cycle_length: CycleLengthDist::default(),
            period_days: (4, 6),
            fecundability: Fecundability::default(),
            risks: PlantedRisks::default(),
            fertility: FertilityDist::default(),
            birth_control_mix: default_mix(),
            behavior: Behavior::default(),
            logging: Propensities::default(),
        }
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("{name} = {p} is not a probability")));
    }
    Ok(())
}

impl WorldSpec {
    pub fn with_users(n_users: usize, seed: u64) -> Self {
        WorldSpec { n_users, seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.cycle_length;
        if !(c.min as f64 <= c.mean && c.mean <= c.max as f64 && c.sd >= 0.0 && c.min > 0) {
            return Err(Error::Config("cycle length needs 0 < min <= mean <= max and sd >= 0".into()));
        }
        if self.tracking_days.0 == 0 || self.tracking_days.0 > self.tracking_days.1 {
            return Err(Error::Config("tracking span range is empty".into()));
        }
        if self.period_days.0 == 0 || self.period_days.0 > self.period_days.1 || self.period_days.1 >= c.min {
            return Err(Error::Config("period length must be positive and shorter than any cycle".into()));
        }
        let curve = self.fecundability.curve(c.max as usize);
        for (d, f) in curve.iter().enumerate() {
            check_prob(&format!("f*[{d}]"), *f)?;
        }
        if curve.iter().all(|f| *f == 0.0) {
            return Err(Error::Config("fecundability curve is zero everywhere".into()));
        }
        let peak = self.fecundability.argmax(c.max as usize) as f64;
        let before_end = c.mean - peak;
        if !(11.0..=17.0).contains(&before_end) {
            return Err(Error::Config(format!(
                "fecundability peak on day {peak} is {before_end:.1} days before the mean cycle end (expected 14 ± 3)"
            )));
        }
        for (name, r) in ["protected", "unprotected", "withdrawal", "none"].iter().zip(self.risks.as_array()) {
            check_prob(&format!("risk {name}"), r)?;
        }
        let f = &self.fertility;
        if f.log_sd < 0.0 || f.decline_per_year < 0.0 || f.fixed.is_some_and(|m| m < 0.0) {
            return Err(Error::Config("fertility parameters must be non-negative".into()));
        }
        if let Some(mu) = f.ttp_fixed {
            check_prob("ttp_fixed", mu)?;
        }
        if !(f.ttp_alpha > 0.0 && f.ttp_beta > 0.0) {
            return Err(Error::Config("TTP beta parameters must be positive".into()));
        }
        if self.birth_control_mix.is_empty() || self.birth_control_mix.iter().any(|m| m.share < 0.0 || m.fertility_factor < 0.0) {
            return Err(Error::Config("birth-control mix needs non-negative shares and factors".into()));
        }
        if self.birth_control_mix.iter().map(|m| m.share).sum::<f64>() <= 0.0 {
            return Err(Error::Config("birth-control shares sum to zero".into()));
        }
        let b = &self.behavior;
        check_prob("trying_without_method", b.trying_without_method)?;
        check_prob("trying_with_method", b.trying_with_method)?;
        for (lo, hi) in [b.sex_rate_trying, b.sex_rate_other] {
            check_prob("sex rate", lo)?;
            check_prob("sex rate", hi)?;
            if lo > hi {
                return Err(Error::Config("sex rate range is empty".into()));
            }
        }
        if let Some(d) = b.forced_unprotected_day {
            if d >= c.min {
                return Err(Error::Config("forced sex day must fall inside every cycle".into()));
            }
        }
        let l = &self.logging;
        for (name, p) in [
            ("sex", l.sex),
            ("positive_test", l.positive_test),
            ("negative_test_trying", l.negative_test_trying),
            ("negative_test_other", l.negative_test_other),
            ("age", l.age),
            ("birth_control", l.birth_control),
            ("bbt_users", l.bbt_users),
            ("weight_users", l.weight_users),
            ("heart_rate_users", l.heart_rate_users),
            ("sleep", l.sleep),
        ] {
            check_prob(name, p)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserTruth {
    pub user_id: String,
    pub age: f64,
    pub birth_control: String,
    pub trying: bool,
    pub multiplier: f64,
    /// Per-cycle success probability under the TTP process.
    pub ttp_mu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleTruth {
    pub user_id: String,
    pub start_date: NaiveDate,
    pub length: u32,
    pub pregnant: bool,
    /// Cycle day carrying unprotected sex on the most fertile day.
    pub peak_day_unprotected: bool,
}

/// Everything the generator knows and the dataset files must not contain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub process: Process,
    pub seed: u64,
    pub f_star: Vec<f64>,
    pub risks: PlantedRisks,
    pub users: Vec<UserTruth>,
    pub cycles: Vec<CycleTruth>,
}

#[derive(Clone, Debug)]
pub struct SynthUser {
    pub profile: UserProfile,
    pub logs: Vec<DailyLog>,
    pub truth: UserTruth,
    pub cycles: Vec<CycleTruth>,
}

#[derive(Clone, Debug)]
pub struct Cohort {
    pub profiles: Vec<UserProfile>,
    pub logs: Vec<DailyLog>,
    pub truth: PlantedTruth,
}

pub fn user_id(index: usize) -> String {
    format!("u{index:06}")
}

fn user_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"synth-user");
    h.update(seed.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn feature(name: &str) -> FeatureId {
    FeatureId::from_name(name).unwrap_or_else(|| panic!("`{name}` is a registered feature"))
}

/// Everyday features a user may log without any link to fertility.
fn everyday_pool() -> Vec<FeatureId> {
    FeatureId::all()
        .filter(|f| {
            let n = f.name();
            !f.is_continuous()
                && !["period:", "sex:", "test:", "pill_hbc:", "patch_hbc:", "ring_hbc:", "injection_hbc:", "iud:", "collection_method:", "sleep:"]
                    .iter()
                    .any(|p| n.starts_with(p))
                && n != "fluid:egg_white"
        })
        .collect()
}

fn is_barrier(method: &str) -> bool {
    matches!(method, "condoms" | "female_condom" | "diaphragm" | "cervical_cap" | "sponge" | "spermicide")
}

fn is_pill(method: &str) -> bool {
    method.ends_with("_pill") && method != "emergency_pill"
}

/// Shares of protected / unprotected / withdrawal acts.
fn act_mix(method: &str, trying: bool) -> [f64; 3] {
    if trying {
        [0.05, 0.9, 0.05]
    } else if is_barrier(method) {
        [0.8, 0.12, 0.08]
    } else if method == "withdrawal" {
        [0.1, 0.15, 0.75]
    } else if method == "none" || method == "fertility_awareness" {
        [0.4, 0.3, 0.3]
    } else {
        [0.15, 0.8, 0.05]
    }
}

fn pick(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

struct Emitter<'a> {
    user: &'a str,
    start: NaiveDate,
    end_day: u32,
    logs: Vec<DailyLog>,
}

impl Emitter<'_> {
    fn date(&self, day: u32) -> NaiveDate {
        self.start + Days::new(day as u64)
    }

    fn binary(&mut self, day: u32, f: FeatureId) {
        if day < self.end_day {
            self.logs.push(DailyLog::binary(self.user, self.date(day), f));
        }
    }

    fn real(&mut self, day: u32, f: FeatureId, v: f64) {
        if day < self.end_day {
            let v = (v * 100.0).round() / 100.0;
            self.logs.push(DailyLog::new(self.user, self.date(day), f, LogValue::Real(v)).expect("continuous feature"));
        }
    }
}

/// Generates one user under `process`.
pub fn gen_user(spec: &WorldSpec, process: Process, index: usize) -> SynthUser {
    let mut rng = user_rng(spec.seed, index);
    let id = user_id(index);
    let max_len = spec.cycle_length.max as usize;
    let f_star = spec.fecundability.curve(max_len);
    let peak_day = spec.fecundability.argmax(max_len) as u32;
    let risks = spec.risks.as_array();

    let age: f64 = rng.random_range(18.0..45.0_f64).floor();
    let shares: Vec<f64> = spec.birth_control_mix.iter().map(|m| m.share).collect();
    let method = &spec.birth_control_mix[pick(&shares, &mut rng)];
    let trying = rng.random_bool(if method.method == "none" {
        spec.behavior.trying_without_method
    } else {
        spec.behavior.trying_with_method
    });
    let f = &spec.fertility;
    let multiplier = f.fixed.unwrap_or_else(|| {
        let noise = Normal::new(-0.5 * f.log_sd * f.log_sd, f.log_sd).expect("valid spread");
        let age_factor = (1.0 - f.decline_per_year * (age - f.decline_from_age).max(0.0)).max(0.0);
        let bc = if trying { 1.0 } else { method.fertility_factor };
        age_factor * bc * noise.sample(&mut rng).exp()
    });
    let ttp_mu = f
        .ttp_fixed
        .unwrap_or_else(|| Beta::new(f.ttp_alpha, f.ttp_beta).expect("valid beta").sample(&mut rng));
    let sex_range = if trying { spec.behavior.sex_rate_trying } else { spec.behavior.sex_rate_other };
    let sex_rate = if sex_range.0 < sex_range.1 { rng.random_range(sex_range.0..=sex_range.1) } else { sex_range.0 };
    let mix = act_mix(&method.method, trying);
    let log = &spec.logging;

    let profile = UserProfile {
        user_id: id.clone(),
        age: rng.random_bool(log.age).then_some(age),
        birth_control: rng.random_bool(log.birth_control).then(|| method.method.clone()),
    };

    // Everyday logging habits.
    let pool = everyday_pool();
    let n_habits = rng.random_range(8..=16).min(pool.len());
    let habits: Vec<(FeatureId, f64)> = sample(&mut rng, pool.len(), n_habits)
        .into_iter()
        .map(|i| (pool[i], rng.random_range(0.05..0.35)))
        .collect();
    let sleep = ["sleep:0-3_hrs", "sleep:3-6_hrs", "sleep:6-9_hrs", "sleep:9_hrs"].map(feature);
    let sleep_weights = [0.05, 0.3, 0.55, 0.1];
    let tracks_bbt = rng.random_bool(log.bbt_users);
    let tracks_weight = rng.random_bool(log.weight_users);
    let tracks_hr = rng.random_bool(log.heart_rate_users);
    let logs_fluid = rng.random_bool(0.4);
    let logs_ovulation_tests = trying && rng.random_bool(0.3);
    let base_bbt = rng.random_range(97.0..97.8);
    let base_weight = rng.random_range(48.0..110.0);
    let base_hr = rng.random_range(55.0..80.0);

    let span = rng.random_range(spec.tracking_days.0..=spec.tracking_days.1);
    let start = spec.first_date + Days::new(rng.random_range(0..=spec.start_jitter_days) as u64);
    let mut out = Emitter { user: &id, start, end_day: span, logs: Vec::new() };

    let sex_features: [FeatureId; 3] = std::array::from_fn(|t| SexType::ALL[t].feature().expect("logged sex type"));
    let period = ["period:heavy", "period:medium", "period:light"].map(feature);
    let pad = feature("collection_method:pad");
    let tampon = feature("collection_method:tampon");
    let pill = feature("pill_hbc:taken");
    let egg_white = feature("fluid:egg_white");
    let (ov_pos, ov_neg) = (feature("test:ovulation_pos"), feature("test:ovulation_neg"));
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let length_dist = Normal::new(spec.cycle_length.mean, spec.cycle_length.sd.max(1e-9)).expect("valid spread");

    let mut cycles = Vec::new();
    let mut cycle_start = 0u32;
    let mut pregnant_from: Option<u32> = None;
    let mut day_of_cycle = vec![None; span as usize];

    while cycle_start < span && pregnant_from.is_none() {
        let length = (length_dist.sample(&mut rng).round() as i64)
            .clamp(spec.cycle_length.min as i64, spec.cycle_length.max as i64) as u32;
        let bleed = rng.random_range(spec.period_days.0..=spec.period_days.1);
        for d in 0..bleed {
            let day = cycle_start + d;
            let heavy = if d < 2 { 0 } else if d < 4 { 1 } else { 2 };
            if d == 0 || rng.random_bool(0.85) {
                out.binary(day, period[heavy]);
                if rng.random_bool(0.3) {
                    out.binary(day, if rng.random_bool(0.5) { pad } else { tampon });
                }
            }
        }
        let mut conceived = false;
        let mut peak_unprotected = false;
        let mut conceive_p_ettp = 0.0;
        for d in 0..length {
            let day = cycle_start + d;
            if day < span {
                day_of_cycle[day as usize] = Some(d);
            }
            let forced = spec.behavior.forced_unprotected_day == Some(d);
            let act = if forced {
                Some(1)
            } else if rng.random_bool(sex_rate) {
                Some(pick(&mix, &mut rng))
            } else {
                None
            };
            if let Some(t) = act {
                if forced || rng.random_bool(log.sex) {
                    out.binary(day, sex_features[t]);
                }
            }
            let r = risks[act.unwrap_or(3)];
            let p = (r * f_star[d as usize] * multiplier).min(1.0);
            if d == peak_day {
                peak_unprotected = act == Some(1);
                conceive_p_ettp = p;
            }
            if process == Process::Bms && !conceived && rng.random_bool(p) {
                conceived = true;
            }
            if logs_fluid && (peak_day.saturating_sub(3)..=peak_day + 1).contains(&d) && rng.random_bool(0.35) {
                out.binary(day, egg_white);
            }
            if logs_ovulation_tests && (peak_day.saturating_sub(3)..=peak_day + 3).contains(&d) && rng.random_bool(0.5) {
                out.binary(day, if d.abs_diff(peak_day) <= 1 { ov_pos } else { ov_neg });
            }
        }
        let pregnant = match process {
            Process::Bms => conceived,
            Process::Ettp => rng.random_bool(conceive_p_ettp),
            Process::Ttp => rng.random_bool(ttp_mu),
        };
        if pregnant {
            let jitter = rng.random_range(-3i64..=3);
            let test_day = (length as i64 + jitter).clamp(25, 48) as u32 + cycle_start;
            if rng.random_bool(log.positive_test) {
                out.binary(test_day, FeatureId::pregnancy_positive());
            }
            pregnant_from = Some(cycle_start + length);
        } else {
            let p_test = if trying { log.negative_test_trying } else { log.negative_test_other };
            let test_day = cycle_start + (length + rng.random_range(0..=3)).max(25);
            if rng.random_bool(p_test) {
                out.binary(test_day, FeatureId::pregnancy_negative());
            }
        }
        cycles.push(CycleTruth {
            user_id: id.clone(),
            start_date: out.date(cycle_start),
            length,
            pregnant,
            peak_day_unprotected: peak_unprotected,
        });
        cycle_start += length;
    }

    // Everyday and continuous logs over the whole span.
    for day in 0..span {
        if rng.random_bool(log.sleep) {
            out.binary(day, sleep[pick(&sleep_weights, &mut rng)]);
        }
        for &(f, p) in &habits {
            if rng.random_bool(p) {
                out.binary(day, f);
            }
        }
        if is_pill(&method.method) && !trying && rng.random_bool(0.85) {
            out.binary(day, pill);
        }
        let luteal = match (pregnant_from, day_of_cycle[day as usize]) {
            (Some(p), _) if day >= p => true,
            (_, Some(d)) => d > peak_day,
            _ => false,
        };
        if tracks_bbt && rng.random_bool(0.7) {
            let shift = if luteal { 0.45 } else { 0.0 };
            out.real(day, FeatureId::BBT, base_bbt + shift + 0.12 * normal.sample(&mut rng));
        }
        if tracks_weight && day % 7 == 0 {
            out.real(day, FeatureId::WEIGHT, base_weight + 0.4 * normal.sample(&mut rng));
        }
        if tracks_hr && rng.random_bool(0.5) {
            out.real(day, FeatureId::RESTING_HEART_RATE, base_hr + 3.0 * normal.sample(&mut rng));
        }
    }

    // Pregnant users keep logging everyday features; ingest drops what follows the positive test.
    out.logs.sort_by(|a, b| a.date.cmp(&b.date).then(a.feature.cmp(&b.feature)));

    SynthUser {
        profile,
        logs: out.logs,
        truth: UserTruth {
            user_id: id.clone(),
            age,
            birth_control: method.method.clone(),
            trying,
            multiplier,
            ttp_mu,
        },
        cycles,
    }
}

/// Generates the whole cohort under `process`, in user order.
pub fn gen_alt_process(spec: &WorldSpec, process: Process) -> Result<Cohort> {
    spec.validate()?;
    let users: Vec<SynthUser> = (0..spec.n_users).into_par_iter().map(|i| gen_user(spec, process, i)).collect();
    let mut profiles = Vec::with_capacity(users.len());
    let mut logs = Vec::new();
    let mut truth_users = Vec::with_capacity(users.len());
    let mut cycles = Vec::new();
    for u in users {
        profiles.push(u.profile);
        logs.extend(u.logs);
        truth_users.push(u.truth);
        cycles.extend(u.cycles);
    }
    Ok(Cohort {
        profiles,
        logs,
        truth: PlantedTruth {
            process,
            seed: spec.seed,
            f_star: spec.fecundability.curve(spec.cycle_length.max as usize),
            risks: spec.risks.clone(),
            users: truth_users,
            cycles,
        },
    })
}

/// Cohort under the day-specific conception law.
pub fn gen_cohort(spec: &WorldSpec) -> Result<Cohort> {
    gen_alt_process(spec, Process::Bms)
}

/// Users generated and written per parallel chunk.
const WRITE_CHUNK: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub logs: PathBuf,
    pub profiles: PathBuf,
    pub truth: PathBuf,
}

impl DatasetPaths {
    pub fn in_dir(dir: &Path, format: LogFormat) -> Self {
        let logs = match format {
            LogFormat::Csv => "logs.csv",
            LogFormat::Jsonl => "logs.jsonl",
        };
        DatasetPaths {
            logs: dir.join(logs),
            profiles: dir.join("profiles.csv"),
            truth: dir.join("truth.json"),
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Streams a cohort to log, profile and truth files without holding every log in memory.
pub fn write_dataset(spec: &WorldSpec, process: Process, paths: &DatasetPaths, format: LogFormat) -> Result<PlantedTruth> {
    spec.validate()?;
    if let Some(dir) = paths.logs.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut logs_out = create(&paths.logs)?;
    let mut profiles = Vec::with_capacity(spec.n_users);
    let mut truth = PlantedTruth {
        process,
        seed: spec.seed,
        f_star: spec.fecundability.curve(spec.cycle_length.max as usize),
        risks: spec.risks.clone(),
        users: Vec::with_capacity(spec.n_users),
        cycles: Vec::new(),
    };
    let mut first = true;
    for from in (0..spec.n_users).step_by(WRITE_CHUNK) {
        let to = (from + WRITE_CHUNK).min(spec.n_users);
        let users: Vec<SynthUser> = (from..to).into_par_iter().map(|i| gen_user(spec, process, i)).collect();
        for u in users {
            // One header line for the whole CSV file.
            let mut buf = Vec::new();
            write_logs(&mut buf, &u.logs, format).map_err(|e| Error::io(&paths.logs, e))?;
            let body = if format == LogFormat::Csv && !first {
                &buf[buf.iter().position(|b| *b == b'\n').map_or(0, |p| p + 1)..]
            } else {
                &buf[..]
            };
            first = false;
            logs_out.write_all(body).map_err(|e| Error::io(&paths.logs, e))?;
            profiles.push(u.profile);
            truth.users.push(u.truth);
            truth.cycles.extend(u.cycles);
        }
    }
    if first {
        write_logs(&mut logs_out, &[], format).map_err(|e| Error::io(&paths.logs, e))?;
    }
    logs_out.flush().map_err(|e| Error::io(&paths.logs, e))?;
    let mut p = create(&paths.profiles)?;
    write_profiles(&mut p, &profiles).and_then(|_| p.flush()).map_err(|e| Error::io(&paths.profiles, e))?;
    let mut t = create(&paths.truth)?;
    serde_json::to_writer(&mut t, &truth)?;
    t.flush().map_err(|e| Error::io(&paths.truth, e))?;
    Ok(truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cycles::{detect_cycle_starts, examples_for_user};
    use crate::ingest::{apply_filters, parse_logs, qc_continuous, write_logs, LogFormat, QcConfig, QcReport};

    fn small(n: usize, seed: u64) -> WorldSpec {
        WorldSpec::with_users(n, seed)
    }

    /// Labeled cycles a user contributes after the standard filters.
    fn labels(user: &SynthUser) -> Vec<bool> {
        let cfg = QcConfig::default();
        let mut report = QcReport::new(cfg.clone());
        report.rows_retained = user.logs.len();
        let logs = apply_filters(user.logs.clone(), &cfg, &mut report);
        examples_for_user(&user.profile.user_id, &logs, false)
            .iter()
            .map(|e| e.label.is_positive())
            .collect()
    }

    #[test]
    fn default_spec_is_valid() {
        WorldSpec::default().validate().unwrap();
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = WorldSpec::default();
        s.fecundability.peak_day = 3;
        assert!(s.validate().is_err());
        let mut s = WorldSpec::default();
        s.risks.none = 1.5;
        assert!(s.validate().is_err());
        let mut s = WorldSpec::default();
        s.cycle_length.min = 50;
        assert!(s.validate().is_err());
        let mut s = WorldSpec::default();
        s.behavior.forced_unprotected_day = Some(30);
        assert!(s.validate().is_err());
        assert!("nope".parse::<Process>().is_err());
        assert_eq!("ettp".parse::<Process>().unwrap(), Process::Ettp);
    }

    #[test]
    fn bump_peaks_on_its_day() {
        let f = Fecundability::default();
        assert_eq!(f.argmax(45), 12);
        assert!((f.curve(45)[12] - 0.30).abs() < 1e-15);
        let custom = Fecundability { curve: Some(vec![0.0, 0.5]), ..Default::default() };
        assert_eq!(custom.curve(3), vec![0.0, 0.5, 0.0]);
    }

    #[test]
    fn zero_fertility_never_conceives() {
        let mut s = small(200, 3);
        s.fertility.fixed = Some(0.0);
        let c = gen_cohort(&s).unwrap();
        assert!(c.truth.cycles.iter().all(|c| !c.pregnant));
        assert!(c.logs.iter().all(|l| l.feature != FeatureId::pregnancy_positive()));
    }

    #[test]
    fn forced_peak_act_at_full_risk_always_conceives() {
        let mut s = small(100, 4);
        s.fecundability.peak = 1.0;
        s.fertility.fixed = Some(1.0);
        s.behavior.forced_unprotected_day = Some(12);
        s.logging.positive_test = 1.0;
        let c = gen_cohort(&s).unwrap();
        for u in &c.truth.users {
            let cycles: Vec<_> = c.truth.cycles.iter().filter(|c| c.user_id == u.user_id).collect();
            assert_eq!(cycles.len(), 1);
            assert!(cycles[0].pregnant && cycles[0].peak_day_unprotected);
        }
        let positives = c.logs.iter().filter(|l| l.feature == FeatureId::pregnancy_positive()).count();
        let conceived_in_span = c
            .truth
            .cycles
            .iter()
            .filter(|cy| {
                let u = c.logs.iter().filter(|l| l.user_id == cy.user_id).map(|l| l.date).max().unwrap();
                cy.start_date + Days::new(25) < u
            })
            .count();
        assert!(positives >= conceived_in_span * 9 / 10, "{positives} of {conceived_in_span}");
    }

    #[test]
    fn ttp_success_follows_mu_only() {
        let mut s = small(100, 5);
        s.fertility.ttp_fixed = Some(0.0);
        let c = gen_alt_process(&s, Process::Ttp).unwrap();
        assert!(c.truth.cycles.iter().all(|c| !c.pregnant));
        s.fertility.ttp_fixed = Some(1.0);
        s.fertility.fixed = Some(0.0);
        let c = gen_alt_process(&s, Process::Ttp).unwrap();
        assert!(c.truth.cycles.iter().all(|c| c.pregnant));
    }

    #[test]
    fn ettp_requires_the_peak_day() {
        let mut s = small(400, 6);
        s.risks = PlantedRisks { protected: 0.0, unprotected: 1.0, withdrawal: 0.0, none: 0.0 };
        s.fecundability.peak = 0.9;
        let c = gen_alt_process(&s, Process::Ettp).unwrap();
        let pregnant: Vec<_> = c.truth.cycles.iter().filter(|c| c.pregnant).collect();
        assert!(!pregnant.is_empty());
        assert!(pregnant.iter().all(|c| c.peak_day_unprotected));
    }

    #[test]
    fn peak_unprotected_cycles_conceive_more_often() {
        let c = gen_cohort(&small(1500, 7)).unwrap();
        let rate = |flag: bool| {
            let v: Vec<_> = c.truth.cycles.iter().filter(|c| c.peak_day_unprotected == flag).collect();
            v.iter().filter(|c| c.pregnant).count() as f64 / v.len() as f64
        };
        assert!(rate(true) > 2.0 * rate(false), "{} vs {}", rate(true), rate(false));
    }

    #[test]
    fn deterministic_and_order_independent() {
        let s = small(40, 8);
        let a = gen_cohort(&s).unwrap();
        let b = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| gen_cohort(&s).unwrap());
        assert_eq!(a.logs, b.logs);
        assert_eq!(a.truth, b.truth);
        let single = gen_user(&s, Process::Bms, 17);
        let from_cohort: Vec<_> = a.logs.iter().filter(|l| l.user_id == single.profile.user_id).cloned().collect();
        assert_eq!(single.logs, from_cohort);
        let other = gen_cohort(&small(40, 9)).unwrap();
        assert_ne!(a.logs, other.logs);
    }

    #[test]
    fn continuous_values_pass_qc() {
        let c = gen_cohort(&small(300, 10)).unwrap();
        let cfg = QcConfig::default();
        let mut report = QcReport::new(cfg.clone());
        let n = c.logs.len();
        report.rows_retained = n;
        let kept = qc_continuous(c.logs, &cfg, &mut report);
        assert_eq!(kept.len(), n);
        assert_eq!(report.dropped.total(), 0);
    }

    #[test]
    fn csv_round_trip_and_cycle_recovery() {
        let c = gen_cohort(&small(30, 11)).unwrap();
        let mut buf = Vec::new();
        write_logs(&mut buf, &c.logs, LogFormat::Csv).unwrap();
        let mut report = QcReport::new(QcConfig::default());
        let parsed = parse_logs(&buf[..], LogFormat::Csv, true, &mut report).unwrap();
        assert_eq!(parsed, c.logs);

        for u in 0..30 {
            let user = gen_user(&c.truth_spec_for_tests(), Process::Bms, u);
            let starts = detect_cycle_starts(&user.logs);
            let last = user.logs.iter().map(|l| l.date).max().unwrap();
            let truth: Vec<_> = user.cycles.iter().map(|c| c.start_date).filter(|d| *d <= last).collect();
            assert_eq!(starts, truth, "user {u}");
        }
    }

    #[test]
    fn labels_agree_with_planted_outcomes() {
        let s = small(800, 13);
        let (mut labeled, mut positive, mut planted) = (0, 0, 0);
        for i in 0..s.n_users {
            let user = gen_user(&s, Process::Bms, i);
            let cfg = QcConfig::default();
            let mut report = QcReport::new(cfg.clone());
            report.rows_retained = user.logs.len();
            let logs = apply_filters(user.logs.clone(), &cfg, &mut report);
            for ex in examples_for_user(&user.profile.user_id, &logs, false) {
                let truth = user.cycles.iter().find(|c| c.start_date == ex.start_date).expect("start is planted");
                labeled += 1;
                positive += ex.label.is_positive() as usize;
                planted += truth.pregnant as usize;
            }
        }
        let gap = (positive as f64 - planted as f64).abs() / labeled as f64;
        assert!(gap <= 0.02, "{positive} labeled positive vs {planted} planted of {labeled}");
    }

    #[test]
    fn every_user_is_active() {
        let c = gen_cohort(&small(300, 12)).unwrap();
        let counts = crate::ingest::log_counts(&c.logs);
        assert_eq!(counts.len(), 300);
        assert!(counts.values().all(|n| *n >= 300), "min {}", counts.values().min().unwrap());
    }

    #[test]
    fn positive_fraction_lands_in_bracket() {
        let s = small(10_000, 2024);
        let users: Vec<SynthUser> = (0..s.n_users).into_par_iter().map(|i| gen_user(&s, Process::Bms, i)).collect();
        let labels: Vec<bool> = users.par_iter().flat_map_iter(labels).collect();
        let pos = labels.iter().filter(|l| **l).count() as f64 / labels.len() as f64;
        assert!(labels.len() > 10_000, "{} cycles", labels.len());
        eprintln!("positive fraction {pos:.4} over {} cycles", labels.len());
        assert!((0.10..=0.22).contains(&pos), "positive fraction {pos}");
    }

    #[test]
    fn streamed_files_match_in_memory_cohort() {
        let dir = tempfile::tempdir().unwrap();
        let s = small(WRITE_CHUNK + 7, 14);
        for format in [LogFormat::Csv, LogFormat::Jsonl] {
            let paths = DatasetPaths::in_dir(dir.path(), format);
            let truth = write_dataset(&s, Process::Bms, &paths, format).unwrap();
            let c = gen_cohort(&s).unwrap();
            assert_eq!(truth, c.truth);
            let mut report = QcReport::new(QcConfig::default());
            let text = std::fs::read(&paths.logs).unwrap();
            let parsed = parse_logs(&text[..], format, true, &mut report).unwrap();
            assert_eq!(parsed, c.logs);
            let back: PlantedTruth = serde_json::from_slice(&std::fs::read(&paths.truth).unwrap()).unwrap();
            assert_eq!(back, truth);
        }
    }

    impl Cohort {
        fn truth_spec_for_tests(&self) -> WorldSpec {
            WorldSpec::with_users(self.truth.users.len(), self.truth.seed)
        }
    }
}
