//! Feature registry and slot layout.
//!
//! Daily features are fixed: every category/type pair a user can log, named
//! `category:type` in lowercase with spaces replaced by underscores. The
//! birth-control list is configurable because the set of methods offered by
//! an app varies; its default length is what makes the flattened linear
//! vector 2,771 wide.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: &str = "1";

/// Number of days of a cycle visible to the predictors.
pub const WINDOW_DAYS: usize = 24;

/// Days of pre-cycle history fed to the user-history encoder.
pub const HISTORY_DAYS: usize = 180;

const DAILY_FEATURES: &[&str] = &[
    "ailment:allergy",
    "ailment:cold_flu_ailment",
    "ailment:fever",
    "ailment:injury",
    "appointment:date",
    "appointment:doctor",
    "appointment:ob_gyn",
    "appointment:vacation",
    "collection_method:menstrual_cup",
    "collection_method:pad",
    "collection_method:panty_liner",
    "collection_method:tampon",
    "craving:carbs",
    "craving:chocolate",
    "craving:salty",
    "craving:sweet",
    "digestion:bloated",
    "digestion:gassy",
    "digestion:great_digestion",
    "digestion:nauseated",
    "emotion:happy",
    "emotion:pms",
    "emotion:sad",
    "emotion:sensitive",
    "energy:energized",
    "energy:exhausted",
    "energy:high_energy",
    "energy:low_energy",
    "exercise:biking",
    "exercise:running",
    "exercise:swimming",
    "exercise:yoga",
    "fluid:atypical",
    "fluid:creamy",
    "fluid:egg_white",
    "fluid:sticky",
    "hair:bad",
    "hair:dry",
    "hair:good",
    "hair:oily",
    "injection_hbc:administered",
    "injection_hbc:type_not_provided",
    "iud:inserted",
    "iud:removed",
    "iud:thread_checked",
    "iud:tnp",
    "medication:antibiotic",
    "medication:antihistamine",
    "medication:cold_flu_medication",
    "medication:pain",
    "mental:calm",
    "mental:distracted",
    "mental:focused",
    "mental:stressed",
    "motivation:motivated",
    "motivation:productive",
    "motivation:unmotivated",
    "motivation:unproductive",
    "pain:cramps",
    "pain:headache",
    "pain:ovulation_pain",
    "pain:tender_breasts",
    "party:big_night_party",
    "party:cigarettes",
    "party:drinks_party",
    "party:hangover",
    "patch_hbc:removed",
    "patch_hbc:removed_late",
    "patch_hbc:replaced",
    "patch_hbc:replaced_late",
    "patch_hbc:tnp",
    "period:heavy",
    "period:light",
    "period:medium",
    "period:spotting",
    "pill_hbc:double",
    "pill_hbc:late",
    "pill_hbc:missed",
    "pill_hbc:taken",
    "pill_hbc:tnp",
    "poop:constipated",
    "poop:diarrhea",
    "poop:great",
    "poop:normal",
    "ring_hbc:removed",
    "ring_hbc:removed_late",
    "ring_hbc:replaced",
    "ring_hbc:replaced_late",
    "ring_hbc:tnp",
    "sex:high_sex_drive",
    "sex:protected",
    "sex:unprotected",
    "sex:withdrawal",
    "skin:acne",
    "skin:dry",
    "skin:good",
    "skin:oily",
    "sleep:0-3_hrs",
    "sleep:3-6_hrs",
    "sleep:6-9_hrs",
    "sleep:9_hrs",
    "sleep:tnp",
    "social:conflict",
    "social:sociable",
    "social:supportive",
    "social:withdrawn",
    "test:ovulation_neg",
    "test:ovulation_pos",
    "test:pregnancy_neg",
    "test:pregnancy_pos",
    "continuous:bbt",
    "continuous:resting_heart_rate",
    "continuous:weight",
];

/// Index of `continuous:bbt`; the three continuous features are the tail of the table.
const FIRST_CONTINUOUS: usize = DAILY_FEATURES.len() - 3;

pub const DEFAULT_BIRTH_CONTROL: &[&str] = &[
    "none",
    "condoms",
    "female_condom",
    "withdrawal",
    "fertility_awareness",
    "combined_pill",
    "progestin_only_pill",
    "extended_cycle_pill",
    "patch",
    "ring",
    "injection",
    "implant",
    "hormonal_iud",
    "copper_iud",
    "diaphragm",
    "cervical_cap",
    "sponge",
    "spermicide",
    "emergency_pill",
    "tubal_ligation",
    "partner_vasectomy",
    "abstinence",
    "lactational_amenorrhea",
    "basal_temperature_method",
    "calendar_method",
    "symptothermal_method",
    "ovulation_test_method",
    "hormonal_other",
    "non_hormonal_other",
    "prefer_not_to_say",
];

/// One of the 113 daily features. Ordering follows the registry table.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FeatureId(u8);

impl FeatureId {
    pub const BBT: FeatureId = FeatureId(FIRST_CONTINUOUS as u8);
    pub const RESTING_HEART_RATE: FeatureId = FeatureId(FIRST_CONTINUOUS as u8 + 1);
    pub const WEIGHT: FeatureId = FeatureId(FIRST_CONTINUOUS as u8 + 2);

    pub fn all() -> impl Iterator<Item = FeatureId> {
        (0..DAILY_FEATURES.len()).map(|i| FeatureId(i as u8))
    }

    pub fn from_name(name: &str) -> Option<FeatureId> {
        static INDEX: OnceLock<BTreeMap<&'static str, u8>> = OnceLock::new();
        INDEX
            .get_or_init(|| {
                DAILY_FEATURES
                    .iter()
                    .enumerate()
                    .map(|(i, n)| (*n, i as u8))
                    .collect()
            })
            .get(name)
            .map(|&i| FeatureId(i))
    }

    /// Looks a feature up by name, failing with [`Error::UnknownFeature`].
    pub fn parse(name: &str) -> Result<FeatureId> {
        Self::from_name(name).ok_or_else(|| Error::UnknownFeature(name.to_string()))
    }

    pub fn name(self) -> &'static str {
        DAILY_FEATURES[self.0 as usize]
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_continuous(self) -> bool {
        self.index() >= FIRST_CONTINUOUS
    }

    /// Position among the three continuous features (BBT, resting heart rate, weight).
    pub fn continuous_index(self) -> Option<usize> {
        self.index().checked_sub(FIRST_CONTINUOUS)
    }

    pub fn is_bleeding(self) -> bool {
        self.name().starts_with("period:")
    }

    pub fn is_pregnancy_test(self) -> bool {
        matches!(self.name(), "test:pregnancy_pos" | "test:pregnancy_neg")
    }

    pub fn pregnancy_positive() -> FeatureId {
        Self::from_name("test:pregnancy_pos").expect("registry")
    }

    pub fn pregnancy_negative() -> FeatureId {
        Self::from_name("test:pregnancy_neg").expect("registry")
    }
}

impl fmt::Debug for FeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for FeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for FeatureId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for FeatureId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        FeatureId::from_name(&name)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown feature `{name}`")))
    }
}

/// Sex types in the order used by the structural probability head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SexType {
    Protected,
    Unprotected,
    Withdrawal,
    None,
}

impl SexType {
    pub const ALL: [SexType; 4] = [
        SexType::Protected,
        SexType::Unprotected,
        SexType::Withdrawal,
        SexType::None,
    ];

    /// The daily feature logged for this type; `None` has no feature of its own.
    pub fn feature(self) -> Option<FeatureId> {
        let name = match self {
            SexType::Protected => "sex:protected",
            SexType::Unprotected => "sex:unprotected",
            SexType::Withdrawal => "sex:withdrawal",
            SexType::None => return None,
        };
        FeatureId::from_name(name)
    }

    pub fn name(self) -> &'static str {
        match self {
            SexType::Protected => "protected",
            SexType::Unprotected => "unprotected",
            SexType::Withdrawal => "withdrawal",
            SexType::None => "none",
        }
    }
}

/// Slot layout of the per-day and per-user vectors.
///
/// Day vector: one slot per binary predictive feature (registry order), then a
/// `(present, centered value)` pair per continuous feature. User vector:
/// `(age missing, age)`, one indicator per birth-control method, then the
/// user's mean of each continuous feature.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSchema {
    binary: Vec<FeatureId>,
    day_slot: [Option<u16>; 256],
    birth_control: Vec<String>,
}

impl Default for FeatureSchema {
    fn default() -> Self {
        Self::new(DEFAULT_BIRTH_CONTROL.iter().map(|s| s.to_string()).collect())
            .expect("default birth-control list is valid")
    }
}

impl FeatureSchema {
    pub fn new(birth_control: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for m in &birth_control {
            if normalize_method(m) != *m || m.is_empty() {
                return Err(Error::Config(format!(
                    "birth-control method `{m}` must be lowercase snake_case"
                )));
            }
            if !seen.insert(m.as_str()) {
                return Err(Error::Config(format!("duplicate birth-control method `{m}`")));
            }
        }
        let binary: Vec<FeatureId> = FeatureId::all()
            .filter(|f| !f.is_continuous() && !f.is_pregnancy_test())
            .collect();
        let mut day_slot = [None; 256];
        for (slot, f) in binary.iter().enumerate() {
            day_slot[f.index()] = Some(slot as u16);
        }
        Ok(FeatureSchema {
            binary,
            day_slot,
            birth_control,
        })
    }

    pub fn version(&self) -> &'static str {
        SCHEMA_VERSION
    }

    pub fn binary_features(&self) -> &[FeatureId] {
        &self.binary
    }

    pub fn birth_control(&self) -> &[String] {
        &self.birth_control
    }

    /// Width D of one encoded day.
    pub fn day_width(&self) -> usize {
        self.binary.len() + 6
    }

    /// Width U of the user block.
    pub fn user_width(&self) -> usize {
        2 + self.birth_control.len() + 3
    }

    /// Width of the flattened logistic-regression input, `24·D + U`.
    pub fn flat_width(&self) -> usize {
        WINDOW_DAYS * self.day_width() + self.user_width()
    }

    /// Slot of a binary predictive feature inside the day vector.
    pub fn binary_slot(&self, f: FeatureId) -> Option<usize> {
        self.day_slot[f.index()].map(usize::from)
    }

    /// Slots `(present, value)` of continuous feature `k` (0 = BBT, 1 = heart rate, 2 = weight).
    pub fn continuous_slots(&self, k: usize) -> (usize, usize) {
        let base = self.binary.len() + 2 * k;
        (base, base + 1)
    }

    /// Slot of a binary predictive feature given by name.
    pub fn binary_slot_by_name(&self, name: &str) -> Result<usize> {
        let f = FeatureId::parse(name)?;
        self.binary_slot(f)
            .ok_or_else(|| Error::NotBinaryFeature(name.to_string()))
    }

    pub fn birth_control_index(&self, method: &str) -> Option<usize> {
        let m = normalize_method(method);
        self.birth_control.iter().position(|b| *b == m)
    }

    pub const USER_AGE_MISSING: usize = 0;
    pub const USER_AGE_VALUE: usize = 1;

    pub fn user_birth_control_slot(&self, index: usize) -> usize {
        2 + index
    }

    pub fn user_mean_slot(&self, k: usize) -> usize {
        2 + self.birth_control.len() + k
    }

    /// Names of every day slot, in slot order.
    pub fn day_slot_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.binary.iter().map(|f| f.name().to_string()).collect();
        for f in [FeatureId::BBT, FeatureId::RESTING_HEART_RATE, FeatureId::WEIGHT] {
            names.push(format!("{}#present", f.name()));
            names.push(format!("{}#value", f.name()));
        }
        names
    }

    pub fn user_slot_names(&self) -> Vec<String> {
        let mut names = vec!["age#missing".to_string(), "age#value".to_string()];
        names.extend(self.birth_control.iter().map(|b| format!("birth_control:{b}")));
        for f in [FeatureId::BBT, FeatureId::RESTING_HEART_RATE, FeatureId::WEIGHT] {
            names.push(format!("{}#user_mean", f.name()));
        }
        names
    }

    pub fn to_json(&self) -> SchemaFile {
        let index = |names: Vec<String>| -> BTreeMap<String, usize> {
            names.into_iter().enumerate().map(|(i, n)| (n, i)).collect()
        };
        SchemaFile {
            version: SCHEMA_VERSION.to_string(),
            day_width: self.day_width(),
            user_width: self.user_width(),
            flat_width: self.flat_width(),
            day_slots: index(self.day_slot_names()),
            user_slots: index(self.user_slot_names()),
            birth_control: self.birth_control.clone(),
        }
    }

    pub fn from_json(file: &SchemaFile) -> Result<Self> {
        if file.version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema version {} is not supported (expected {SCHEMA_VERSION})",
                file.version
            )));
        }
        let schema = FeatureSchema::new(file.birth_control.clone())?;
        if schema.to_json() != *file {
            return Err(Error::Config(
                "schema file slot maps disagree with the feature registry".into(),
            ));
        }
        Ok(schema)
    }
}

/// Serialized form of [`FeatureSchema`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemaFile {
    pub version: String,
    pub day_width: usize,
    pub user_width: usize,
    pub flat_width: usize,
    pub day_slots: BTreeMap<String, usize>,
    pub user_slots: BTreeMap<String, usize>,
    pub birth_control: Vec<String>,
}

/// `"Combined Pill"` → `"combined_pill"`.
pub fn normalize_method(s: &str) -> String {
    s.trim()
        .to_lowercase()
        .chars()
        .map(|c| if c.is_whitespace() || c == '-' || c == '/' { '_' } else { c })
        .collect()
}
