//! Logs to encoded examples: filters, labeling, the user split and encoding.
//!
//! Users are visited twice through a fetch callback so that large cohorts
//! never need all raw logs or raw examples in memory at once. The first pass
//! filters and labels each user and collects what the standardizer needs;
//! the second pass encodes with statistics fitted on training users only.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::schema::SchemaFile;
use crate::codec::{encode_example, read_encoded, user_continuous_means, write_encoded, EncodedExample, FeatureSchema, Standardizer};
use crate::cycles::examples_for_user;
use crate::error::{Error, Result};
use crate::ingest::{apply_filters, DailyLog, QcConfig, QcReport, UserProfile};
use crate::synth::{gen_user, Process, WorldSpec};
use crate::trainer::{assign_split, Split, SplitFractions, SplitSpec};

/// Users processed per parallel chunk in each pass.
const USER_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrepareOptions {
    pub qc: QcConfig,
    pub split_seed: u64,
    pub fractions: SplitFractions,
    /// Attach the encoded 180-day history needed by the embedding model.
    pub with_history: bool,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        PrepareOptions {
            qc: QcConfig::default(),
            split_seed: 0,
            fractions: SplitFractions::default(),
            with_history: false,
        }
    }
}

/// One user's parsed logs and profile.
#[derive(Clone, Debug, Default)]
pub struct UserInput {
    pub logs: Vec<DailyLog>,
    pub profile: Option<UserProfile>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub users: usize,
    pub examples: usize,
    pub positives: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub examples: usize,
    pub positives: usize,
    pub positive_fraction: f64,
    pub train: SplitCounts,
    pub validation: SplitCounts,
    pub test: SplitCounts,
}

impl LabelSummary {
    fn of(examples: &[EncodedExample], split: &SplitSpec) -> Self {
        let mut s = LabelSummary::default();
        for (which, counts) in [
            (Split::Train, &mut s.train),
            (Split::Validation, &mut s.validation),
            (Split::Test, &mut s.test),
        ] {
            counts.users = split.users(which).len();
            let chosen = split.select(examples, which);
            counts.examples = chosen.len();
            counts.positives = chosen.iter().filter(|e| e.label.is_positive()).count();
        }
        s.examples = examples.len();
        s.positives = examples.iter().filter(|e| e.label.is_positive()).count();
        s.positive_fraction = if s.examples > 0 { s.positives as f64 / s.examples as f64 } else { 0.0 };
        s
    }
}

#[derive(Clone, Debug)]
pub struct Prepared {
    pub schema: FeatureSchema,
    pub standardizer: Standardizer,
    pub split: SplitSpec,
    /// In user order, then cycle order.
    pub examples: Vec<EncodedExample>,
    pub qc: QcReport,
    pub summary: LabelSummary,
}

pub const EXAMPLES_FILE: &str = "examples.jsonl";
pub const SCHEMA_FILE: &str = "schema.json";
pub const SPLIT_FILE: &str = "split.json";
pub const STANDARDIZER_FILE: &str = "standardizer.json";
pub const QC_FILE: &str = "qc_report.json";
pub const SUMMARY_FILE: &str = "summary.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    Ok(serde_json::from_reader(r)?)
}

impl Prepared {
    /// Writes every artifact into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(EXAMPLES_FILE);
        let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        write_encoded(&mut w, &self.examples)?;
        w.flush().map_err(|e| Error::io(&path, e))?;
        write_json(&dir.join(SCHEMA_FILE), &self.schema.to_json())?;
        write_json(&dir.join(SPLIT_FILE), &self.split)?;
        write_json(&dir.join(STANDARDIZER_FILE), &self.standardizer)?;
        write_json(&dir.join(QC_FILE), &self.qc)?;
        write_json(&dir.join(SUMMARY_FILE), &self.summary)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let schema = FeatureSchema::from_json(&read_json::<SchemaFile>(&dir.join(SCHEMA_FILE))?)?;
        let path = dir.join(EXAMPLES_FILE);
        let examples = read_encoded(BufReader::new(File::open(&path).map_err(|e| Error::io(&path, e))?))?;
        let widths_ok = examples.iter().all(|e| {
            e.user_vector.len() == schema.user_width()
                && e.days.iter().all(|d| d.0.last().is_none_or(|(i, _)| (*i as usize) < schema.day_width()))
        });
        if !widths_ok {
            return Err(Error::Shape { expected: schema.day_width(), actual: 0, context: "encoded examples do not fit the schema" });
        }
        Ok(Prepared {
            schema,
            split: read_json(&dir.join(SPLIT_FILE))?,
            standardizer: read_json(&dir.join(STANDARDIZER_FILE))?,
            qc: read_json(&dir.join(QC_FILE))?,
            summary: read_json(&dir.join(SUMMARY_FILE))?,
            examples,
        })
    }

    /// Examples of one split, in stored order.
    pub fn select(&self, split: Split) -> Vec<&EncodedExample> {
        self.split.select(&self.examples, split)
    }
}

struct FirstPass {
    user_id: String,
    profile: Option<UserProfile>,
    means: [Option<f64>; 3],
    has_examples: bool,
    report: QcReport,
}

fn filter_user(input: UserInput, qc: &QcConfig) -> (Vec<DailyLog>, Option<UserProfile>, QcReport) {
    let mut report = QcReport::new(qc.clone());
    report.rows_read = input.logs.len();
    report.rows_retained = input.logs.len();
    let logs = apply_filters(input.logs, qc, &mut report);
    (logs, input.profile, report)
}

/// Runs the preparation over `user_ids`, fetching each user's input twice.
///
/// The returned report counts the filter stages only; [`fold_parse_report`]
/// adds the parse stage.
pub fn prepare<F>(user_ids: &[String], fetch: F, schema: &FeatureSchema, opts: &PrepareOptions) -> Result<Prepared>
where
    F: Fn(&str) -> Result<UserInput> + Sync,
{
    opts.fractions.validate()?;
    let mut first: Vec<FirstPass> = Vec::with_capacity(user_ids.len());
    for chunk in user_ids.chunks(USER_CHUNK) {
        let part = chunk
            .par_iter()
            .map(|id| {
                let (logs, profile, report) = filter_user(fetch(id)?, &opts.qc);
                let has_examples = !logs.is_empty() && !examples_for_user(id, &logs, false).is_empty();
                Ok(FirstPass {
                    user_id: id.clone(),
                    profile,
                    means: user_continuous_means(&logs),
                    has_examples,
                    report,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        first.extend(part);
    }

    let mut qc = QcReport::new(opts.qc.clone());
    let mut split = SplitSpec {
        seed: opts.split_seed,
        fractions: opts.fractions.clone(),
        train: Default::default(),
        validation: Default::default(),
        test: Default::default(),
    };
    for f in &first {
        qc.merge(&f.report);
        if f.has_examples {
            let set = match assign_split(opts.split_seed, &f.user_id, &opts.fractions) {
                Split::Train => &mut split.train,
                Split::Validation => &mut split.validation,
                Split::Test => &mut split.test,
            };
            set.insert(f.user_id.clone());
        }
    }
    let standardizer = Standardizer::fit(
        first
            .iter()
            .filter(|f| split.train.contains(&f.user_id))
            .map(|f| (f.profile.as_ref(), f.means)),
    );

    let wanted: Vec<&FirstPass> = first.iter().filter(|f| f.has_examples).collect();
    let mut examples = Vec::new();
    for chunk in wanted.chunks(USER_CHUNK) {
        let part = chunk
            .par_iter()
            .map(|f| {
                let (logs, profile, _) = filter_user(fetch(&f.user_id)?, &opts.qc);
                examples_for_user(&f.user_id, &logs, opts.with_history)
                    .iter()
                    .map(|raw| encode_example(raw, profile.as_ref(), f.means, &standardizer, schema))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        examples.extend(part.into_iter().flatten());
    }
    let summary = LabelSummary::of(&examples, &split);
    Ok(Prepared {
        schema: schema.clone(),
        standardizer,
        split,
        examples,
        qc,
        summary,
    })
}

/// Combines the parse-stage report with the filter-stage report of [`prepare`].
pub fn fold_parse_report(parse: &QcReport, filters: &QcReport) -> QcReport {
    let mut out = filters.clone();
    let d = &mut out.dropped;
    let p = &parse.dropped;
    d.malformed += p.malformed;
    d.unknown_feature += p.unknown_feature;
    d.value_mismatch += p.value_mismatch;
    out.rows_read = parse.rows_read;
    out.profiles = parse.profiles.clone();
    out
}

/// Prepares parsed logs already grouped by user.
pub fn prepare_grouped(
    logs: &BTreeMap<String, Vec<DailyLog>>,
    profiles: &[UserProfile],
    schema: &FeatureSchema,
    opts: &PrepareOptions,
) -> Result<Prepared> {
    let by_user: BTreeMap<&str, &UserProfile> = profiles.iter().map(|p| (p.user_id.as_str(), p)).collect();
    let ids: Vec<String> = logs.keys().cloned().collect();
    prepare(
        &ids,
        |id| {
            Ok(UserInput {
                logs: logs.get(id).cloned().unwrap_or_default(),
                profile: by_user.get(id).map(|p| (*p).clone()),
            })
        },
        schema,
        opts,
    )
}

/// Prepares a synthetic cohort directly from the generator, regenerating
/// each user on demand instead of going through files.
pub fn prepare_synthetic(spec: &WorldSpec, process: Process, schema: &FeatureSchema, opts: &PrepareOptions) -> Result<Prepared> {
    spec.validate()?;
    let ids: Vec<String> = (0..spec.n_users).map(crate::synth::user_id).collect();
    prepare(
        &ids,
        |id| {
            let index: usize = id[1..].parse().expect("generated user id");
            let u = gen_user(spec, process, index);
            Ok(UserInput { logs: u.logs, profile: Some(u.profile) })
        },
        schema,
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cycles::group_by_user;
    use crate::synth::gen_cohort;

    #[test]
    fn synthetic_and_grouped_paths_agree() {
        let spec = WorldSpec::with_users(120, 21);
        let schema = FeatureSchema::default();
        let opts = PrepareOptions { split_seed: 5, ..Default::default() };
        let a = prepare_synthetic(&spec, Process::Bms, &schema, &opts).unwrap();
        let c = gen_cohort(&spec).unwrap();
        let b = prepare_grouped(&group_by_user(c.logs), &c.profiles, &schema, &opts).unwrap();
        assert_eq!(a.examples, b.examples);
        assert_eq!(a.split, b.split);
        assert_eq!(a.qc, b.qc);
        assert!(a.qc.is_conserved());
        assert!(a.summary.examples > 200);
        assert_eq!(a.summary.train.examples + a.summary.validation.examples + a.summary.test.examples, a.summary.examples);
    }

    #[test]
    fn standardizer_ignores_held_out_users() {
        let spec = WorldSpec::with_users(150, 22);
        let schema = FeatureSchema::default();
        let opts = PrepareOptions::default();
        let p = prepare_synthetic(&spec, Process::Bms, &schema, &opts).unwrap();
        let c = gen_cohort(&spec).unwrap();
        let train_ages: Vec<f64> = c
            .profiles
            .iter()
            .filter(|pr| p.split.train.contains(&pr.user_id))
            .filter_map(|pr| pr.age)
            .collect();
        let mean = train_ages.iter().sum::<f64>() / train_ages.len() as f64;
        assert!((p.standardizer.age.mean - mean).abs() < 1e-9);
    }

    #[test]
    fn save_and_load_round_trip() {
        let spec = WorldSpec::with_users(40, 24);
        let schema = FeatureSchema::default();
        let p = prepare_synthetic(&spec, Process::Bms, &schema, &PrepareOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        p.save(dir.path()).unwrap();
        let q = Prepared::load(dir.path()).unwrap();
        assert_eq!(q.examples, p.examples);
        assert_eq!(q.split, p.split);
        assert_eq!(q.standardizer, p.standardizer);
        assert_eq!(q.summary, p.summary);
        assert_eq!(q.qc, p.qc);
        let first = std::fs::read(dir.path().join(EXAMPLES_FILE)).unwrap();
        q.save(dir.path()).unwrap();
        assert_eq!(std::fs::read(dir.path().join(EXAMPLES_FILE)).unwrap(), first);
    }

    #[test]
    fn history_is_attached_on_request() {
        let spec = WorldSpec::with_users(20, 23);
        let schema = FeatureSchema::default();
        let opts = PrepareOptions { with_history: true, ..Default::default() };
        let p = prepare_synthetic(&spec, Process::Bms, &schema, &opts).unwrap();
        assert!(p.examples.iter().all(|e| e.history.as_ref().is_some_and(|h| h.len() == 180)));
    }
}
