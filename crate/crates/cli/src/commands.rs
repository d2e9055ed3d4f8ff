use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use cyclecast::codec::schema::SchemaFile;
use cyclecast::codec::{EncodedExample, FeatureId, FeatureSchema, SexType};
use cyclecast::cycles::{group_by_user, Label};
use cyclecast::explain::{trend_curve, trends_csv, Scorer, TrendBundle};
use cyclecast::ingest::{open_text, parse_logs, parse_profiles, LogFormat, QcReport};
use cyclecast::metrics::{evaluate as eval_scores, results_csv, EvalResult, Stratification};
use cyclecast::neural::gradcheck::{GradCheckOptions, GradCheckReport};
use cyclecast::pipeline::{fold_parse_report, prepare_grouped, prepare_synthetic, Prepared, PrepareOptions};
use cyclecast::predictors::{Architecture, Checkpoint, Model, ModelKind};
use cyclecast::synth::{write_dataset, DatasetPaths, Process, WorldSpec};
use cyclecast::trainer::{grid_search, train as train_model, HyperParams, Split};
use serde::Serialize;

use crate::config::{distinct_paths, RunConfig, UsageError};
use crate::{
    EvaluateArgs, ExplainArgs, FormatArg, GradcheckArgs, HyperArgs, ModelArg, PrepareArgs, ProcessArg, SimulateArgs,
    SplitArg, TrainArgs,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const GRID_REPORT_FILE: &str = "grid_reports.json";

impl From<ProcessArg> for Process {
    fn from(p: ProcessArg) -> Self {
        match p {
            ProcessArg::Bms => Process::Bms,
            ProcessArg::Ttp => Process::Ttp,
            ProcessArg::Ettp => Process::Ettp,
        }
    }
}

impl From<FormatArg> for LogFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => LogFormat::Csv,
            FormatArg::Jsonl => LogFormat::Jsonl,
        }
    }
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Logistic => ModelKind::Logistic,
            ModelArg::Lstm => ModelKind::Lstm,
            ModelArg::Bms => ModelKind::Bms,
            ModelArg::Embedding => ModelKind::Embedding,
        }
    }
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

impl HyperArgs {
    fn apply(&self, mut hp: HyperParams) -> HyperParams {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { hp.$f = v; })* };
        }
        set!(learning_rate, hidden, layers, embedding, batch_size, dropout, l2, max_epochs, patience);
        hp
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_schema(path: Option<&Path>) -> Result<FeatureSchema> {
    let Some(path) = path else { return Ok(FeatureSchema::default()) };
    let text = fs::read_to_string(path).with_context(|| format!("reading schema {}", path.display()))?;
    let file: SchemaFile = serde_json::from_str(&text).with_context(|| format!("parsing schema {}", path.display()))?;
    Ok(FeatureSchema::from_json(&file)?)
}

fn load_prepared(dir: &Path) -> Result<Prepared> {
    Prepared::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn load_checkpoint(path: &Path, schema: &FeatureSchema) -> Result<(Checkpoint, Model, Vec<f64>)> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let (model, params) = ckpt.restore(schema).with_context(|| format!("restoring {}", path.display()))?;
    Ok((ckpt, model, params))
}

fn non_empty<'a>(examples: Vec<&'a EncodedExample>, split: Split) -> Result<Vec<&'a EncodedExample>> {
    if examples.is_empty() {
        bail!("the {} split has no examples", split.name());
    }
    Ok(examples)
}

pub fn simulate(cfg: &RunConfig, a: SimulateArgs) -> Result<()> {
    let mut spec: WorldSpec = cfg.world.clone();
    spec.seed = a.seed;
    if let Some(n) = a.users {
        spec.n_users = n;
    }
    let format = LogFormat::from(a.format);
    create_dir(&a.out)?;
    let paths = DatasetPaths::in_dir(&a.out, format);
    let truth = write_dataset(&spec, a.process.into(), &paths, format)?;
    let pregnant = truth.cycles.iter().filter(|c| c.pregnant).count();
    println!(
        "simulated {} users, {} cycles ({} pregnant) -> {}",
        truth.users.len(),
        truth.cycles.len(),
        pregnant,
        a.out.display()
    );
    println!(
        "logs {}, profiles {}, truth {} (not read by later commands)",
        paths.logs.display(),
        paths.profiles.display(),
        paths.truth.display()
    );
    Ok(())
}

pub fn prepare(cfg: &RunConfig, a: PrepareArgs) -> Result<()> {
    let mut named = vec![("logs", a.logs.as_path()), ("out", a.out.as_path())];
    if let Some(p) = &a.profiles {
        named.push(("profiles", p.as_path()));
    }
    distinct_paths(&named)?;
    let schema = load_schema(a.schema.as_deref())?;
    let mut opts: PrepareOptions = cfg.prepare.clone();
    if let Some(s) = a.split_seed {
        opts.split_seed = s;
    }
    if let Some(m) = a.min_logs {
        opts.qc.min_logs_per_user = m;
    }
    opts.with_history |= a.history;
    opts.qc.strict |= a.strict;
    opts.fractions.validate()?;

    let mut parse_report = QcReport::new(opts.qc.clone());
    let reader = open_text(&a.logs)?;
    let logs = parse_logs(reader, LogFormat::from_path(&a.logs), opts.qc.strict, &mut parse_report)
        .with_context(|| format!("parsing {}", a.logs.display()))?;
    let profiles = match &a.profiles {
        Some(p) => parse_profiles(open_text(p)?, &schema, opts.qc.strict, &mut parse_report)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => Vec::new(),
    };
    let grouped = group_by_user(logs);
    let mut prepared = prepare_grouped(&grouped, &profiles, &schema, &opts)?;
    prepared.qc = fold_parse_report(&parse_report, &prepared.qc);
    prepared.save(&a.out)?;

    let s = &prepared.summary;
    println!(
        "{} examples from {} users: {} positive, positive fraction {:.4}",
        s.examples,
        s.train.users + s.validation.users + s.test.users,
        s.positives,
        s.positive_fraction
    );
    for (name, c) in [("train", &s.train), ("validation", &s.validation), ("test", &s.test)] {
        println!("  {name:<10} users {:>6}  examples {:>7}  positives {:>6}", c.users, c.examples, c.positives);
    }
    println!("dropped rows: {}", prepared.qc.dropped.total());
    Ok(())
}

pub fn train(cfg: &RunConfig, a: TrainArgs) -> Result<()> {
    distinct_paths(&[("data", a.data.as_path()), ("out", a.out.as_path())])?;
    let kind = ModelKind::from(a.model);
    let data = load_prepared(&a.data)?;
    let tr = non_empty(data.select(Split::Train), Split::Train)?;
    let va = non_empty(data.select(Split::Validation), Split::Validation)?;
    if kind == ModelKind::Embedding && tr.iter().any(|e| e.history.is_none()) {
        bail!("the embedding model needs histories; re-run prepare with --history");
    }
    let hp = a.hyper.apply(cfg.hyperparameters.clone());
    create_dir(&a.out)?;
    let trained = if a.grid {
        let grid = cfg.grid.as_ref().ok_or_else(|| UsageError("--grid requires a `grid` section in --config".into()))?;
        let outcome = grid_search(kind, &data.schema, grid, &tr, &va, a.seed)?;
        write_json(&a.out.join(GRID_REPORT_FILE), &outcome.reports)?;
        println!("grid: {} points, best #{}", outcome.reports.len(), outcome.best);
        outcome.trained
    } else {
        train_model(kind, &data.schema, &tr, &va, &hp, a.seed)?
    };
    let r = &trained.report;
    let ckpt = Checkpoint::new(
        &trained.model,
        &data.schema,
        &trained.params,
        a.seed,
        serde_json::to_value(&r.hyperparameters)?,
    );
    ckpt.save(&a.out.join(CHECKPOINT_FILE))?;
    write_json(&a.out.join(TRAIN_REPORT_FILE), r)?;
    println!(
        "{kind}: {} epochs, chosen epoch {}, validation AUC {:.6} ({:.1}s)",
        r.epochs.len(),
        r.chosen_epoch,
        r.best_validation_auc,
        r.wall_clock_seconds
    );
    if let Some(risks) = trained.model.risks(&trained.params) {
        println!("risks {}", format_risks(&risks));
    }
    Ok(())
}

fn named_risks(risks: &[f64; 4]) -> BTreeMap<String, f64> {
    SexType::ALL.iter().zip(risks).map(|(t, r)| (t.name().to_string(), *r)).collect()
}

fn format_risks(risks: &[f64; 4]) -> String {
    SexType::ALL.iter().zip(risks).map(|(t, r)| format!("{}={r:.4}", t.name())).collect::<Vec<_>>().join(" ")
}

#[derive(Serialize)]
struct Evaluation {
    checkpoint: String,
    #[serde(flatten)]
    result: EvalResult,
    /// Learned per-type risks of the BMS head, by sex type.
    #[serde(skip_serializing_if = "Option::is_none")]
    risks: Option<BTreeMap<String, f64>>,
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let data = load_prepared(&a.data)?;
    let split = Split::from(a.split);
    let examples = non_empty(data.select(split), split)?;
    let labels: Vec<bool> = examples.iter().map(|e| e.label == Label::Positive).collect();
    let ids: Vec<&str> = examples.iter().map(|e| e.user_id.as_str()).collect();
    let strat = if a.per_user { Stratification::PerUser } else { Stratification::PerCycle };
    let mut out = Vec::new();
    for path in &a.checkpoint {
        let (_, model, params) = load_checkpoint(path, &data.schema)?;
        let scores = model.predict_all(&params, &examples)?;
        let result = eval_scores(model.kind().name(), split.name(), &ids, &scores, &labels, strat)?;
        println!(
            "{}: AUC {:.6}, top decile {:.4}, bottom decile {:.4} ({} cycles)",
            result.model,
            result.auc,
            result.top().rate,
            result.bottom().rate,
            result.n
        );
        let risks = model.risks(&params);
        if let Some(r) = &risks {
            println!("  risks {}", format_risks(r));
        }
        out.push(Evaluation { checkpoint: path.display().to_string(), result, risks: risks.as_ref().map(named_risks) });
    }
    write_json(&a.out, &out)?;
    if let Some(csv) = &a.csv {
        let results: Vec<EvalResult> = out.into_iter().map(|e| e.result).collect();
        fs::write(csv, results_csv(&results)).with_context(|| format!("writing {}", csv.display()))?;
    }
    Ok(())
}

pub fn explain(a: ExplainArgs) -> Result<()> {
    let mut named = vec![("out", a.out.as_path())];
    if let Some(b) = &a.bundle {
        named.push(("bundle", b.as_path()));
    }
    distinct_paths(&named)?;
    let feature = FeatureId::from_name(&a.feature).ok_or_else(|| UsageError(format!("unknown feature `{}`", a.feature)))?;
    let data = load_prepared(&a.data)?;
    let split = Split::from(a.split);
    let examples = non_empty(data.select(split), split)?;
    let (_, model, params) = load_checkpoint(&a.checkpoint, &data.schema)?;
    let scorer = Scorer::new(&model, &params, &examples);
    let curve = trend_curve(&scorer, &examples, &data.schema, feature, a.bootstrap, a.seed)?;
    fs::write(&a.out, trends_csv(std::slice::from_ref(&curve))).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "{} {}: peak day {}, range {:.6} over {} cycles",
        curve.model,
        curve.feature,
        curve.argmax(),
        curve.range(),
        curve.n_examples
    );
    if let (Some(lr_path), Some(bundle_path)) = (&a.logistic, &a.bundle) {
        let (ckpt, lr_model, lr_params) = load_checkpoint(lr_path, &data.schema)?;
        let l2 = ckpt.header.hyperparameters.get("l2").and_then(|v| v.as_f64()).unwrap_or(0.0);
        let linear = lr_model
            .linear_params(&lr_params, l2)
            .ok_or_else(|| anyhow!("{} is not a logistic checkpoint", lr_path.display()))?;
        let bundle = TrendBundle::build(&linear, &scorer, &examples, &data.schema, a.bootstrap, a.seed)?;
        write_json(bundle_path, &bundle)?;
    }
    Ok(())
}

/// Users simulated for the gradient check's example pool.
const GRADCHECK_USERS: usize = 40;

#[derive(Serialize)]
struct GradcheckEntry {
    model: ModelKind,
    parameters: usize,
    #[serde(flatten)]
    report: GradCheckReport,
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    if a.hidden == 0 || a.layers == 0 || a.batch < 2 {
        return Err(UsageError("--hidden and --layers must be positive and --batch at least 2".into()).into());
    }
    let schema = FeatureSchema::default();
    let opts = PrepareOptions { with_history: true, ..Default::default() };
    let data = prepare_synthetic(&WorldSpec::with_users(GRADCHECK_USERS, a.seed), Process::Bms, &schema, &opts)?;
    let batch = mixed_batch(&data.examples, a.batch)?;
    let kinds: Vec<ModelKind> = match a.model {
        Some(m) => vec![m.into()],
        None => ModelKind::ALL.to_vec(),
    };
    let mut entries = Vec::new();
    let mut failed = Vec::new();
    for kind in kinds {
        let model = Model::new(Architecture::new(kind, &schema, a.hidden, a.layers, a.hidden), &schema)?;
        let params = model.init(a.seed);
        let tolerance = a.tolerance.unwrap_or(if kind == ModelKind::Logistic { 1e-6 } else { 1e-4 });
        let gopts = GradCheckOptions { tolerance, seed: a.seed, ..Default::default() };
        let report = model.grad_check(&params, &batch, 0.01, &gopts)?;
        println!(
            "{} {kind}: {} of {} coordinates, max relative error {:.3e} (tolerance {:.0e})",
            if report.passed { "[PASS]" } else { "[FAIL]" },
            report.coordinates_checked,
            model.param_len(),
            report.max_relative_error,
            tolerance
        );
        if !report.passed {
            failed.push(kind.name());
        }
        entries.push(GradcheckEntry { model: kind, parameters: model.param_len(), report });
    }
    if let Some(out) = &a.out {
        write_json(out, &entries)?;
    }
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}

/// The first positive example followed by negatives, so both loss branches are exercised.
fn mixed_batch(examples: &[EncodedExample], n: usize) -> Result<Vec<(&EncodedExample, f64)>> {
    let pos = examples.iter().find(|e| e.label.is_positive()).ok_or_else(|| anyhow!("no positive example to check"))?;
    let mut batch = vec![pos];
    batch.extend(examples.iter().filter(|e| !e.label.is_positive()).take(n - 1));
    if batch.len() < n {
        bail!("only {} examples available for a batch of {n}", batch.len());
    }
    Ok(batch.into_iter().map(|e| (e, e.label_f64())).collect())
}
