//! User-level splits, balanced batches, the training loop and grid search.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{EncodedExample, FeatureSchema};
use crate::error::{Error, Result};
use crate::metrics::auc;
use crate::predictors::{Architecture, Model, ModelKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.8, validation: 0.1, test: 0.1 }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {parts:?} must be in [0, 1] and sum to 1")));
        }
        Ok(())
    }
}

/// Maps `(seed, user_id)` to a uniform point in `[0, 1)`.
fn user_unit(seed: u64, user_id: &str) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(user_id.as_bytes());
    let d = h.finalize();
    let x = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
    (x >> 11) as f64 / (1u64 << 53) as f64
}

pub fn assign_split(seed: u64, user_id: &str, fractions: &SplitFractions) -> Split {
    let u = user_unit(seed, user_id);
    if u < fractions.test {
        Split::Test
    } else if u < fractions.test + fractions.validation {
        Split::Validation
    } else {
        Split::Train
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub fractions: SplitFractions,
    pub train: BTreeSet<String>,
    pub validation: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl SplitSpec {
    pub fn of(&self, user_id: &str) -> Option<Split> {
        if self.train.contains(user_id) {
            Some(Split::Train)
        } else if self.validation.contains(user_id) {
            Some(Split::Validation)
        } else if self.test.contains(user_id) {
            Some(Split::Test)
        } else {
            None
        }
    }

    pub fn users(&self, split: Split) -> &BTreeSet<String> {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    /// Fails if any user is in more than one split.
    pub fn check_disjoint(&self) -> Result<()> {
        let overlap = self
            .train
            .intersection(&self.validation)
            .chain(self.train.intersection(&self.test))
            .chain(self.validation.intersection(&self.test))
            .next();
        match overlap {
            Some(u) => Err(Error::Config(format!("user `{u}` appears in two splits"))),
            None => Ok(()),
        }
    }

    /// Examples of one split, in input order.
    pub fn select<'a>(&self, examples: &'a [EncodedExample], split: Split) -> Vec<&'a EncodedExample> {
        let users = self.users(split);
        examples.iter().filter(|e| users.contains(&e.user_id)).collect()
    }
}

/// Hash-based user-level split: every cycle of a user lands in the same split.
pub fn split_by_user<'a>(user_ids: impl IntoIterator<Item = &'a str>, seed: u64, fractions: SplitFractions) -> Result<SplitSpec> {
    fractions.validate()?;
    let mut spec = SplitSpec {
        seed,
        fractions,
        train: BTreeSet::new(),
        validation: BTreeSet::new(),
        test: BTreeSet::new(),
    };
    for u in user_ids {
        let set = match assign_split(seed, u, &fractions) {
            Split::Train => &mut spec.train,
            Split::Validation => &mut spec.validation,
            Split::Test => &mut spec.test,
        };
        set.insert(u.to_string());
    }
    Ok(spec)
}

/// One epoch of class-balanced batches, as indices into `labels`.
///
/// Each batch takes `⌈b/2⌉` positives and `⌊b/2⌋` negatives without
/// replacement; the class that runs out first ends the epoch. A class smaller
/// than its half-batch yields a single, smaller batch.
pub fn balanced_batches(labels: &[bool], batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Config(format!("batch size {batch_size} cannot be balanced")));
    }
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    if pos.is_empty() {
        return Err(Error::EmptyClass("positive"));
    }
    if neg.is_empty() {
        return Err(Error::EmptyClass("negative"));
    }
    pos.shuffle(rng);
    neg.shuffle(rng);
    let (hp, hn) = (batch_size.div_ceil(2), batch_size / 2);
    let n = (pos.len() / hp).min(neg.len() / hn).max(1);
    Ok((0..n)
        .map(|b| {
            let mut batch: Vec<usize> = pos[(b * hp).min(pos.len())..((b + 1) * hp).min(pos.len())].to_vec();
            batch.extend_from_slice(&neg[(b * hn).min(neg.len())..((b + 1) * hn).min(neg.len())]);
            batch
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Momentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    pub learning_rate: f64,
    pub hidden: usize,
    pub layers: usize,
    pub embedding: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub l2: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Defaults to momentum for the logistic model and Adam otherwise.
    pub optimizer: Option<OptimizerKind>,
    pub momentum: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            learning_rate: 3e-3,
            hidden: 32,
            layers: 1,
            embedding: 16,
            batch_size: 64,
            dropout: 0.1,
            l2: 1e-5,
            max_epochs: 60,
            patience: 10,
            optimizer: None,
            momentum: 0.9,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(self.l2 >= 0.0) {
            return bad("regularization must be non-negative");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        Ok(())
    }

    pub fn optimizer_for(&self, kind: ModelKind) -> OptimizerKind {
        self.optimizer.unwrap_or(if kind == ModelKind::Logistic { OptimizerKind::Momentum } else { OptimizerKind::Adam })
    }

    pub fn architecture(&self, kind: ModelKind, schema: &FeatureSchema) -> Architecture {
        Architecture::new(kind, schema, self.hidden, self.layers, self.embedding)
    }
}

enum Optimizer {
    Adam { m: Vec<f64>, v: Vec<f64>, t: i32 },
    Momentum { velocity: Vec<f64>, beta: f64 },
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(kind: OptimizerKind, n: usize, momentum: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 },
            OptimizerKind::Momentum => Optimizer::Momentum { velocity: vec![0.0; n], beta: momentum },
        }
    }

    fn step(&mut self, p: &mut [f64], g: &[f64], lr: f64) {
        match self {
            Optimizer::Adam { m, v, t } => {
                *t += 1;
                let c1 = 1.0 - Self::BETA1.powi(*t);
                let c2 = 1.0 - Self::BETA2.powi(*t);
                for i in 0..p.len() {
                    m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                    v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                    p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
                }
            }
            Optimizer::Momentum { velocity, beta } => {
                for i in 0..p.len() {
                    velocity[i] = *beta * velocity[i] + g[i];
                    p[i] -= lr * velocity[i];
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub batches: usize,
    pub train_loss: f64,
    pub validation_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model: ModelKind,
    pub seed: u64,
    pub hyperparameters: HyperParams,
    pub n_train: usize,
    pub n_train_positive: usize,
    pub n_validation: usize,
    pub n_validation_positive: usize,
    pub epochs: Vec<EpochRecord>,
    pub chosen_epoch: usize,
    pub best_validation_auc: f64,
    /// Not serialized, so that reports of identical runs are byte-identical.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

#[derive(Debug)]
pub struct Trained {
    pub model: Model,
    pub params: Vec<f64>,
    pub report: TrainReport,
}

fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Trains one model on balanced batches and keeps the epoch with the best validation AUC.
///
/// Training stops once `patience` epochs pass without improvement, or at
/// `max_epochs`.
pub fn train(
    kind: ModelKind,
    schema: &FeatureSchema,
    train_set: &[&EncodedExample],
    validation: &[&EncodedExample],
    hp: &HyperParams,
    seed: u64,
) -> Result<Trained> {
    train_from(Model::new(hp.architecture(kind, schema), schema)?, None, train_set, validation, hp, seed)
}

/// As [`train`], optionally starting from given parameters.
pub fn train_from(
    model: Model,
    start: Option<Vec<f64>>,
    train_set: &[&EncodedExample],
    validation: &[&EncodedExample],
    hp: &HyperParams,
    seed: u64,
) -> Result<Trained> {
    hp.validate()?;
    let started = Instant::now();
    let kind = model.kind();
    let labels: Vec<bool> = train_set.iter().map(|e| e.label.is_positive()).collect();
    let val_labels: Vec<bool> = validation.iter().map(|e| e.label.is_positive()).collect();
    let mut params = start.unwrap_or_else(|| model.init(derive_seed(seed, "init", 0)));
    if params.len() != model.param_len() {
        return Err(Error::Shape { expected: model.param_len(), actual: params.len(), context: "initial parameters" });
    }
    let mut opt = Optimizer::new(hp.optimizer_for(kind), params.len(), hp.momentum);
    let mut best = params.clone();
    let mut best_auc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut epochs = Vec::new();
    for epoch in 0..hp.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "epoch", epoch as u64));
        let batches = balanced_batches(&labels, hp.batch_size, &mut rng)?;
        let mut total = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let batch: Vec<(&EncodedExample, f64)> = idx.iter().map(|&i| (train_set[i], train_set[i].label_f64())).collect();
            let dseed = derive_seed(seed, "dropout", ((epoch as u64) << 32) | b as u64);
            let (loss, grad) = model.loss_grad(&params, &batch, hp.l2, hp.dropout, dseed)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
            total += loss;
            opt.step(&mut params, &grad, hp.learning_rate);
        }
        let scores = validation.par_iter().map(|e| model.predict(&params, e)).collect::<Result<Vec<f64>>>()?;
        let val_auc = auc(&scores, &val_labels)?;
        epochs.push(EpochRecord { epoch, batches: batches.len(), train_loss: total / batches.len() as f64, validation_auc: val_auc });
        if val_auc > best_auc {
            best_auc = val_auc;
            best_epoch = epoch;
            best.copy_from_slice(&params);
        }
        if epoch - best_epoch >= hp.patience {
            break;
        }
    }
    let report = TrainReport {
        model: kind,
        seed,
        hyperparameters: hp.clone(),
        n_train: train_set.len(),
        n_train_positive: labels.iter().filter(|l| **l).count(),
        n_validation: validation.len(),
        n_validation_positive: val_labels.iter().filter(|l| **l).count(),
        epochs,
        chosen_epoch: best_epoch,
        best_validation_auc: best_auc,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(Trained { model, params: best, report })
}

/// Candidate values per hyperparameter; other settings come from `base`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperGrid {
    pub learning_rate: Vec<f64>,
    pub hidden: Vec<usize>,
    pub layers: Vec<usize>,
    pub batch_size: Vec<usize>,
    pub dropout: Vec<f64>,
    pub l2: Vec<f64>,
    pub base: HyperParams,
}

impl Default for HyperGrid {
    fn default() -> Self {
        HyperGrid::single(HyperParams::default())
    }
}

impl HyperGrid {
    pub fn single(hp: HyperParams) -> Self {
        HyperGrid {
            learning_rate: vec![hp.learning_rate],
            hidden: vec![hp.hidden],
            layers: vec![hp.layers],
            batch_size: vec![hp.batch_size],
            dropout: vec![hp.dropout],
            l2: vec![hp.l2],
            base: hp,
        }
    }

    /// Exhaustive product in a fixed nesting order.
    pub fn points(&self) -> Result<Vec<HyperParams>> {
        if [self.learning_rate.len(), self.hidden.len(), self.layers.len(), self.batch_size.len(), self.dropout.len(), self.l2.len()]
            .contains(&0)
        {
            return Err(Error::Config("every grid axis needs at least one value".into()));
        }
        let mut out = Vec::new();
        for &learning_rate in &self.learning_rate {
            for &hidden in &self.hidden {
                for &layers in &self.layers {
                    for &batch_size in &self.batch_size {
                        for &dropout in &self.dropout {
                            for &l2 in &self.l2 {
                                let hp = HyperParams { learning_rate, hidden, layers, batch_size, dropout, l2, ..self.base.clone() };
                                hp.validate()?;
                                out.push(hp);
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug)]
pub struct GridOutcome {
    pub best: usize,
    pub reports: Vec<TrainReport>,
    pub trained: Trained,
}

/// Whether `a` beats `b`: higher validation AUC, then smaller hidden size,
/// larger regularization, lower learning rate.
fn better(a: &TrainReport, b: &TrainReport) -> bool {
    use std::cmp::Ordering::*;
    let (ha, hb) = (&a.hyperparameters, &b.hyperparameters);
    match a.best_validation_auc.total_cmp(&b.best_validation_auc) {
        Greater => return true,
        Less => return false,
        Equal => {}
    }
    match hb.hidden.cmp(&ha.hidden) {
        Greater => return true,
        Less => return false,
        Equal => {}
    }
    match ha.l2.total_cmp(&hb.l2) {
        Greater => return true,
        Less => return false,
        Equal => {}
    }
    ha.learning_rate < hb.learning_rate
}

/// Trains every grid point (in parallel) and returns the best by validation AUC.
pub fn grid_search(
    kind: ModelKind,
    schema: &FeatureSchema,
    grid: &HyperGrid,
    train_set: &[&EncodedExample],
    validation: &[&EncodedExample],
    seed: u64,
) -> Result<GridOutcome> {
    let points = grid.points()?;
    let runs: Vec<Trained> = points
        .par_iter()
        .map(|hp| train(kind, schema, train_set, validation, hp, seed))
        .collect::<Result<_>>()?;
    let mut best = 0;
    for i in 1..runs.len() {
        if better(&runs[i].report, &runs[best].report) {
            best = i;
        }
    }
    let reports = runs.iter().map(|r| r.report.clone()).collect();
    let trained = runs.into_iter().nth(best).expect("non-empty grid");
    Ok(GridOutcome { best, reports, trained })
}

/// Resamples users with replacement, keeping each drawn user's cycles together.
pub fn bootstrap_users<'a>(examples: &[&'a EncodedExample], seed: u64) -> Vec<&'a EncodedExample> {
    let mut by_user: BTreeMap<&str, Vec<&'a EncodedExample>> = BTreeMap::new();
    for e in examples {
        by_user.entry(e.user_id.as_str()).or_default().push(e);
    }
    let users: Vec<&Vec<&EncodedExample>> = by_user.values().collect();
    if users.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "bootstrap", 0));
    (0..users.len()).flat_map(|_| users[rng.random_range(0..users.len())].iter().copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{SparseVec, WINDOW_DAYS};
    use crate::cycles::Label;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn split_keeps_users_whole_and_is_stable() {
        let users: Vec<String> = (0..20_000).map(|i| format!("user{i}")).collect();
        let s = split_by_user(users.iter().map(|u| u.as_str()), 7, SplitFractions::default()).unwrap();
        s.check_disjoint().unwrap();
        assert_eq!(s.train.len() + s.validation.len() + s.test.len(), users.len());
        let frac = s.test.len() as f64 / users.len() as f64;
        assert!((frac - 0.10).abs() <= 0.01, "test fraction {frac}");
        let again = split_by_user(users.iter().map(|u| u.as_str()), 7, SplitFractions::default()).unwrap();
        assert_eq!(s, again);
        let other = split_by_user(users.iter().map(|u| u.as_str()), 8, SplitFractions::default()).unwrap();
        assert_ne!(s.test, other.test);
    }

    #[test]
    fn bad_fractions_rejected() {
        let f = SplitFractions { train: 0.8, validation: 0.3, test: 0.1 };
        assert!(split_by_user(["a"], 0, f).is_err());
    }

    #[test]
    fn batch_counts_and_balance() {
        let labels: Vec<bool> = (0..1000).map(|i| i < 100).collect();
        let b = balanced_batches(&labels, 20, &mut rng(1)).unwrap();
        assert_eq!(b.len(), 10);
        for batch in &b {
            assert_eq!(batch.len(), 20);
            assert_eq!(batch.iter().filter(|&&i| labels[i]).count(), 10);
        }
        let all: BTreeSet<usize> = b.iter().flatten().copied().collect();
        assert_eq!(all.len(), 200);

        let b = balanced_batches(&labels, 32, &mut rng(2)).unwrap();
        assert!(b.iter().all(|x| x.iter().filter(|&&i| labels[i]).count() == 16 && x.len() == 32));
        let b = balanced_batches(&labels, 7, &mut rng(2)).unwrap();
        assert!(b.iter().all(|x| x.iter().filter(|&&i| labels[i]).count() == 4 && x.len() == 7));

        assert!(matches!(balanced_batches(&[false; 10], 4, &mut rng(3)), Err(Error::EmptyClass("positive"))));
        assert!(matches!(balanced_batches(&[true; 10], 4, &mut rng(3)), Err(Error::EmptyClass("negative"))));
    }

    fn toy(schema: &FeatureSchema) -> Vec<EncodedExample> {
        let slot = schema.binary_slot(crate::codec::FeatureId::from_name("sex:unprotected").unwrap()).unwrap();
        (0..20)
            .map(|i| {
                let positive = i % 2 == 0;
                let mut days = vec![SparseVec::default(); WINDOW_DAYS];
                if positive {
                    days[12].set(slot, 1.0);
                } else {
                    days[3].set(slot + 1, 1.0);
                }
                EncodedExample {
                    user_id: format!("u{i}"),
                    start_date: chrono::NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
                    label: if positive { Label::Positive } else { Label::Negative },
                    days,
                    day_mask: [false; WINDOW_DAYS],
                    continuous_means: [None; 3],
                    cycle_inputs: [0.0; 3],
                    user_vector: vec![0.0; schema.user_width()],
                    history: None,
                }
            })
            .collect()
    }

    #[test]
    fn separable_toy_reaches_perfect_auc() {
        let schema = FeatureSchema::default();
        let data = toy(&schema);
        let refs: Vec<&EncodedExample> = data.iter().collect();
        for kind in [ModelKind::Logistic, ModelKind::Lstm] {
            let hp = HyperParams { hidden: 4, batch_size: 4, max_epochs: 200, patience: 200, learning_rate: 0.05, dropout: 0.0, ..Default::default() };
            let t = train(kind, &schema, &refs, &refs, &hp, 1).unwrap();
            let scores: Vec<f64> = refs.iter().map(|e| t.model.predict(&t.params, e).unwrap()).collect();
            let labels: Vec<bool> = refs.iter().map(|e| e.label.is_positive()).collect();
            assert_eq!(auc(&scores, &labels).unwrap(), 1.0, "{kind}");
        }
    }

    #[test]
    fn training_is_reproducible_and_patience_zero_runs_once() {
        let schema = FeatureSchema::default();
        let data = toy(&schema);
        let refs: Vec<&EncodedExample> = data.iter().collect();
        let hp = HyperParams { hidden: 3, batch_size: 4, max_epochs: 5, patience: 5, dropout: 0.2, ..Default::default() };
        let a = train(ModelKind::Bms, &schema, &refs, &refs, &hp, 9).unwrap();
        let b = train(ModelKind::Bms, &schema, &refs, &refs, &hp, 9).unwrap();
        assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
        assert_eq!(a.params, b.params);
        let best = a.report.epochs.iter().map(|e| e.validation_auc).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(a.report.epochs[a.report.chosen_epoch].validation_auc, best);

        let hp0 = HyperParams { patience: 0, ..hp };
        let c = train(ModelKind::Bms, &schema, &refs, &refs, &hp0, 9).unwrap();
        assert_eq!(c.report.epochs.len(), 1);
    }

    #[test]
    fn divergence_is_reported() {
        let schema = FeatureSchema::default();
        let data = toy(&schema);
        let refs: Vec<&EncodedExample> = data.iter().collect();
        let hp = HyperParams { batch_size: 4, max_epochs: 3, learning_rate: f64::MAX, optimizer: Some(OptimizerKind::Momentum), ..Default::default() };
        assert!(matches!(train(ModelKind::Logistic, &schema, &refs, &refs, &hp, 0), Err(Error::Diverged { .. })));
    }

    #[test]
    fn grid_search_selects_and_breaks_ties() {
        let schema = FeatureSchema::default();
        let data = toy(&schema);
        let refs: Vec<&EncodedExample> = data.iter().collect();
        let base = HyperParams { batch_size: 4, max_epochs: 3, patience: 3, learning_rate: 0.05, ..Default::default() };
        let single = grid_search(ModelKind::Logistic, &schema, &HyperGrid::single(base.clone()), &refs, &refs, 1).unwrap();
        assert_eq!(single.reports.len(), 1);
        assert_eq!(single.best, 0);

        let grid = HyperGrid { learning_rate: vec![0.05, 0.01], l2: vec![0.0, 1e-4], ..HyperGrid::single(base) };
        let out = grid_search(ModelKind::Logistic, &schema, &grid, &refs, &refs, 1).unwrap();
        assert_eq!(out.reports.len(), 4);
        let max = out.reports.iter().map(|r| r.best_validation_auc).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.reports[out.best].best_validation_auc, max);
        let winners: Vec<&TrainReport> = out.reports.iter().filter(|r| r.best_validation_auc == max).collect();
        let chosen = &out.reports[out.best].hyperparameters;
        for w in winners {
            let h = &w.hyperparameters;
            assert!(chosen.l2 >= h.l2);
            if chosen.l2 == h.l2 {
                assert!(chosen.learning_rate <= h.learning_rate);
            }
        }
    }

    #[test]
    fn tie_break_order() {
        let report = |auc: f64, hidden: usize, l2: f64, lr: f64| TrainReport {
            model: ModelKind::Lstm,
            seed: 0,
            hyperparameters: HyperParams { hidden, l2, learning_rate: lr, ..Default::default() },
            n_train: 0,
            n_train_positive: 0,
            n_validation: 0,
            n_validation_positive: 0,
            epochs: vec![],
            chosen_epoch: 0,
            best_validation_auc: auc,
            wall_clock_seconds: 0.0,
        };
        assert!(better(&report(0.7, 64, 0.0, 1.0), &report(0.6, 8, 1.0, 0.1)));
        assert!(better(&report(0.7, 8, 0.0, 1.0), &report(0.7, 16, 1.0, 0.1)));
        assert!(better(&report(0.7, 8, 1.0, 1.0), &report(0.7, 8, 0.1, 0.1)));
        assert!(better(&report(0.7, 8, 1.0, 0.1), &report(0.7, 8, 1.0, 1.0)));
        assert!(!better(&report(0.7, 8, 1.0, 0.1), &report(0.7, 8, 1.0, 0.1)));
    }

    #[test]
    fn user_bootstrap_keeps_cycles_together() {
        let schema = FeatureSchema::default();
        let base = toy(&schema);
        let exs: Vec<EncodedExample> = (0..60)
            .map(|i| {
                let mut e = base[i % base.len()].clone();
                e.user_id = format!("u{}", i / 3);
                e
            })
            .collect();
        let refs: Vec<&EncodedExample> = exs.iter().collect();
        let a = bootstrap_users(&refs, 1);
        assert_eq!(a.len(), 60);
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for e in &a {
            *counts.entry(e.user_id.as_str()).or_default() += 1;
        }
        assert!(counts.values().all(|c| c % 3 == 0));
        assert!(counts.len() < 20);
        let ids = |v: &[&EncodedExample]| v.iter().map(|e| e.user_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&bootstrap_users(&refs, 1)));
        assert_ne!(ids(&a), ids(&bootstrap_users(&refs, 2)));
    }
}
