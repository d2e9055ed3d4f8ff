//! The four predictors behind one interface.
//!
//! All parameters of a model live in one flat vector. [`Model`] knows the
//! layout and exposes prediction, per-batch loss and gradient, and the
//! named segments written to checkpoints.
//!
//! Recurrent inputs are the day row followed by the three standardized cycle
//! means (and the user embedding for [`ModelKind::Embedding`]). The
//! structured model's recurrent input omits the three sex slots: sex enters
//! only through the indicators, so `f_d` cannot absorb the per-type risks.

pub mod bms;
pub mod checkpoint;

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::schema::{HISTORY_DAYS, WINDOW_DAYS};
use crate::codec::{flatten_sparse, EncodedExample, FeatureSchema, SparseVec};
use crate::error::{Error, Result};
use crate::linmodel::{bce_with_logit, LOGIT_CLAMP};
use crate::neural::{dropout_mask, grad_check, sigmoid, GradCheckOptions, GradCheckReport, LstmStack, StepInput};

pub use bms::{bms_probability, SexIndicators, SexSlots};
pub use checkpoint::{Checkpoint, CheckpointHeader, Segment};

use bms::log_survival;

/// Continuous cycle means appended to each recurrent input row.
pub const CYCLE_INPUTS: usize = 3;

/// Floor on the structured probability inside the positive-label loss.
const PROB_FLOOR: f64 = 1e-12;

/// Examples per gradient chunk; chunks are summed in order.
const GRAD_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Logistic,
    Lstm,
    Bms,
    Embedding,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Logistic, ModelKind::Lstm, ModelKind::Bms, ModelKind::Embedding];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Logistic => "logistic",
            ModelKind::Lstm => "lstm",
            ModelKind::Bms => "bms",
            ModelKind::Embedding => "embedding",
        }
    }

    pub fn is_recurrent(self) -> bool {
        self != ModelKind::Logistic
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model `{s}` (expected logistic, lstm, bms or embedding)")))
    }
}

/// Shape of a model; everything needed to rebuild the parameter layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub kind: ModelKind,
    pub day_width: usize,
    pub user_width: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Embedding size (history network hidden size); 0 unless `kind` is embedding.
    pub embedding: usize,
}

impl Architecture {
    pub fn new(kind: ModelKind, schema: &FeatureSchema, hidden: usize, layers: usize, embedding: usize) -> Self {
        let recurrent = kind.is_recurrent();
        Architecture {
            kind,
            day_width: schema.day_width(),
            user_width: schema.user_width(),
            hidden: if recurrent { hidden } else { 0 },
            layers: if recurrent { layers } else { 0 },
            embedding: if kind == ModelKind::Embedding { embedding } else { 0 },
        }
    }

    fn validate(&self) -> Result<()> {
        if self.kind.is_recurrent() && (self.hidden == 0 || self.layers == 0) {
            return Err(Error::Config("hidden size and layer count must be positive".into()));
        }
        if self.kind == ModelKind::Embedding && self.embedding == 0 {
            return Err(Error::Config("embedding size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Layout {
    history: Option<(usize, LstmStack)>,
    lstm: Option<(usize, LstmStack)>,
    head_w: Range<usize>,
    head_b: usize,
    rho: Option<Range<usize>>,
    total: usize,
}

impl Layout {
    fn new(a: &Architecture) -> Self {
        let mut off = 0;
        let mut take = |n: usize| {
            let r = off..off + n;
            off += n;
            r
        };
        let history = (a.kind == ModelKind::Embedding).then(|| {
            let s = LstmStack::new(a.day_width, a.embedding, 1);
            (take(s.param_len()).start, s)
        });
        let lstm = a.kind.is_recurrent().then(|| {
            let s = LstmStack::new(a.day_width + CYCLE_INPUTS + a.embedding, a.hidden, a.layers);
            (take(s.param_len()).start, s)
        });
        let head_w = match a.kind {
            ModelKind::Logistic => take(WINDOW_DAYS * a.day_width + a.user_width),
            ModelKind::Lstm | ModelKind::Embedding => take(a.hidden + a.user_width),
            ModelKind::Bms => take(a.hidden),
        };
        let head_b = take(1).start;
        let rho = (a.kind == ModelKind::Bms).then(|| take(4));
        Layout { history, lstm, head_w, head_b, rho, total: off }
    }
}

/// Per-example forward state kept for the backward pass.
struct Forward {
    prob: f64,
    kind: ForwardKind,
}

enum ForwardKind {
    Logistic { x: SparseVec, z: f64 },
    Plain { tape: crate::neural::LstmTape, hidden: Vec<f64>, drop: Option<Vec<f64>>, z: f64, history: Option<crate::neural::LstmTape> },
    Bms { tape: crate::neural::LstmTape, days: Vec<BmsDay>, log_q: f64 },
}

struct BmsDay {
    t: usize,
    hidden: Vec<f64>,
    drop: Option<Vec<f64>>,
    f: f64,
    s: [bool; 4],
}

/// A model architecture bound to a feature schema.
#[derive(Clone, Debug)]
pub struct Model {
    pub arch: Architecture,
    schema: FeatureSchema,
    sex: SexSlots,
    layout: Layout,
}

impl Model {
    pub fn new(arch: Architecture, schema: &FeatureSchema) -> Result<Self> {
        arch.validate()?;
        if arch.day_width != schema.day_width() || arch.user_width != schema.user_width() {
            return Err(Error::Shape {
                expected: schema.day_width(),
                actual: arch.day_width,
                context: "architecture does not match schema",
            });
        }
        let layout = Layout::new(&arch);
        Ok(Model { sex: SexSlots::new(schema), schema: schema.clone(), layout, arch })
    }

    pub fn kind(&self) -> ModelKind {
        self.arch.kind
    }

    pub fn param_len(&self) -> usize {
        self.layout.total
    }

    /// Seeded initial parameters. The logistic model starts at zero.
    pub fn init(&self, seed: u64) -> Vec<f64> {
        let mut p = vec![0.0; self.param_len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if let Some((off, s)) = &self.layout.history {
            s.init(&mut p[*off..*off + s.param_len()], &mut rng);
        }
        if let Some((off, s)) = &self.layout.lstm {
            s.init(&mut p[*off..*off + s.param_len()], &mut rng);
        }
        if self.kind().is_recurrent() {
            let r = self.layout.head_w.clone();
            let fan_in = r.len();
            crate::neural::init_uniform(&mut p[r], fan_in, &mut rng);
        }
        p
    }

    /// Named parameter segments in storage order.
    pub fn segments(&self) -> Vec<(&'static str, Range<usize>)> {
        let l = &self.layout;
        let mut out = Vec::new();
        if let Some((off, s)) = &l.history {
            out.push(("history_lstm", *off..*off + s.param_len()));
        }
        if let Some((off, s)) = &l.lstm {
            out.push(("lstm", *off..*off + s.param_len()));
        }
        let head = if self.kind() == ModelKind::Bms { "fecundability_head" } else { "head" };
        out.push((head, l.head_w.start..l.head_b + 1));
        if let Some(r) = &l.rho {
            out.push(("risk_logits", r.clone()));
        }
        out
    }

    /// `true` for coordinates subject to L2 shrinkage (all weights; not biases or risk logits).
    pub fn penalized(&self) -> Vec<bool> {
        let mut m = vec![true; self.param_len()];
        for (off, s) in self.layout.history.iter().chain(&self.layout.lstm) {
            for r in s.bias_ranges() {
                m[off + r.start..off + r.end].fill(false);
            }
        }
        m[self.layout.head_b] = false;
        if let Some(r) = &self.layout.rho {
            m[r.clone()].fill(false);
        }
        m
    }

    /// Learned per-type risks `r = σ(ρ)` of the structured model, in [`crate::codec::SexType::ALL`] order.
    pub fn risks(&self, p: &[f64]) -> Option<[f64; 4]> {
        self.layout.rho.as_ref().map(|r| std::array::from_fn(|t| sigmoid(p[r.start + t])))
    }

    /// Day-resolved coefficients (logistic model only).
    pub fn linear_params(&self, p: &[f64], l2_strength: f64) -> Option<crate::linmodel::LinearParams> {
        (self.kind() == ModelKind::Logistic)
            .then(|| crate::linmodel::LinearParams::from_flat(&p[..self.layout.total], l2_strength).ok())
            .flatten()
    }

    fn check(&self, p: &[f64], ex: &EncodedExample) -> Result<()> {
        if p.len() != self.param_len() {
            return Err(Error::Shape { expected: self.param_len(), actual: p.len(), context: "parameter vector" });
        }
        if ex.days.len() != WINDOW_DAYS {
            return Err(Error::Shape { expected: WINDOW_DAYS, actual: ex.days.len(), context: "example days" });
        }
        if ex.user_vector.len() != self.arch.user_width {
            return Err(Error::Shape { expected: self.arch.user_width, actual: ex.user_vector.len(), context: "user vector" });
        }
        Ok(())
    }

    fn step_inputs(&self, ex: &EncodedExample, embedding: Option<&[f64]>) -> Vec<StepInput> {
        let d = self.arch.day_width;
        ex.days
            .iter()
            .map(|row| {
                let mut entries: Vec<(u32, f64)> = row.0.clone();
                if self.kind() == ModelKind::Bms {
                    entries.retain(|(i, _)| !self.sex.0.contains(&(*i as usize)));
                }
                for (k, &v) in ex.cycle_inputs.iter().enumerate() {
                    if v != 0.0 {
                        entries.push(((d + k) as u32, v));
                    }
                }
                if let Some(e) = embedding {
                    entries.extend(e.iter().enumerate().map(|(j, &v)| ((d + CYCLE_INPUTS + j) as u32, v)));
                }
                StepInput { entries }
            })
            .collect()
    }

    fn history_inputs(ex: &EncodedExample) -> Vec<StepInput> {
        match &ex.history {
            Some(h) => h.iter().map(|row| StepInput { entries: row.0.clone() }).collect(),
            None => vec![StepInput::default(); HISTORY_DAYS],
        }
    }

    /// User embedding from the example's 180-day history (embedding model only).
    pub fn embed(&self, p: &[f64], ex: &EncodedExample) -> Option<Vec<f64>> {
        let (off, s) = self.layout.history.as_ref()?;
        let inputs = Self::history_inputs(ex);
        let mask = vec![false; inputs.len()];
        let tape = s.forward(&p[*off..*off + s.param_len()], inputs, &mask, None);
        Some(tape.final_hidden().to_vec())
    }

    fn forward(
        &self,
        p: &[f64],
        ex: &EncodedExample,
        dropout: f64,
        rng: &mut Option<ChaCha8Rng>,
        cached_embedding: Option<&[f64]>,
    ) -> Forward {
        let l = &self.layout;
        let drop_for = |n: usize, rng: &mut Option<ChaCha8Rng>| -> Option<Vec<f64>> {
            match rng {
                Some(r) if dropout > 0.0 => Some(dropout_mask(n, dropout, r)),
                _ => None,
            }
        };
        if self.kind() == ModelKind::Logistic {
            let x = flatten_sparse(ex, &self.schema);
            let z = p[l.head_b] + x.iter().map(|(i, v)| p[l.head_w.start + i] * v).sum::<f64>();
            return Forward { prob: sigmoid(z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)), kind: ForwardKind::Logistic { x, z } };
        }

        let (history, embedding) = match &l.history {
            Some(_) if cached_embedding.is_some() => (None, cached_embedding.map(|e| e.to_vec())),
            Some((off, s)) => {
                let inputs = Self::history_inputs(ex);
                let mask = vec![false; inputs.len()];
                let tape = s.forward(
                    &p[*off..*off + s.param_len()],
                    inputs,
                    &mask,
                    rng.as_mut().filter(|_| dropout > 0.0).map(|r| (dropout, r)),
                );
                let e = tape.final_hidden().to_vec();
                (Some(tape), Some(e))
            }
            None => (None, None),
        };
        let (off, s) = l.lstm.as_ref().expect("recurrent model");
        let lp = &p[*off..*off + s.param_len()];
        let tape = s.forward(
            lp,
            self.step_inputs(ex, embedding.as_deref()),
            &ex.day_mask,
            rng.as_mut().filter(|_| dropout > 0.0).map(|r| (dropout, r)),
        );
        let hs = self.arch.hidden;
        let w = &p[l.head_w.clone()];
        let b = p[l.head_b];

        if self.kind() == ModelKind::Bms {
            let r = self.risks(p).expect("structured model");
            let mut days = Vec::new();
            let mut log_q = 0.0;
            for t in 0..WINDOW_DAYS {
                if ex.day_mask[t] {
                    continue;
                }
                let mut hidden = tape.top_hidden(t).to_vec();
                let drop = drop_for(hs, rng);
                if let Some(m) = &drop {
                    hidden.iter_mut().zip(m).for_each(|(h, m)| *h *= m);
                }
                let f = sigmoid(b + crate::neural::dot(w, &hidden));
                let s = self.sex.day(&ex.days[t], false);
                for k in 0..4 {
                    if s[k] {
                        log_q += log_survival(r[k], f).0;
                    }
                }
                days.push(BmsDay { t, hidden, drop, f, s });
            }
            return Forward { prob: -log_q.exp_m1(), kind: ForwardKind::Bms { tape, days, log_q } };
        }

        let mut hidden = tape.final_hidden().to_vec();
        let drop = drop_for(hs, rng);
        if let Some(m) = &drop {
            hidden.iter_mut().zip(m).for_each(|(h, m)| *h *= m);
        }
        let z = b + crate::neural::dot(&w[..hs], &hidden) + crate::neural::dot(&w[hs..], &ex.user_vector);
        Forward { prob: sigmoid(z), kind: ForwardKind::Plain { tape, hidden, drop, z, history } }
    }

    fn loss_of(fwd: &Forward, y: f64) -> f64 {
        match &fwd.kind {
            ForwardKind::Logistic { z, .. } | ForwardKind::Plain { z, .. } => bce_with_logit(*z, y),
            ForwardKind::Bms { log_q, .. } => {
                if y > 0.5 {
                    -fwd.prob.max(PROB_FLOOR).ln()
                } else {
                    -log_q
                }
            }
        }
    }

    /// Backward pass of one example; `scale` multiplies the loss gradient.
    fn backward(&self, p: &[f64], ex: &EncodedExample, fwd: Forward, y: f64, scale: f64, grad: &mut [f64]) {
        let l = &self.layout;
        let hs = self.arch.hidden;
        match fwd.kind {
            ForwardKind::Logistic { x, z } => {
                let dz = (sigmoid(z) - y) * scale;
                for (i, v) in x.iter() {
                    grad[l.head_w.start + i] += dz * v;
                }
                grad[l.head_b] += dz;
            }
            ForwardKind::Plain { tape, hidden, drop, z, history } => {
                let dz = (sigmoid(z) - y) * scale;
                let w = &p[l.head_w.clone()];
                for (k, h) in hidden.iter().enumerate() {
                    grad[l.head_w.start + k] += dz * h;
                }
                for (k, u) in ex.user_vector.iter().enumerate() {
                    grad[l.head_w.start + hs + k] += dz * u;
                }
                grad[l.head_b] += dz;
                let mut dh = vec![0.0; WINDOW_DAYS * hs];
                let last = &mut dh[(WINDOW_DAYS - 1) * hs..];
                for k in 0..hs {
                    last[k] = dz * w[k] * drop.as_ref().map_or(1.0, |m| m[k]);
                }
                self.backward_recurrent(p, tape, history, &dh, grad);
            }
            ForwardKind::Bms { tape, days, log_q } => {
                let prob = fwd.prob;
                let d_log_q = if y > 0.5 {
                    if prob < PROB_FLOOR {
                        0.0
                    } else {
                        log_q.exp() / prob
                    }
                } else {
                    -1.0
                } * scale;
                let r = self.risks(p).expect("structured model");
                let rho = l.rho.clone().expect("structured model");
                let w = &p[l.head_w.clone()];
                let mut dh = vec![0.0; WINDOW_DAYS * hs];
                for day in &days {
                    let mut df = 0.0;
                    for k in 0..4 {
                        if !day.s[k] || log_survival(r[k], day.f).1 {
                            continue;
                        }
                        let q = 1.0 - r[k] * day.f;
                        df -= r[k] / q;
                        grad[rho.start + k] += d_log_q * (-day.f / q) * r[k] * (1.0 - r[k]);
                    }
                    let dz = d_log_q * df * day.f * (1.0 - day.f);
                    for (k, h) in day.hidden.iter().enumerate() {
                        grad[l.head_w.start + k] += dz * h;
                    }
                    grad[l.head_b] += dz;
                    let row = &mut dh[day.t * hs..(day.t + 1) * hs];
                    for k in 0..hs {
                        row[k] = dz * w[k] * day.drop.as_ref().map_or(1.0, |m| m[k]);
                    }
                }
                self.backward_recurrent(p, tape, None, &dh, grad);
            }
        }
    }

    fn backward_recurrent(
        &self,
        p: &[f64],
        tape: crate::neural::LstmTape,
        history: Option<crate::neural::LstmTape>,
        dh: &[f64],
        grad: &mut [f64],
    ) {
        let l = &self.layout;
        let (off, s) = l.lstm.as_ref().expect("recurrent model");
        let range = *off..*off + s.param_len();
        let d = self.arch.day_width + CYCLE_INPUTS;
        let input_range = history.as_ref().map(|_| d..d + self.arch.embedding);
        let dx = s.backward(&p[range.clone()], tape, dh, &mut grad[range], input_range);
        if let (Some(htape), Some(dx)) = (history, dx) {
            let (hoff, hs) = l.history.as_ref().expect("embedding model");
            let e = self.arch.embedding;
            let steps = htape.steps();
            let mut dhist = vec![0.0; steps * e];
            let last = &mut dhist[(steps - 1) * e..];
            for t in 0..WINDOW_DAYS {
                for j in 0..e {
                    last[j] += dx[t * e + j];
                }
            }
            let hrange = *hoff..*hoff + hs.param_len();
            hs.backward(&p[hrange.clone()], htape, &dhist, &mut grad[hrange], None);
        }
    }

    /// Probability of a positive test after this cycle.
    pub fn predict(&self, p: &[f64], ex: &EncodedExample) -> Result<f64> {
        self.check(p, ex)?;
        Ok(self.forward(p, ex, 0.0, &mut None, None).prob)
    }

    /// As [`Model::predict`] with a precomputed user embedding (ignored by other variants).
    ///
    /// The example's own history is not read when `embedding` is given.
    pub fn predict_with_embedding(&self, p: &[f64], ex: &EncodedExample, embedding: Option<&[f64]>) -> Result<f64> {
        self.check(p, ex)?;
        if let Some(e) = embedding {
            if e.len() != self.arch.embedding {
                return Err(Error::Shape { expected: self.arch.embedding, actual: e.len(), context: "user embedding" });
            }
        }
        Ok(self.forward(p, ex, 0.0, &mut None, embedding.filter(|_| self.layout.history.is_some())).prob)
    }

    /// Predictions in input order, computed in parallel.
    pub fn predict_all<E: std::borrow::Borrow<EncodedExample> + Sync>(&self, p: &[f64], examples: &[E]) -> Result<Vec<f64>> {
        examples.par_iter().map(|ex| self.predict(p, ex.borrow())).collect()
    }

    /// Per-day fecundability `f_d` of the structured model (`None` on masked days).
    pub fn fecundability(&self, p: &[f64], ex: &EncodedExample) -> Result<Option<Vec<Option<f64>>>> {
        self.check(p, ex)?;
        if self.kind() != ModelKind::Bms {
            return Ok(None);
        }
        let fwd = self.forward(p, ex, 0.0, &mut None, None);
        let ForwardKind::Bms { days, .. } = fwd.kind else { unreachable!() };
        let mut out = vec![None; WINDOW_DAYS];
        for d in days {
            out[d.t] = Some(d.f);
        }
        Ok(Some(out))
    }

    /// Mean cross-entropy over `batch` plus `(l2/2)·Σ w²` over penalized weights, and its gradient.
    ///
    /// With `dropout > 0`, example `i` draws its masks from a stream seeded by
    /// `(seed, i)`. Chunks are reduced in a fixed order, so the result does not
    /// depend on the number of threads.
    pub fn loss_grad(
        &self,
        p: &[f64],
        batch: &[(&EncodedExample, f64)],
        l2: f64,
        dropout: f64,
        seed: u64,
    ) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Domain("empty batch".into()));
        }
        for (ex, _) in batch {
            self.check(p, ex)?;
        }
        let scale = 1.0 / batch.len() as f64;
        let parts: Vec<(f64, Vec<f64>)> = batch
            .par_chunks(GRAD_CHUNK)
            .enumerate()
            .map(|(c, chunk)| {
                let mut g = vec![0.0; p.len()];
                let mut loss = 0.0;
                for (j, (ex, y)) in chunk.iter().enumerate() {
                    let mut rng = (dropout > 0.0).then(|| example_rng(seed, c * GRAD_CHUNK + j));
                    let fwd = self.forward(p, ex, dropout, &mut rng, None);
                    loss += Self::loss_of(&fwd, *y);
                    self.backward(p, ex, fwd, *y, scale, &mut g);
                }
                (loss, g)
            })
            .collect();
        let mut grad = vec![0.0; p.len()];
        let mut loss = 0.0;
        for (l, g) in parts {
            loss += l;
            crate::neural::axpy(&mut grad, 1.0, &g);
        }
        loss *= scale;
        if l2 > 0.0 {
            for ((gi, &wi), pen) in grad.iter_mut().zip(p).zip(self.penalized()) {
                if pen {
                    loss += 0.5 * l2 * wi * wi;
                    *gi += l2 * wi;
                }
            }
        }
        Ok((loss, grad))
    }

    /// Finite-difference check of [`Model::loss_grad`] at `p` without dropout.
    pub fn grad_check(
        &self,
        p: &[f64],
        batch: &[(&EncodedExample, f64)],
        l2: f64,
        opts: &GradCheckOptions,
    ) -> Result<GradCheckReport> {
        let (_, analytic) = self.loss_grad(p, batch, l2, 0.0, 0)?;
        Ok(grad_check(
            p,
            &analytic,
            |q| self.loss_grad(q, batch, l2, 0.0, 0).map(|r| r.0).unwrap_or(f64::NAN),
            opts,
        ))
    }
}

fn example_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}
