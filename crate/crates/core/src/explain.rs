//! Day-resolved feature attributions.
//!
//! A perturbation delta sets one binary feature on one cycle day to 1 and to
//! 0 for every example and averages the difference in predicted probability.
//! The perturbed day is unmasked in both evaluations, so the delta isolates
//! the feature rather than the presence of the day.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::schema::WINDOW_DAYS;
use crate::codec::{EncodedExample, FeatureId, FeatureSchema, SexType};
use crate::error::{Error, Result};
use crate::linmodel::{lr_coefficient_trend, LinearParams};
use crate::predictors::{Model, ModelKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendUnits {
    /// Change in predicted probability.
    Probability,
    /// Logistic coefficient.
    LogOdds,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendCurve {
    pub feature: String,
    pub model: String,
    pub units: TrendUnits,
    pub n_examples: usize,
    pub values: Vec<f64>,
    /// Bootstrap standard error of each point, when computed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standard_errors: Option<Vec<f64>>,
}

impl TrendCurve {
    pub fn range(&self) -> f64 {
        let max = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        max - min
    }

    /// Day with the largest value (first on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (d, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = d;
            }
        }
        best
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// A trained model with its parameters, precomputing user embeddings for reuse.
pub struct Scorer<'a> {
    pub model: &'a Model,
    pub params: &'a [f64],
    embeddings: Vec<Option<Vec<f64>>>,
}

impl<'a> Scorer<'a> {
    pub fn new(model: &'a Model, params: &'a [f64], examples: &[&EncodedExample]) -> Self {
        let embeddings = if model.kind() == ModelKind::Embedding {
            examples.par_iter().map(|e| model.embed(params, e)).collect()
        } else {
            vec![None; examples.len()]
        };
        Scorer { model, params, embeddings }
    }

    fn score(&self, i: usize, ex: &EncodedExample) -> Result<f64> {
        self.model.predict_with_embedding(self.params, ex, self.embeddings[i].as_deref())
    }
}

fn binary_slot(schema: &FeatureSchema, feature: FeatureId) -> Result<usize> {
    schema
        .binary_slot(feature)
        .ok_or_else(|| Error::NotBinaryFeature(feature.name().to_string()))
}

/// Per-example `Pr(x_bd = 1) − Pr(x_bd = 0)`, in input order.
pub fn perturb_deltas(
    scorer: &Scorer<'_>,
    examples: &[&EncodedExample],
    schema: &FeatureSchema,
    feature: FeatureId,
    day: usize,
) -> Result<Vec<f64>> {
    let slot = binary_slot(schema, feature)?;
    if day >= WINDOW_DAYS {
        return Err(Error::Domain(format!("cycle day {day} outside 0..{WINDOW_DAYS}")));
    }
    examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut x = EncodedExample {
                user_id: String::new(),
                start_date: ex.start_date,
                label: ex.label,
                days: ex.days.clone(),
                day_mask: ex.day_mask,
                continuous_means: ex.continuous_means,
                cycle_inputs: ex.cycle_inputs,
                user_vector: ex.user_vector.clone(),
                history: if scorer.embeddings[i].is_some() { None } else { ex.history.clone() },
            };
            x.day_mask[day] = false;
            x.days[day].set(slot, 1.0);
            let on = scorer.score(i, &x)?;
            x.days[day].set(slot, 0.0);
            let off = scorer.score(i, &x)?;
            Ok(on - off)
        })
        .collect()
}

/// Mean perturbation delta of `feature` on `day` over `examples`.
pub fn perturb_delta(
    scorer: &Scorer<'_>,
    examples: &[&EncodedExample],
    schema: &FeatureSchema,
    feature: FeatureId,
    day: usize,
) -> Result<f64> {
    let d = perturb_deltas(scorer, examples, schema, feature, day)?;
    if d.is_empty() {
        return Err(Error::Domain("no examples to perturb".into()));
    }
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Bootstrap standard error of the mean of `values`.
pub fn bootstrap_se(values: &[f64], replicates: usize, seed: u64) -> f64 {
    let n = values.len();
    if n < 2 || replicates < 2 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<f64> = (0..replicates)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    let m = means.iter().sum::<f64>() / replicates as f64;
    (means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (replicates - 1) as f64).sqrt()
}

/// Perturbation deltas for days 0..23, with bootstrap standard errors when `bootstrap > 0`.
pub fn trend_curve(
    scorer: &Scorer<'_>,
    examples: &[&EncodedExample],
    schema: &FeatureSchema,
    feature: FeatureId,
    bootstrap: usize,
    seed: u64,
) -> Result<TrendCurve> {
    let mut values = Vec::with_capacity(WINDOW_DAYS);
    let mut ses = Vec::with_capacity(WINDOW_DAYS);
    for day in 0..WINDOW_DAYS {
        let d = perturb_deltas(scorer, examples, schema, feature, day)?;
        if d.is_empty() {
            return Err(Error::Domain("no examples to perturb".into()));
        }
        values.push(d.iter().sum::<f64>() / d.len() as f64);
        ses.push(bootstrap_se(&d, bootstrap, seed.wrapping_add(day as u64)));
    }
    Ok(TrendCurve {
        feature: feature.name().to_string(),
        model: scorer.model.kind().name().to_string(),
        units: TrendUnits::Probability,
        n_examples: examples.len(),
        values,
        standard_errors: (bootstrap > 0).then_some(ses),
    })
}

/// Logistic coefficients of `feature` by cycle day.
pub fn lr_trend(params: &LinearParams, schema: &FeatureSchema, feature: FeatureId) -> Result<TrendCurve> {
    Ok(TrendCurve {
        feature: feature.name().to_string(),
        model: ModelKind::Logistic.name().to_string(),
        units: TrendUnits::LogOdds,
        n_examples: 0,
        values: lr_coefficient_trend(params, schema, feature)?.to_vec(),
        standard_errors: None,
    })
}

/// The three logged sex features.
pub fn sex_features() -> [FeatureId; 3] {
    std::array::from_fn(|t| SexType::ALL[t].feature().expect("logged sex type"))
}

/// Plot data for two panels: logistic coefficients and perturbation deltas of one recurrent model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendBundle {
    pub coefficients: Vec<TrendCurve>,
    pub perturbations: Vec<TrendCurve>,
}

impl TrendBundle {
    pub fn build(
        linear: &LinearParams,
        scorer: &Scorer<'_>,
        examples: &[&EncodedExample],
        schema: &FeatureSchema,
        bootstrap: usize,
        seed: u64,
    ) -> Result<Self> {
        let features = sex_features();
        Ok(TrendBundle {
            coefficients: features.iter().map(|&f| lr_trend(linear, schema, f)).collect::<Result<_>>()?,
            perturbations: features
                .iter()
                .map(|&f| trend_curve(scorer, examples, schema, f, bootstrap, seed))
                .collect::<Result<_>>()?,
        })
    }
}

/// `model,feature,units,day,value,standard_error`, one row per curve point.
pub fn trends_csv(curves: &[TrendCurve]) -> String {
    let mut out = String::from("model,feature,units,day,value,standard_error\n");
    for c in curves {
        let units = match c.units {
            TrendUnits::Probability => "probability",
            TrendUnits::LogOdds => "log_odds",
        };
        for (d, v) in c.values.iter().enumerate() {
            let se = c.standard_errors.as_ref().map(|s| format!("{:.9}", s[d])).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{:.9},{}", c.model, c.feature, units, d, v, se);
        }
    }
    out
}

/// Whether a trend curve is distinguishable from refitting noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Flatness {
    pub range: f64,
    pub argmax: usize,
    pub argmin: usize,
    /// Standard deviation of `value[argmax] − value[argmin]` across refits.
    pub range_se: f64,
    pub replicates: usize,
    /// `range < threshold · range_se`, or a constant curve.
    pub flat: bool,
}

/// Compares `curve`'s range with the spread of the same contrast over
/// curves from models refitted on bootstrap resamples.
pub fn flatness(curve: &TrendCurve, replicates: &[TrendCurve], threshold: f64) -> Result<Flatness> {
    if replicates.len() < 2 {
        return Err(Error::Domain("flatness needs at least two replicate curves".into()));
    }
    if replicates.iter().any(|r| r.values.len() != curve.values.len()) {
        return Err(Error::Shape { expected: curve.values.len(), actual: 0, context: "replicate curve length" });
    }
    let argmax = curve.argmax();
    let argmin = (0..curve.values.len()).fold(0, |b, d| if curve.values[d] < curve.values[b] { d } else { b });
    let contrasts: Vec<f64> = replicates.iter().map(|r| r.values[argmax] - r.values[argmin]).collect();
    let n = contrasts.len() as f64;
    let m = contrasts.iter().sum::<f64>() / n;
    let range_se = (contrasts.iter().map(|c| (c - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let range = curve.range();
    Ok(Flatness { range, argmax, argmin, range_se, replicates: replicates.len(), flat: range == 0.0 || range < threshold * range_se })
}
