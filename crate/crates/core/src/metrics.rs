//! Ranking and stratification metrics on held-out predictions.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability that a random positive outscores a random negative, ties counting ½.
///
/// Computed from midranks in `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape { expected: labels.len(), actual: scores.len(), context: "auc scores" });
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Domain(format!("score {s}")));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 {
        return Err(Error::EmptyClass("positive"));
    }
    if n_neg == 0 {
        return Err(Error::EmptyClass("negative"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; the tie group i..=j shares the mean rank.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum += mid * pos_in_group as f64;
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Chance of at least one pregnancy over six independent cycles at per-cycle rate `p`.
pub fn six_cycle(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
    }
    if p <= 0.5 {
        // Expanded 1 − (1−p)⁶ avoids cancellation for small p.
        Ok(p * (6.0 + p * (-15.0 + p * (20.0 + p * (-15.0 + p * (6.0 - p))))))
    } else {
        Ok(1.0 - (1.0 - p).powi(6))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decile {
    /// 0 is the lowest-scoring tenth.
    pub index: usize,
    pub count: usize,
    pub positives: usize,
    pub rate: f64,
    pub six_cycle_rate: f64,
    pub min_score: f64,
    pub max_score: f64,
}

/// Ten equal-count groups by ascending score (ties kept in input order).
///
/// Group `g` holds sorted positions `⌊g·n/10⌋ .. ⌊(g+1)·n/10⌋`.
pub fn decile_stratify(scores: &[f64], labels: &[bool]) -> Result<Vec<Decile>> {
    if scores.len() != labels.len() {
        return Err(Error::Shape { expected: labels.len(), actual: scores.len(), context: "decile scores" });
    }
    let n = scores.len();
    if n < 10 {
        return Err(Error::Domain(format!("{n} examples; deciles need at least 10")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    (0..10)
        .map(|g| {
            let group = &order[g * n / 10..(g + 1) * n / 10];
            let positives = group.iter().filter(|&&i| labels[i]).count();
            let rate = positives as f64 / group.len() as f64;
            Ok(Decile {
                index: g,
                count: group.len(),
                positives,
                rate,
                six_cycle_rate: six_cycle(rate)?,
                min_score: scores[group[0]],
                max_score: scores[*group.last().expect("non-empty decile")],
            })
        })
        .collect()
}

/// One score and label per user: mean predicted probability and mean outcome.
///
/// Returns `(user_ids, mean score, positive rate)` in user-id order.
pub fn per_user(user_ids: &[&str], scores: &[f64], labels: &[bool]) -> (Vec<String>, Vec<f64>, Vec<f64>) {
    let mut acc: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
    for ((u, s), l) in user_ids.iter().zip(scores).zip(labels) {
        let e = acc.entry(u).or_default();
        e.0 += s;
        e.1 += *l as u8 as f64;
        e.2 += 1;
    }
    let mut ids = Vec::new();
    let mut mean = Vec::new();
    let mut rate = Vec::new();
    for (u, (s, l, c)) in acc {
        ids.push(u.to_string());
        mean.push(s / c as f64);
        rate.push(l / c as f64);
    }
    (ids, mean, rate)
}

/// Decile table over users: each user weighs once, with their mean score and cycle positive rate.
pub fn decile_stratify_users(user_ids: &[&str], scores: &[f64], labels: &[bool]) -> Result<Vec<Decile>> {
    let (_, mean, rate) = per_user(user_ids, scores, labels);
    let n = mean.len();
    if n < 10 {
        return Err(Error::Domain(format!("{n} users; deciles need at least 10")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| mean[a].total_cmp(&mean[b]));
    (0..10)
        .map(|g| {
            let group = &order[g * n / 10..(g + 1) * n / 10];
            let r = group.iter().map(|&i| rate[i]).sum::<f64>() / group.len() as f64;
            Ok(Decile {
                index: g,
                count: group.len(),
                positives: group.iter().filter(|&&i| rate[i] > 0.0).count(),
                rate: r,
                six_cycle_rate: six_cycle(r)?,
                min_score: mean[group[0]],
                max_score: mean[*group.last().expect("non-empty decile")],
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratification {
    PerCycle,
    PerUser,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub model: String,
    pub split: String,
    pub n: usize,
    pub positives: usize,
    pub auc: f64,
    pub stratification: Stratification,
    pub deciles: Vec<Decile>,
}

impl EvalResult {
    pub fn top(&self) -> &Decile {
        self.deciles.last().expect("ten deciles")
    }

    pub fn bottom(&self) -> &Decile {
        &self.deciles[0]
    }
}

pub fn evaluate(
    model: &str,
    split: &str,
    user_ids: &[&str],
    scores: &[f64],
    labels: &[bool],
    stratification: Stratification,
) -> Result<EvalResult> {
    let deciles = match stratification {
        Stratification::PerCycle => decile_stratify(scores, labels)?,
        Stratification::PerUser => decile_stratify_users(user_ids, scores, labels)?,
    };
    Ok(EvalResult {
        model: model.to_string(),
        split: split.to_string(),
        n: scores.len(),
        positives: labels.iter().filter(|l| **l).count(),
        auc: auc(scores, labels)?,
        stratification,
        deciles,
    })
}

/// Table with one row per model: AUC, single-cycle and six-cycle rates of the top and bottom deciles.
pub fn results_csv(results: &[EvalResult]) -> String {
    let mut out = String::from("model,auc,single_cycle_top,single_cycle_bottom,six_cycle_top,six_cycle_bottom\n");
    for r in results {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.model,
            r.auc,
            r.top().rate,
            r.bottom().rate,
            r.top().six_cycle_rate,
            r.bottom().six_cycle_rate
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair_count(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 5], &[true, false, true, false, false]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::EmptyClass("negative"))));
        assert!(matches!(auc(&[0.1, 0.2], &[false, false]), Err(Error::EmptyClass("positive"))));
    }

    #[test]
    fn auc_matches_pair_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = rng.random_range(2..=500);
            let levels = rng.random_range(2..50);
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
            labels[0] = true;
            labels[1] = false;
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
            let a = auc(&scores, &labels).unwrap();
            assert!((a - pair_count(&scores, &labels)).abs() <= 1e-12);
        }
    }

    #[test]
    fn six_cycle_values() {
        let v = six_cycle(0.2).unwrap();
        assert!((v - 0.737856).abs() <= f64::EPSILON * 0.737856);
        assert_eq!(format!("{v:.6}"), "0.737856");
        assert_eq!(six_cycle(0.0).unwrap(), 0.0);
        assert_eq!(six_cycle(1.0).unwrap(), 1.0);
        assert!(six_cycle(-0.1).is_err());
        assert!(six_cycle(1.1).is_err());
        assert!((six_cycle(0.3).unwrap() - 0.882351).abs() < 1e-6);
    }

    #[test]
    fn deciles_cases() {
        let scores: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let d = decile_stratify(&scores, &[true; 10]).unwrap();
        assert!(d.iter().all(|g| g.count == 1 && g.rate == 1.0));
        for (g, dec) in d.iter().enumerate() {
            assert_eq!(dec.min_score, g as f64);
        }
        assert!(decile_stratify(&scores[..9], &[true; 9]).is_err());

        let scores = vec![0.5; 25];
        let labels: Vec<bool> = (0..25).map(|i| i >= 20).collect();
        let d = decile_stratify(&scores, &labels).unwrap();
        assert_eq!(d.iter().map(|g| g.count).sum::<usize>(), 25);
        assert_eq!(d[9].rate, 1.0);
        assert_eq!(d[0].rate, 0.0);
    }

    #[test]
    fn per_user_deciles_weigh_users_once() {
        let ids: Vec<String> = (0..20).map(|i| format!("u{i:02}")).collect();
        let mut users: Vec<&str> = ids.iter().map(|s| s.as_str()).collect();
        users.extend(std::iter::repeat_n("u19", 30));
        let scores: Vec<f64> = (0..users.len()).map(|i| if i < 20 { i as f64 } else { 19.0 }).collect();
        let labels: Vec<bool> = (0..users.len()).map(|i| i >= 18).collect();
        let d = decile_stratify_users(&users, &scores, &labels).unwrap();
        assert_eq!(d.iter().map(|g| g.count).sum::<usize>(), 20);
        assert_eq!(d[9].rate, 1.0);
    }

    #[test]
    fn csv_has_one_row_per_model() {
        let scores: Vec<f64> = (0..40).map(|i| i as f64 / 40.0).collect();
        let labels: Vec<bool> = (0..40).map(|i| i % 3 == 0).collect();
        let users: Vec<&str> = vec!["u"; 40];
        let r = evaluate("lstm", "test", &users, &scores, &labels, Stratification::PerCycle).unwrap();
        let csv = results_csv(&[r.clone(), r]);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("lstm,"));
    }

    fn scored(seed: u64, n: usize) -> (Vec<f64>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        ((0..n).map(|_| rng.random_range(-3.0..3.0)).collect(), labels)
    }

    proptest! {
        #[test]
        fn auc_rank_invariant(seed in 0u64..500, n in 2usize..200) {
            let (s, l) = scored(seed, n);
            let t: Vec<f64> = s.iter().map(|x| x.exp() * 3.0 + 1.0).collect();
            prop_assert!((auc(&s, &l).unwrap() - auc(&t, &l).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn auc_of_negated_scores_complements(seed in 0u64..500, n in 2usize..200) {
            let (s, l) = scored(seed, n);
            let neg: Vec<f64> = s.iter().map(|x| -x).collect();
            prop_assert!((auc(&s, &l).unwrap() + auc(&neg, &l).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn six_cycle_monotone_and_dominant(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(six_cycle(lo).unwrap() <= six_cycle(hi).unwrap() + 1e-15);
            prop_assert!(six_cycle(a).unwrap() >= a - 1e-15);
        }

        #[test]
        fn decile_counts_sum(seed in 0u64..500, n in 10usize..300) {
            let (s, l) = scored(seed, n);
            let d = decile_stratify(&s, &l).unwrap();
            prop_assert_eq!(d.iter().map(|g| g.count).sum::<usize>(), n);
            let (mn, mx) = (d.iter().map(|g| g.count).min().unwrap(), d.iter().map(|g| g.count).max().unwrap());
            prop_assert!(mx - mn <= 1);
            prop_assert!(d.iter().all(|g| (0.0..=1.0).contains(&g.rate)));
        }
    }
}
