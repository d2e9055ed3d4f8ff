//! Cycle segmentation, pregnancy-test labeling and 24-day example slicing.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::codec::schema::{FeatureId, HISTORY_DAYS, WINDOW_DAYS};
use crate::error::{Error, Result};
use crate::ingest::{DailyLog, LogValue};

/// Bleeding-free days required before a bleeding day opens a new cycle.
pub const START_GAP_DAYS: u64 = 7;

/// Pregnancy tests count for a cycle only after this cycle day.
pub const LABEL_AFTER_DAY: u64 = 24;

/// Right edge of the test window for the final observed cycle, in cycle days.
pub const FINAL_CYCLE_WINDOW_END: u64 = 48;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cycle {
    pub user_id: String,
    pub start_date: NaiveDate,
    pub next_start_date: Option<NaiveDate>,
}

impl Cycle {
    /// `next_start − start`, absent for the final observed cycle.
    pub fn length_days(&self) -> Option<i64> {
        self.next_start_date
            .map(|n| (n - self.start_date).num_days())
    }

    /// Half-open test window `(start + 24, end]`.
    pub fn test_window(&self) -> (NaiveDate, NaiveDate) {
        let open = self.start_date + Days::new(LABEL_AFTER_DAY);
        let end = match self.next_start_date {
            Some(n) => n + Days::new(LABEL_AFTER_DAY),
            None => self.start_date + Days::new(FINAL_CYCLE_WINDOW_END),
        };
        (open, end)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn as_f64(self) -> f64 {
        match self {
            Label::Positive => 1.0,
            Label::Negative => 0.0,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledCycle {
    pub cycle: Cycle,
    pub label: Label,
    /// The test that decided the label.
    pub test_date: NaiveDate,
}

/// Pregnancy test outcome on a date.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PregnancyTest {
    pub date: NaiveDate,
    pub positive: bool,
}

impl PregnancyTest {
    pub fn from_log(log: &DailyLog) -> Option<Self> {
        if log.feature == FeatureId::pregnancy_positive() {
            Some(PregnancyTest { date: log.date, positive: true })
        } else if log.feature == FeatureId::pregnancy_negative() {
            Some(PregnancyTest { date: log.date, positive: false })
        } else {
            None
        }
    }
}

/// A date is a cycle start iff bleeding is logged on it and on none of the 7 days before.
pub fn detect_cycle_starts(user_logs: &[DailyLog]) -> Vec<NaiveDate> {
    let bleeding: BTreeSet<NaiveDate> = user_logs
        .iter()
        .filter(|l| l.feature.is_bleeding())
        .map(|l| l.date)
        .collect();
    let mut starts = Vec::new();
    for &day in &bleeding {
        let from = day - Days::new(START_GAP_DAYS);
        if bleeding.range(from..day).next().is_none() {
            starts.push(day);
        }
    }
    starts
}

pub fn build_cycles(user_id: &str, starts: &[NaiveDate]) -> Vec<Cycle> {
    starts
        .iter()
        .enumerate()
        .map(|(i, &start)| Cycle {
            user_id: user_id.to_string(),
            start_date: start,
            next_start_date: starts.get(i + 1).copied(),
        })
        .collect()
}

/// Days since the cycle start; 0 on the start date itself.
pub fn cycle_day(date: NaiveDate, cycle: &Cycle) -> Result<u32> {
    if date < cycle.start_date {
        return Err(Error::BeforeCycleStart {
            date,
            start: cycle.start_date,
        });
    }
    Ok((date - cycle.start_date).num_days() as u32)
}

/// Labels cycles from the tests falling in each cycle's window.
///
/// Positive if any positive test lies in the window, negative if only
/// negative tests do. Cycles without a test in the window, and cycles with a
/// positive test on or before day 24, are dropped.
pub fn label_cycles(cycles: &[Cycle], tests: &[PregnancyTest]) -> Vec<LabeledCycle> {
    let mut sorted = tests.to_vec();
    sorted.sort_by_key(|t| (t.date, !t.positive));
    let mut out = Vec::new();
    for cycle in cycles {
        let (open, end) = cycle.test_window();
        let early_positive = sorted
            .iter()
            .any(|t| t.positive && t.date >= cycle.start_date && t.date <= open);
        if early_positive {
            continue;
        }
        let in_window = || sorted.iter().filter(|t| t.date > open && t.date <= end);
        if let Some(t) = in_window().find(|t| t.positive) {
            out.push(LabeledCycle {
                cycle: cycle.clone(),
                label: Label::Positive,
                test_date: t.date,
            });
        } else if let Some(t) = in_window().next() {
            out.push(LabeledCycle {
                cycle: cycle.clone(),
                label: Label::Negative,
                test_date: t.date,
            });
        }
    }
    out
}

/// The logs of one day, one value per feature. Several values of one
/// continuous feature on the same day are averaged.
pub type DaySlot = BTreeMap<FeatureId, LogValue>;

/// A labeled cycle with its first 24 days of logs attached.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawExample {
    pub user_id: String,
    pub start_date: NaiveDate,
    pub label: Label,
    pub test_date: NaiveDate,
    pub days: Vec<DaySlot>,
    /// `true` for days at or past the next cycle start.
    pub mask: [bool; WINDOW_DAYS],
    /// The 180 calendar days before `start_date`, oldest first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history: Option<Vec<DaySlot>>,
}

/// Collapses logs into per-date slots, skipping pregnancy tests.
fn slots_by_date(user_logs: &[DailyLog]) -> BTreeMap<NaiveDate, DaySlot> {
    let mut sums: BTreeMap<NaiveDate, BTreeMap<FeatureId, (f64, usize)>> = BTreeMap::new();
    for l in user_logs.iter().filter(|l| !l.feature.is_pregnancy_test()) {
        let e = sums.entry(l.date).or_default().entry(l.feature).or_insert((0.0, 0));
        if let LogValue::Real(v) = l.value {
            e.0 += v;
        }
        e.1 += 1;
    }
    sums.into_iter()
        .map(|(date, feats)| {
            let slot = feats
                .into_iter()
                .map(|(f, (sum, n))| {
                    let value = if f.is_continuous() {
                        LogValue::Real(sum / n as f64)
                    } else {
                        LogValue::Unit
                    };
                    (f, value)
                })
                .collect();
            (date, slot)
        })
        .collect()
}

/// Slices each labeled cycle's first 24 days out of the user's logs.
///
/// Days on or after the next cycle start are masked and left empty.
/// Pregnancy tests never appear in a slot.
pub fn build_examples(
    labeled: &[LabeledCycle],
    user_logs: &[DailyLog],
    with_history: bool,
) -> Vec<RawExample> {
    let by_date = slots_by_date(user_logs);
    let slot_at = |date: NaiveDate| by_date.get(&date).cloned().unwrap_or_default();
    labeled
        .iter()
        .map(|lc| {
            let start = lc.cycle.start_date;
            let mut mask = [false; WINDOW_DAYS];
            let days = (0..WINDOW_DAYS)
                .map(|d| {
                    let date = start + Days::new(d as u64);
                    if lc.cycle.next_start_date.is_some_and(|n| date >= n) {
                        mask[d] = true;
                        DaySlot::new()
                    } else {
                        slot_at(date)
                    }
                })
                .collect();
            let history = with_history.then(|| {
                (0..HISTORY_DAYS)
                    .map(|i| slot_at(start - Days::new((HISTORY_DAYS - i) as u64)))
                    .collect()
            });
            RawExample {
                user_id: lc.cycle.user_id.clone(),
                start_date: start,
                label: lc.label,
                test_date: lc.test_date,
                days,
                mask,
                history,
            }
        })
        .collect()
}

/// Segments, labels and slices one user's (filtered, date-sorted or not) logs.
pub fn examples_for_user(user_id: &str, user_logs: &[DailyLog], with_history: bool) -> Vec<RawExample> {
    let starts = detect_cycle_starts(user_logs);
    let cycles = build_cycles(user_id, &starts);
    let tests: Vec<PregnancyTest> = user_logs.iter().filter_map(PregnancyTest::from_log).collect();
    let labeled = label_cycles(&cycles, &tests);
    build_examples(&labeled, user_logs, with_history)
}

/// Groups logs by user, preserving each user's log order.
pub fn group_by_user(logs: Vec<DailyLog>) -> BTreeMap<String, Vec<DailyLog>> {
    let mut out: BTreeMap<String, Vec<DailyLog>> = BTreeMap::new();
    for l in logs {
        out.entry(l.user_id.clone()).or_default().push(l);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn bleed(dates: &[&str]) -> Vec<DailyLog> {
        let f = FeatureId::parse("period:medium").unwrap();
        dates.iter().map(|s| DailyLog::binary("u", d(s), f)).collect()
    }

    /// Day-by-day scan: a start is a bleeding day whose previous 7 days are all dry.
    fn brute_force_starts(bleeding: &BTreeSet<NaiveDate>) -> Vec<NaiveDate> {
        let (Some(first), Some(last)) = (bleeding.first(), bleeding.last()) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        let mut day = *first;
        while day <= *last {
            if bleeding.contains(&day)
                && (1..=7).all(|k| !bleeding.contains(&(day - Days::new(k))))
            {
                out.push(day);
            }
            day = day + Days::new(1);
        }
        out
    }

    #[test]
    fn may_example_starts() {
        let logs = bleed(&["2020-05-01", "2020-05-02", "2020-05-29"]);
        assert_eq!(detect_cycle_starts(&logs), vec![d("2020-05-01"), d("2020-05-29")]);
    }

    #[test]
    fn six_day_gap_is_same_cycle() {
        let logs = bleed(&["2020-05-01", "2020-05-07"]);
        assert_eq!(detect_cycle_starts(&logs), vec![d("2020-05-01")]);
        let set: BTreeSet<NaiveDate> = logs.iter().map(|l| l.date).collect();
        assert_eq!(brute_force_starts(&set), vec![d("2020-05-01")]);
    }

    #[test]
    fn single_bleeding_day_and_no_bleeding() {
        assert_eq!(detect_cycle_starts(&bleed(&["2020-05-01"])), vec![d("2020-05-01")]);
        let f = FeatureId::parse("emotion:happy").unwrap();
        assert!(detect_cycle_starts(&[DailyLog::binary("u", d("2020-05-01"), f)]).is_empty());
    }

    #[test]
    fn starts_match_brute_force_on_random_patterns() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let base = d("2020-01-01");
            let set: BTreeSet<NaiveDate> = (0..120)
                .filter(|_| rng.random_bool(0.25))
                .map(|k| base + Days::new(k))
                .collect();
            let logs: Vec<DailyLog> = set
                .iter()
                .map(|&day| DailyLog::binary("u", day, FeatureId::parse("period:light").unwrap()))
                .collect();
            let starts = detect_cycle_starts(&logs);
            assert_eq!(starts, brute_force_starts(&set));
            for w in starts.windows(2) {
                assert!((w[1] - w[0]).num_days() >= 8);
            }
        }
    }

    #[test]
    fn cycle_day_arithmetic() {
        let c = Cycle {
            user_id: "u".into(),
            start_date: d("2020-05-01"),
            next_start_date: None,
        };
        assert_eq!(cycle_day(d("2020-05-01"), &c).unwrap(), 0);
        assert_eq!(cycle_day(d("2020-05-15"), &c).unwrap(), 14);
        assert!(cycle_day(d("2020-04-30"), &c).is_err());
    }

    fn cycle(start: NaiveDate, len: Option<u64>) -> Cycle {
        Cycle {
            user_id: "u".into(),
            start_date: start,
            next_start_date: len.map(|l| start + Days::new(l)),
        }
    }

    fn test_at(start: NaiveDate, day: u64, positive: bool) -> PregnancyTest {
        PregnancyTest {
            date: start + Days::new(day),
            positive,
        }
    }

    #[test]
    fn positive_after_next_start_counts_for_this_cycle() {
        let s = d("2020-05-01");
        let out = label_cycles(&[cycle(s, Some(28))], &[test_at(s, 30, true)]);
        assert_eq!(out[0].label, Label::Positive);
        assert_eq!(out[0].test_date, s + Days::new(30));
    }

    #[test]
    fn negative_only_window() {
        let s = d("2020-05-01");
        let out = label_cycles(&[cycle(s, Some(28))], &[test_at(s, 26, false)]);
        assert_eq!(out[0].label, Label::Negative);
    }

    #[test]
    fn early_test_leaves_cycle_unlabeled() {
        let s = d("2020-05-01");
        assert!(label_cycles(&[cycle(s, Some(28))], &[test_at(s, 10, false)]).is_empty());
    }

    #[test]
    fn short_cycle_masks_tail_and_excludes_tests() {
        let s = d("2020-05-01");
        let c = cycle(s, Some(20));
        let lc = LabeledCycle {
            cycle: c,
            label: Label::Negative,
            test_date: s + Days::new(30),
        };
        let happy = FeatureId::parse("emotion:happy").unwrap();
        let mut logs: Vec<DailyLog> = (0..30)
            .map(|k| DailyLog::binary("u", s + Days::new(k), happy))
            .collect();
        logs.push(DailyLog::binary("u", s + Days::new(5), FeatureId::pregnancy_negative()));
        let ex = &build_examples(&[lc], &logs, false)[0];
        assert_eq!(ex.days.len(), 24);
        for day in 0..24 {
            assert_eq!(ex.mask[day], day >= 20, "day {day}");
            assert_eq!(ex.days[day].is_empty(), day >= 20);
        }
        assert!(ex.days[5].keys().all(|f| !f.is_pregnancy_test()));
        assert_eq!(ex.days[5].len(), 1);
    }

    #[test]
    fn history_covers_180_days_before_start() {
        let s = d("2020-07-01");
        let lc = LabeledCycle {
            cycle: cycle(s, Some(28)),
            label: Label::Negative,
            test_date: s + Days::new(27),
        };
        let happy = FeatureId::parse("emotion:happy").unwrap();
        let logs = vec![
            DailyLog::binary("u", s - Days::new(1), happy),
            DailyLog::binary("u", s - Days::new(180), happy),
            DailyLog::binary("u", s - Days::new(181), happy),
        ];
        let h = build_examples(&[lc], &logs, true)[0].history.clone().unwrap();
        assert_eq!(h.len(), 180);
        assert_eq!(h[0].len(), 1);
        assert_eq!(h[179].len(), 1);
        assert_eq!(h.iter().filter(|s| !s.is_empty()).count(), 2);
    }

    #[test]
    fn raw_example_jsonl_round_trip() {
        let s = d("2020-05-01");
        let lc = LabeledCycle {
            cycle: cycle(s, Some(22)),
            label: Label::Positive,
            test_date: s + Days::new(25),
        };
        let logs = vec![
            DailyLog::binary("u", s, FeatureId::parse("period:heavy").unwrap()),
            DailyLog::new("u", s + Days::new(3), FeatureId::BBT, LogValue::Real(97.9)).unwrap(),
        ];
        let ex = build_examples(&[lc], &logs, true).remove(0);
        let line = serde_json::to_string(&ex).unwrap();
        assert!(line.contains(r#""period:heavy":null"#));
        assert!(line.contains(r#""continuous:bbt":97.9"#));
        let back: RawExample = serde_json::from_str(&line).unwrap();
        assert_eq!(back, ex);
    }
}
