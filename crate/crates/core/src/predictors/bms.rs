//! Structured conception probability `1 − Π_d Π_t (1 − r_t·f_d)^{s_dt}`.

use serde::{Deserialize, Serialize};

use crate::codec::schema::WINDOW_DAYS;
use crate::codec::{FeatureSchema, SexType, SparseVec};
use crate::error::{Error, Result};

/// Lower clamp on `1 − r·f` before taking the log.
pub const SURVIVAL_FLOOR: f64 = 1e-12;

/// Which sex types are active on each cycle day, in [`SexType::ALL`] order.
///
/// On an unmasked day, `none` is the complement of the three logged types;
/// masked days have no active type.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SexIndicators(pub Vec<[bool; 4]>);

/// Day slots of the three logged sex types.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SexSlots(pub [usize; 3]);

impl SexSlots {
    pub fn new(schema: &FeatureSchema) -> Self {
        SexSlots(std::array::from_fn(|t| {
            let f = SexType::ALL[t].feature().expect("logged sex type");
            schema.binary_slot(f).expect("sex features are binary day slots")
        }))
    }

    pub fn day(&self, row: &SparseVec, masked: bool) -> [bool; 4] {
        if masked {
            return [false; 4];
        }
        let mut s = [false; 4];
        for t in 0..3 {
            s[t] = row.get(self.0[t]) != 0.0;
        }
        s[3] = !(s[0] || s[1] || s[2]);
        s
    }
}

impl SexIndicators {
    pub fn from_days(days: &[SparseVec], mask: &[bool; WINDOW_DAYS], slots: &SexSlots) -> Self {
        SexIndicators(days.iter().zip(mask).map(|(row, &m)| slots.day(row, m)).collect())
    }

    pub fn days(&self) -> usize {
        self.0.len()
    }
}

/// `log(max(1 − r·f, floor))`, also returning whether the clamp was hit.
///
/// Uses `ln_1p` so that a single factor round-trips exactly through `expm1`.
#[inline]
pub(crate) fn log_survival(r: f64, f: f64) -> (f64, bool) {
    let rf = r * f;
    if 1.0 - rf < SURVIVAL_FLOOR {
        (SURVIVAL_FLOOR.ln(), true)
    } else {
        ((-rf).ln_1p(), false)
    }
}

/// Sum over active `(d, t)` of `log(1 − r_t·f_d)`.
pub(crate) fn log_no_conception(f: &[f64], r: &[f64; 4], s: &SexIndicators) -> f64 {
    f.iter()
        .zip(&s.0)
        .map(|(&fd, sd)| {
            (0..4)
                .filter(|&t| sd[t])
                .map(|t| log_survival(r[t], fd).0)
                .sum::<f64>()
        })
        .sum()
}

/// Conception probability from per-day fecundability `f`, per-type risks `r` and indicators `s`.
pub fn bms_probability(f: &[f64], r: &[f64; 4], s: &SexIndicators) -> Result<f64> {
    if f.len() != s.days() {
        return Err(Error::Shape { expected: s.days(), actual: f.len(), context: "fecundability days" });
    }
    if let Some(v) = f.iter().chain(r).find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("probability {v} outside [0, 1]")));
    }
    Ok(-log_no_conception(f, r, s).exp_m1())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(f: &[f64], r: &[f64; 4], s: &SexIndicators) -> f64 {
        let mut prod = 1.0;
        for (d, fd) in f.iter().enumerate() {
            for t in 0..4 {
                let e = if s.0[d][t] { 1 } else { 0 };
                prod *= (1.0 - r[t] * fd).powi(e);
            }
        }
        1.0 - prod
    }

    fn one_active(days: usize, d: usize, t: usize) -> SexIndicators {
        let mut s = vec![[false; 4]; days];
        s[d][t] = true;
        SexIndicators(s)
    }

    #[test]
    fn closed_form_cases() {
        let s = SexIndicators(vec![[false, true, false, false]; 24]);
        assert_eq!(bms_probability(&[0.0; 24], &[0.5; 4], &s).unwrap(), 0.0);

        let s = one_active(1, 0, 1);
        assert_eq!(bms_probability(&[0.3], &[0.0, 1.0, 0.0, 0.0], &s).unwrap(), 0.3);

        let s = SexIndicators(vec![[false, true, false, false], [false, false, true, false]]);
        let p = bms_probability(&[0.2, 0.5], &[0.0, 1.0, 1.0, 0.0], &s).unwrap();
        assert!((p - 0.6).abs() < 1e-12);
    }

    #[test]
    fn domain_errors() {
        let s = one_active(2, 0, 0);
        assert!(bms_probability(&[0.1], &[0.1; 4], &s).is_err());
        assert!(bms_probability(&[0.1, 1.5], &[0.1; 4], &s).is_err());
        assert!(bms_probability(&[0.1, 0.2], &[0.1, -0.1, 0.1, 0.1], &s).is_err());
    }

    #[test]
    fn matches_naive_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let days = rng.random_range(1..=24);
            let f: Vec<f64> = (0..days).map(|_| rng.random::<f64>()).collect();
            let r: [f64; 4] = std::array::from_fn(|_| rng.random::<f64>());
            let s = SexIndicators((0..days).map(|_| std::array::from_fn(|_| rng.random_bool(0.4))).collect());
            let a = bms_probability(&f, &r, &s).unwrap();
            let b = naive(&f, &r, &s);
            assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn monotone_in_risk() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let f: Vec<f64> = (0..24).map(|_| rng.random::<f64>()).collect();
            let mut r: [f64; 4] = std::array::from_fn(|_| rng.random::<f64>() * 0.5);
            let s = SexIndicators((0..24).map(|_| std::array::from_fn(|_| rng.random_bool(0.3))).collect());
            let before = bms_probability(&f, &r, &s).unwrap();
            let t = rng.random_range(0..4);
            r[t] += 0.3;
            assert!(bms_probability(&f, &r, &s).unwrap() >= before);
        }
    }

    #[test]
    fn none_complements_logged_types() {
        let schema = FeatureSchema::default();
        let slots = SexSlots::new(&schema);
        let mut row = SparseVec::default();
        assert_eq!(slots.day(&row, false), [false, false, false, true]);
        assert_eq!(slots.day(&row, true), [false; 4]);
        row.set(slots.0[2], 1.0);
        assert_eq!(slots.day(&row, false), [false, false, true, false]);
        row.set(slots.0[0], 1.0);
        assert_eq!(slots.day(&row, false), [true, false, true, false]);
    }
}
