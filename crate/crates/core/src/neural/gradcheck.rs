//! Central finite-difference gradient checker.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Coordinates checked (all of them when the model is smaller).
    pub coordinates: usize,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Denominator floor of the relative error, so that coordinates whose
    /// gradient is at the level of floating-point cancellation noise are
    /// judged on absolute error instead.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            coordinates: 200,
            tolerance: 1e-4,
            floor: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub coordinates_checked: usize,
    pub max_relative_error: f64,
    pub worst_coordinate: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares `analytic` against central differences of `loss` around `params`.
///
/// The checked set always contains the 50 coordinates with the largest
/// analytic magnitude, topped up with a seeded random sample.
pub fn grad_check<F>(params: &[f64], analytic: &[f64], loss: F, opts: &GradCheckOptions) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    let n = params.len();
    let want = opts.coordinates.max(200).min(n);
    let mut by_size: Vec<usize> = (0..n).collect();
    by_size.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()).then(a.cmp(&b)));
    let mut chosen: Vec<usize> = by_size.iter().take(50.min(want)).copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut taken = vec![false; n];
    chosen.iter().for_each(|&i| taken[i] = true);
    for i in sample(&mut rng, n, n).into_iter() {
        if chosen.len() >= want {
            break;
        }
        if !taken[i] {
            taken[i] = true;
            chosen.push(i);
        }
    }
    chosen.sort_unstable();

    let mut p = params.to_vec();
    let mut report = GradCheckReport {
        coordinates_checked: chosen.len(),
        max_relative_error: 0.0,
        worst_coordinate: chosen.first().copied().unwrap_or(0),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        tolerance: opts.tolerance,
        passed: true,
    };
    for &i in &chosen {
        let orig = p[i];
        p[i] = orig + opts.step;
        let up = loss(&p);
        p[i] = orig - opts.step;
        let down = loss(&p);
        p[i] = orig;
        let numeric = (up - down) / (2.0 * opts.step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
        if !rel.is_finite() || rel > report.max_relative_error {
            report.max_relative_error = if rel.is_finite() { rel } else { f64::INFINITY };
            report.worst_coordinate = i;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    report.passed = report.max_relative_error <= opts.tolerance;
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quartic(p: &[f64]) -> f64 {
        p.iter().enumerate().map(|(i, x)| (i as f64 + 1.0) * x.powi(4) + x.sin()).sum()
    }

    fn quartic_grad(p: &[f64]) -> Vec<f64> {
        p.iter().enumerate().map(|(i, x)| 4.0 * (i as f64 + 1.0) * x.powi(3) + x.cos()).collect()
    }

    #[test]
    fn exact_gradient_passes_and_corruption_fails() {
        let p: Vec<f64> = (0..300).map(|i| ((i as f64) * 0.13).sin()).collect();
        let g = quartic_grad(&p);
        let opts = GradCheckOptions { tolerance: 1e-6, ..Default::default() };
        let ok = grad_check(&p, &g, quartic, &opts);
        assert!(ok.passed, "{ok:?}");
        assert_eq!(ok.coordinates_checked, 200);

        let mut bad = g.clone();
        let k = (0..bad.len()).max_by(|&a, &b| bad[a].abs().total_cmp(&bad[b].abs())).unwrap();
        bad[k] *= 1.01;
        let report = grad_check(&p, &bad, quartic, &opts);
        assert!(!report.passed);
        assert_eq!(report.worst_coordinate, k);
    }
}
