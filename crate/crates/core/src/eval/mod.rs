//! Concept-selection and text metrics, the random baseline, and the
//! benchmark report.

mod baseline;
mod report;
mod text;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use baseline::{rand_baseline, rand_expected_f, simulate_rand_f, RAND_PER_IMAGE};
pub use report::{benchmark, BenchmarkReport, BenchmarkRow, DiversityReport, PlannerRun};
pub use text::{corpus_bleu, distinct_n, lcs_len, rouge_l, sentence_bleu, ROUGE_BETA};

/// Precision, recall and F in `[0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrfResult {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

impl PrfResult {
    pub fn from_pr(precision: f64, recall: f64) -> Self {
        PrfResult {
            precision,
            recall,
            f: harmonic_mean(precision, recall),
        }
    }
}

/// `2pr / (p + r)`, or 0 when both are 0.
pub fn harmonic_mean(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Scores one selection against a single target set.
pub fn prf(selected: &BTreeSet<String>, target: &BTreeSet<String>) -> PrfResult {
    if selected.is_empty() || target.is_empty() {
        return PrfResult::default();
    }
    let hit = selected.intersection(target).count() as f64;
    PrfResult::from_pr(hit / selected.len() as f64, hit / target.len() as f64)
}

/// Best score over the target sets of all gold stories (first wins ties).
pub fn concept_prf(selected: &BTreeSet<String>, targets: &[BTreeSet<String>]) -> PrfResult {
    let mut best = PrfResult::default();
    for (i, t) in targets.iter().enumerate() {
        let r = prf(selected, t);
        if i == 0 || r.f > best.f {
            best = r;
        }
    }
    best
}

/// Mean of per-sequence results.
pub fn macro_average(results: &[PrfResult]) -> PrfResult {
    if results.is_empty() {
        return PrfResult::default();
    }
    let n = results.len() as f64;
    PrfResult {
        precision: results.iter().map(|r| r.precision).sum::<f64>() / n,
        recall: results.iter().map(|r| r.recall).sum::<f64>() / n,
        f: results.iter().map(|r| r.f).sum::<f64>() / n,
    }
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "need two equal-length samples of at least 2 points, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(v: &[&str]) -> BTreeSet<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn prf_small_case() {
        let r = concept_prf(&set(&["a", "b"]), &[set(&["b", "c"])]);
        assert_eq!(r, PrfResult { precision: 0.5, recall: 0.5, f: 0.5 });
        assert_eq!(concept_prf(&set(&[]), &[set(&["b"])]), PrfResult::default());
        assert_eq!(concept_prf(&set(&["a"]), &[set(&[])]), PrfResult::default());
    }

    #[test]
    fn best_gold_story_is_reported() {
        // f = 0.4 against the first story, 0.6 against the second.
        let sel = set(&["a", "b", "c", "d", "e"]);
        let g1 = set(&["a", "b", "x", "y", "z"]);
        let g2 = set(&["a", "b", "c", "y", "z"]);
        assert!((prf(&sel, &g1).f - 0.4).abs() < 1e-12);
        assert!((prf(&sel, &g2).f - 0.6).abs() < 1e-12);
        assert!((concept_prf(&sel, &[g1.clone(), g2.clone()]).f - 0.6).abs() < 1e-12);
        assert!((concept_prf(&sel, &[g2, g1]).f - 0.6).abs() < 1e-12);
    }

    #[test]
    fn published_mcsm_row_is_consistent() {
        assert!((100.0 * harmonic_mean(0.4530, 0.4090) - 42.99).abs() < 0.01);
    }

    #[test]
    fn pearson_cases() {
        let xs: Vec<f64> = (0..10).map(f64::from).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x).collect();
        assert!((pearson(&xs, &ys).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(pearson(&xs, &[1.0; 10]), Err(Error::UndefinedCorrelation(_))));
        assert!(pearson(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn pearson_matches_longhand() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs: Vec<f64> = (0..100).map(|_| rng.gen::<f64>()).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x + rng.gen::<f64>()).collect();
        // cov / (std_x std_y) with n - 1 denominators throughout.
        let n = 100.0;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
        let (mx, my) = (mean(&xs), mean(&ys));
        let cov = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / (n - 1.0);
        let sd = |v: &[f64], m: f64| (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let expected = cov / (sd(&xs, mx) * sd(&ys, my));
        assert!((pearson(&xs, &ys).unwrap() - expected).abs() < 1e-10);
    }

    proptest! {
        #[test]
        fn prf_bounds(sel in proptest::collection::btree_set(0u8..20, 0..10),
                      gold in proptest::collection::vec(proptest::collection::btree_set(0u8..20, 0..10), 1..4)) {
            let s: BTreeSet<String> = sel.iter().map(|x| x.to_string()).collect();
            let g: Vec<BTreeSet<String>> = gold.iter().map(|t| t.iter().map(|x| x.to_string()).collect()).collect();
            let r = concept_prf(&s, &g);
            for v in [r.precision, r.recall, r.f] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(r.f <= r.precision.max(r.recall) + 1e-12);
            prop_assert!((r.f - harmonic_mean(r.precision, r.recall)).abs() < 1e-12);
        }
    }
}
