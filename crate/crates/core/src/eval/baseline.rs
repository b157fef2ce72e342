use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::concept_prf;

/// Concepts drawn per image by the random baseline.
pub const RAND_PER_IMAGE: usize = 3;

/// Uniformly samples `min(k, K_i)` candidates per image, kept in candidate order.
pub fn rand_baseline(candidates: &[Vec<String>], k: usize, seed: u64) -> Vec<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates
        .iter()
        .map(|c| {
            let mut idx = sample(&mut rng, c.len(), k.min(c.len())).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| c[i].clone()).collect()
        })
        .collect()
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Probability of drawing `x` marked items when taking `draws` of `total`
/// items without replacement, `marked` of which are marked.
fn hypergeometric(total: usize, marked: usize, draws: usize, x: usize) -> f64 {
    if x > marked || x > draws || draws - x > total - marked {
        return 0.0;
    }
    binomial(marked, x) * binomial(total - marked, draws - x) / binomial(total, draws)
}

/// Exact expected F of [`rand_baseline`] against one target set.
///
/// Hits per image are hypergeometric and independent, and with distinct
/// candidates across images the selection size is fixed, so F is linear in
/// the total hit count. Returns `None` when some concept is a candidate of
/// more than one image.
pub fn rand_expected_f(candidates: &[Vec<String>], target: &BTreeSet<String>, k: usize) -> Option<f64> {
    let all: Vec<&String> = candidates.iter().flatten().collect();
    let distinct: BTreeSet<&String> = all.iter().copied().collect();
    if distinct.len() != all.len() {
        return None;
    }
    let reachable = target.iter().filter(|t| distinct.contains(t)).count();
    let selected: usize = candidates.iter().map(|c| k.min(c.len())).sum();
    if reachable == 0 || selected == 0 {
        return Some(0.0);
    }
    // Distribution of the total hit count, by convolution.
    let mut dist = vec![1.0];
    for c in candidates {
        let marked = c.iter().filter(|x| target.contains(*x)).count();
        let draws = k.min(c.len());
        let pmf: Vec<f64> = (0..=marked.min(draws)).map(|x| hypergeometric(c.len(), marked, draws, x)).collect();
        let mut next = vec![0.0; dist.len() + pmf.len() - 1];
        for (a, pa) in dist.iter().enumerate() {
            for (b, pb) in pmf.iter().enumerate() {
                next[a + b] += pa * pb;
            }
        }
        dist = next;
    }
    let denom = (selected + reachable) as f64;
    Some(dist.iter().enumerate().map(|(x, p)| p * 2.0 * x as f64 / denom).sum())
}

/// Monte Carlo mean and standard error of the random baseline's F.
pub fn simulate_rand_f(
    candidates: &[Vec<String>],
    targets: &[BTreeSet<String>],
    k: usize,
    trials: usize,
    seed: u64,
) -> (f64, f64) {
    let fs: Vec<f64> = (0..trials as u64)
        .map(|t| {
            let sel: BTreeSet<String> = rand_baseline(candidates, k, seed.wrapping_add(t)).into_iter().flatten().collect();
            concept_prf(&sel, targets).f
        })
        .collect();
    let n = fs.len() as f64;
    let mean = fs.iter().sum::<f64>() / n;
    let var = fs.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cands(images: usize, per: usize) -> Vec<Vec<String>> {
        (0..images).map(|i| (0..per).map(|j| format!("c{i}_{j}")).collect()).collect()
    }

    #[test]
    fn small_images_are_fully_selected_and_seeded() {
        let c = cands(2, 3);
        assert_eq!(rand_baseline(&c, 3, 1), c);
        let c = cands(5, 10);
        assert_eq!(rand_baseline(&c, 3, 7), rand_baseline(&c, 3, 7));
        assert!(rand_baseline(&c, 3, 7).iter().all(|g| g.len() == 3));
    }

    #[test]
    fn hypergeometric_sums_to_one() {
        let s: f64 = (0..=3).map(|x| hypergeometric(10, 4, 3, x)).sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!((hypergeometric(10, 1, 3, 1) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn one_target_per_image_on_three_images() {
        let c = cands(5, 10);
        let target: BTreeSet<String> = ["c0_0", "c1_4", "c3_9"].iter().map(|s| s.to_string()).collect();
        // E[F] = 2 E[hits] / (15 + 3) = 2 * 0.9 / 18.
        let e = rand_expected_f(&c, &target, 3).unwrap();
        assert!((e - 0.1).abs() < 1e-12);
        let (mean, se) = simulate_rand_f(&c, &[target], 3, 10_000, 3);
        assert!((mean - e).abs() < 4.0 * se, "{mean} vs {e} (se {se})");
    }

    #[test]
    fn repeated_candidates_have_no_closed_form() {
        let c = vec![vec!["a".to_string()], vec!["a".to_string()]];
        assert_eq!(rand_expected_f(&c, &BTreeSet::new(), 3), None);
    }
}
