use std::collections::{HashMap, HashSet};

/// F-measure weight of recall in ROUGE-L.
pub const ROUGE_BETA: f64 = 1.2;

/// Unique n-grams over total n-grams across all stories. Stories shorter
/// than `n` contribute nothing; an empty total gives 0.
pub fn distinct_n<S: AsRef<str>>(stories: &[Vec<S>], n: usize) -> f64 {
    assert!(n >= 1, "n-gram order must be positive");
    let mut unique = HashSet::new();
    let mut total = 0usize;
    for story in stories {
        let toks: Vec<&str> = story.iter().map(AsRef::as_ref).collect();
        for w in toks.windows(n) {
            unique.insert(w.to_vec());
            total += 1;
        }
    }
    if total == 0 {
        log::warn!("distinct-{n}: every story is shorter than {n} tokens");
        return 0.0;
    }
    unique.len() as f64 / total as f64
}

fn ngram_counts<'a>(toks: &'a [String], n: usize) -> HashMap<&'a [String], usize> {
    let mut m = HashMap::new();
    for w in toks.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Corpus BLEU with uniform weights up to `n_max`, clipped counts and the
/// brevity penalty against the closest reference length. No smoothing.
pub fn corpus_bleu(candidates: &[Vec<String>], references: &[Vec<Vec<String>>], n_max: usize) -> f64 {
    assert_eq!(candidates.len(), references.len(), "one reference set per candidate");
    let mut matched = vec![0usize; n_max];
    let mut totals = vec![0usize; n_max];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        assert!(!refs.is_empty(), "at least one reference");
        cand_len += cand.len();
        ref_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .unwrap_or(0);
        for n in 1..=n_max {
            let counts = ngram_counts(cand, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &counts {
                matched[n - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }
    if cand_len == 0 || matched.iter().zip(&totals).any(|(&m, &t)| m == 0 || t == 0) {
        return 0.0;
    }
    let log_p: f64 = matched
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / n_max as f64;
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    bp * log_p.exp()
}

pub fn sentence_bleu(candidate: &[String], references: &[Vec<String>], n_max: usize) -> f64 {
    corpus_bleu(&[candidate.to_vec()], &[references.to_vec()], n_max)
}

/// Longest common subsequence length.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure, best over references.
pub fn rouge_l(candidate: &[String], references: &[Vec<String>]) -> f64 {
    let b2 = ROUGE_BETA * ROUGE_BETA;
    references
        .iter()
        .map(|r| {
            if candidate.is_empty() || r.is_empty() {
                return 0.0;
            }
            let l = lcs_len(candidate, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / candidate.len() as f64;
            let rec = l / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}
