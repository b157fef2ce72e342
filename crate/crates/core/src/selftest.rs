//! Built-in oracle checks: clique enumeration against brute force and
//! finite-difference gradient checks of every trainable component.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{EmbeddingTable, ImageEntry, KnowledgeEdgeList, SequenceRecord, Vocabulary};
use crate::graph::build_graph;
use crate::mcsm::{brute_force_maximal_cliques, enumerate_maximal_cliques, LossWeights, McsmModel, PrunedGraph};
use crate::neural::{grad_check, ConceptGat, GradCheckOptions, GradCheckReport, GruCell, ImageEncoder, MultiHeadPool, ParamStore, Tape, Tensor, Var};
use crate::planner::{PlannerDims, SequenceInput};
use crate::realizer::{RealizerDims, RealizerModel};
use crate::ssm::SsmModel;

/// Relative-error tolerance of the gradient checks.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Widths of the toy planner instances.
pub fn toy_dims() -> PlannerDims {
    PlannerDims {
        feature_dim: 4,
        word_dim: 3,
        emb_dim: 4,
        hidden_dim: 4,
        heads: 2,
        max_images: 5,
    }
}

/// A random sequence with `per_image` concepts on each of `images` images
/// and knowledge-base edges drawn with probability 0.3.
pub fn toy_sequence(seed: u64, images: usize, per_image: usize) -> SequenceInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lists: Vec<Vec<String>> = (0..images)
        .map(|i| (0..per_image).map(|j| format!("c{i}x{j}")).collect())
        .collect();
    let mut kb = KnowledgeEdgeList::new();
    for a in lists.iter().flatten() {
        for b in lists.iter().flatten() {
            if rng.gen_bool(0.3) {
                kb.insert(a, b);
            }
        }
    }
    let g = build_graph("toy", &lists, &kb);
    let rec = SequenceRecord {
        sequence_id: "toy".into(),
        images: (0..images)
            .map(|i| ImageEntry {
                image_id: i.to_string(),
                feature: (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                seed_concepts: vec![],
            })
            .collect(),
        gold_stories: vec![],
    };
    SequenceInput::new(&rec, &g, &EmbeddingTable::new(3)).expect("toy shapes agree")
}

/// Random graphs with `n ≤ 14` at densities 0.2, 0.5 and 0.8, compared as
/// sorted clique lists with the subset-enumeration oracle.
pub fn clique_oracle(graphs: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let densities = [0.2, 0.5, 0.8];
    let mut mismatches = Vec::new();
    for k in 0..graphs {
        let n = rng.gen_range(1..=14);
        let p = densities[k % densities.len()];
        let mut g = PrunedGraph::new(n);
        for u in 0..n {
            for v in u + 1..n {
                if rng.gen_bool(p) {
                    g.add_edge(u, v);
                }
            }
        }
        let fast = enumerate_maximal_cliques(&g, usize::MAX);
        let slow = brute_force_maximal_cliques(&g);
        if fast.as_ref().ok() != Some(&slow) {
            mismatches.push(k);
        }
    }
    CheckResult {
        name: "clique oracle".into(),
        passed: mismatches.is_empty(),
        detail: format!("{graphs} graphs, {} mismatches {:?}", mismatches.len(), mismatches),
    }
}

fn opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        max_per_param: Some(8),
        seed,
        ..GradCheckOptions::default()
    }
}

fn summarize(name: &str, reports: Vec<GradCheckReport>) -> CheckResult {
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let passed = reports.iter().all(|r| r.passed(GRAD_TOLERANCE));
    CheckResult {
        name: format!("gradient {name}"),
        passed,
        detail: format!("{} instances, max relative error {worst:.2e}", reports.len()),
    }
}

fn rand_leaf(t: &mut Tape, rows: usize, cols: usize, seed: u64) -> Var {
    t.leaf(Tensor::uniform(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)))
}

fn target(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::uniform(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xabc))
}

pub fn grad_gru(instances: u64) -> CheckResult {
    let reports = (0..instances)
        .map(|seed| {
            let mut s = ParamStore::new(seed);
            let cell = GruCell::new(&mut s, "g", 5, 6);
            grad_check(
                &s,
                |t, s| {
                    let h = rand_leaf(t, 1, 6, seed + 1);
                    let x = rand_leaf(t, 1, 5, seed + 2);
                    let h1 = cell.step(t, s, h, x);
                    let h2 = cell.step(t, s, h1, x);
                    t.sq_err(h2, target(1, 6, seed), None)
                },
                &opts(seed),
            )
        })
        .collect();
    summarize("gru cell", reports)
}

pub fn grad_encoder(instances: u64) -> CheckResult {
    let reports = (0..instances)
        .map(|seed| {
            let mut s = ParamStore::new(seed);
            let enc = ImageEncoder::new(&mut s, "enc", 4, 6, 5);
            grad_check(
                &s,
                |t, s| {
                    let f = rand_leaf(t, 5, 4, seed + 3);
                    let out = enc.forward(t, s, f).expect("shapes");
                    t.sq_err(out, target(5, 6, seed), None)
                },
                &opts(seed),
            )
        })
        .collect();
    summarize("bidirectional image encoder", reports)
}

pub fn grad_gat(instances: u64) -> CheckResult {
    let reports = (0..instances)
        .map(|seed| {
            let input = toy_sequence(seed + 20, 3, 2);
            let mut s = ParamStore::new(seed);
            let gat = ConceptGat::new(&mut s, "gat", 4, 4, 2);
            grad_check(
                &s,
                |t, s| {
                    let c = rand_leaf(t, input.node_count(), 4, seed + 4);
                    let i = rand_leaf(t, input.image_count(), 4, seed + 5);
                    let out = gat.forward(t, s, c, i, &input.mask);
                    t.sq_err(out, target(input.node_count(), 4, seed), None)
                },
                &opts(seed),
            )
        })
        .collect();
    summarize("graph attention", reports)
}

pub fn grad_pool(instances: u64) -> CheckResult {
    let reports = (0..instances)
        .map(|seed| {
            let mut s = ParamStore::new(seed);
            let pool = MultiHeadPool::new(&mut s, "pool", 4, 2);
            grad_check(
                &s,
                |t, s| {
                    let x = rand_leaf(t, 3, 4, seed + 6);
                    let (out, _) = pool.forward(t, s, x);
                    t.sq_err(out, target(1, 4, seed), None)
                },
                &opts(seed),
            )
        })
        .collect();
    summarize("multi-head pooling", reports)
}

fn toy_targets(n: usize, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
    (0..n).map(|_| rng.gen_bool(0.4)).collect()
}

pub fn grad_ssm(instances: u64) -> CheckResult {
    let reports = (0..instances)
        .map(|seed| {
            let mut s = ParamStore::new(seed);
            let m = SsmModel::new(&mut s, toy_dims());
            let input = toy_sequence(seed + 10, 3, 2);
            let targets = toy_targets(input.node_count(), seed);
            grad_check(&s, |t, s| m.loss(t, s, &input, &targets, seed).expect("shapes"), &opts(seed))
        })
        .collect();
    summarize("copy selector loss", reports)
}

pub fn grad_mcsm(instances: u64) -> CheckResult {
    let reports = (0..instances)
        .map(|seed| {
            let mut s = ParamStore::new(seed);
            let m = McsmModel::new(&mut s, toy_dims(), LossWeights::default());
            let input = toy_sequence(seed + 30, 3, 2);
            let targets = toy_targets(input.node_count(), seed);
            grad_check(
                &s,
                |t, s| m.loss(t, s, &input, &targets).expect("shapes").expect("non-empty"),
                &opts(seed),
            )
        })
        .collect();
    summarize("correlation map loss", reports)
}

pub fn grad_decoder(instances: u64) -> CheckResult {
    let vocab = Vocabulary::from_tokens(["dog", "park", "ran", "."].iter().map(|s| s.to_string()));
    let words = EmbeddingTable::new(3);
    let reports = (0..instances)
        .map(|seed| {
            let mut s = ParamStore::new(seed);
            let dims = RealizerDims {
                feature_dim: 4,
                word_dim: 3,
                emb_dim: 4,
                hidden_dim: 4,
                heads: 2,
                vocab_size: vocab.len(),
                max_images: 5,
            };
            let m = RealizerModel::new(&mut s, dims);
            let feats = Tensor::uniform(2, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 40));
            let concepts = vec![vec!["dog".to_string(), "park".into()], vec![]];
            let sentences = vec![vocab.encode(&["dog", "ran", "."]), vocab.encode(&["park"])];
            grad_check(
                &s,
                |t, s| m.loss(t, s, &feats, &concepts, &sentences, &vocab, &words, &[]).expect("shapes"),
                &opts(seed),
            )
        })
        .collect();
    summarize("decoder sentence loss", reports)
}

/// Every gradient check on `instances` random toy instances each.
pub fn gradient_checks(instances: u64) -> Vec<CheckResult> {
    vec![
        grad_gru(instances),
        grad_encoder(instances),
        grad_gat(instances),
        grad_pool(instances),
        grad_ssm(instances),
        grad_mcsm(instances),
        grad_decoder(instances),
    ]
}

pub fn run_all() -> Vec<CheckResult> {
    let mut out = vec![clique_oracle(200, 0)];
    out.extend(gradient_checks(5));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for r in run_all() {
            assert!(r.passed, "{}", r.line());
        }
    }
}
