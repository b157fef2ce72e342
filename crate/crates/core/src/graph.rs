//! Per-sequence commonsense candidate graph: seed expansion through the
//! knowledge edges, frequency/co-occurrence/sampling filters, and edge rules
//! within an image and between adjacent images.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CorpusStats, KnowledgeEdgeList, SequenceRecord};
use crate::neural::AttentionMask;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptNode {
    pub node_id: usize,
    pub image_index: usize,
    pub concept: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateGraph {
    pub sequence_id: String,
    pub nodes: Vec<ConceptNode>,
    /// Node ids of each image, in node order.
    pub images: Vec<Vec<usize>>,
    /// Undirected concept edges `(u, v)` with `u < v`, sorted.
    pub edges: Vec<(usize, usize)>,
    pub k: usize,
}

impl CandidateGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn image_count(&self) -> usize {
        self.images.len()
    }

    pub fn concepts(&self) -> Vec<String> {
        self.nodes.iter().map(|n| n.concept.clone()).collect()
    }

    pub fn image_of(&self) -> Vec<usize> {
        self.nodes.iter().map(|n| n.image_index).collect()
    }

    /// Per-image concept lists.
    pub fn candidates(&self) -> Vec<Vec<String>> {
        self.images
            .iter()
            .map(|ids| ids.iter().map(|&i| self.nodes[i].concept.clone()).collect())
            .collect()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        let e = if u < v { (u, v) } else { (v, u) };
        self.edges.binary_search(&e).is_ok()
    }

    /// Attention mask for the graph: edges, self-loops, and each concept's image.
    pub fn attention_mask(&self) -> AttentionMask {
        AttentionMask::new(self.nodes.len(), self.images.len(), &self.edges, &self.image_of())
    }

    /// Text edge list for inspection: nodes first, then concept edges, then image links.
    pub fn debug_dump(&self) -> String {
        let mut s = format!("# graph {} nodes={} edges={}\n", self.sequence_id, self.nodes.len(), self.edges.len());
        for n in &self.nodes {
            let _ = writeln!(s, "node\t{}\timg{}\t{}", n.node_id, n.image_index, n.concept);
        }
        for &(u, v) in &self.edges {
            let _ = writeln!(s, "edge\t{u}\t{v}\t{}\t{}", self.nodes[u].concept, self.nodes[v].concept);
        }
        for (i, ids) in self.images.iter().enumerate() {
            for id in ids {
                let _ = writeln!(s, "image\timg{i}\t{id}");
            }
        }
        s
    }
}

/// Each image's seeds followed by the sorted, deduplicated knowledge-base
/// neighbours of those seeds.
pub fn expand_seeds(seeds: &[Vec<String>], kb: &KnowledgeEdgeList) -> Vec<Vec<String>> {
    seeds
        .iter()
        .map(|image_seeds| {
            let mut seen: BTreeSet<&str> = BTreeSet::new();
            let mut out: Vec<String> = Vec::new();
            for s in image_seeds {
                if seen.insert(s.as_str()) {
                    out.push(s.clone());
                }
            }
            let neighbours: BTreeSet<&str> = image_seeds
                .iter()
                .flat_map(|s| kb.neighbors(s))
                .filter(|n| !seen.contains(n))
                .collect();
            out.extend(neighbours.into_iter().map(str::to_string));
            out
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub k: usize,
    pub min_frequency: u32,
    /// Drop expansions that never co-occur with any seed of their image.
    pub require_cooccurrence: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            k: 10,
            min_frequency: 5,
            require_cooccurrence: true,
        }
    }
}

/// Applies, in order: the training-frequency floor, the seed co-occurrence
/// rule (seeds are exempt from both), then seeded sampling down to `k`
/// keeping seeds first. Relative order of the raw list is preserved.
pub fn filter_candidates(
    raw: &[Vec<String>],
    seeds: &[Vec<String>],
    stats: &CorpusStats,
    cfg: &FilterConfig,
    rng_seed: u64,
) -> Vec<Vec<String>> {
    assert!(cfg.k >= 1, "K must be positive");
    raw.iter()
        .enumerate()
        .map(|(i, list)| {
            let image_seeds: BTreeSet<&str> = seeds
                .get(i)
                .map(|s| s.iter().map(String::as_str).collect())
                .unwrap_or_default();
            let is_seed = |c: &str| image_seeds.contains(c);
            let survivors: Vec<&String> = list
                .iter()
                .filter(|c| is_seed(c) || stats.frequency(c) >= cfg.min_frequency)
                .filter(|c| {
                    !cfg.require_cooccurrence
                        || is_seed(c)
                        || image_seeds.iter().any(|s| stats.co_occurs(c, s))
                })
                .collect();
            if survivors.is_empty() {
                log::warn!("image {i}: every candidate was filtered out, keeping raw seeds");
                return seeds.get(i).cloned().unwrap_or_default();
            }
            if survivors.len() <= cfg.k {
                return survivors.into_iter().cloned().collect();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let (seed_pos, other_pos): (Vec<usize>, Vec<usize>) =
                (0..survivors.len()).partition(|&p| is_seed(survivors[p]));
            let mut keep: Vec<usize> = if seed_pos.len() >= cfg.k {
                pick(&seed_pos, cfg.k, &mut rng)
            } else {
                let mut k = seed_pos.clone();
                k.extend(pick(&other_pos, cfg.k - seed_pos.len(), &mut rng));
                k
            };
            keep.sort_unstable();
            keep.into_iter().map(|p| survivors[p].clone()).collect()
        })
        .collect()
}

fn pick(pool: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    sample(rng, pool.len(), n).into_iter().map(|j| pool[j]).collect()
}

/// Nodes in image order. Concepts are linked when related in the knowledge
/// base and in the same or adjacent images; identical strings in adjacent
/// images are always linked.
pub fn build_graph(sequence_id: &str, filtered: &[Vec<String>], kb: &KnowledgeEdgeList) -> CandidateGraph {
    let mut nodes = Vec::new();
    let mut images = Vec::with_capacity(filtered.len());
    for (i, list) in filtered.iter().enumerate() {
        let mut ids = Vec::with_capacity(list.len());
        for c in list {
            ids.push(nodes.len());
            nodes.push(ConceptNode {
                node_id: nodes.len(),
                image_index: i,
                concept: c.clone(),
            });
        }
        images.push(ids);
    }
    let mut edges = Vec::new();
    for u in 0..nodes.len() {
        for v in u + 1..nodes.len() {
            let (a, b) = (&nodes[u], &nodes[v]);
            let gap = a.image_index.abs_diff(b.image_index);
            if gap > 1 {
                continue;
            }
            let identity = gap == 1 && a.concept == b.concept;
            if identity || kb.related(&a.concept, &b.concept) {
                edges.push((u, v));
            }
        }
    }
    let k = filtered.iter().map(Vec::len).max().unwrap_or(0);
    CandidateGraph {
        sequence_id: sequence_id.to_string(),
        nodes,
        images,
        edges,
        k,
    }
}

/// Derives a per-sequence sampling seed from a run seed and the sequence id.
pub fn sequence_seed(run_seed: u64, sequence_id: &str) -> u64 {
    run_seed ^ crate::data::fnv1a(sequence_id)
}

/// Expansion, filtering and graph construction for one record.
pub fn graph_for_record(
    rec: &SequenceRecord,
    kb: &KnowledgeEdgeList,
    stats: &CorpusStats,
    cfg: &FilterConfig,
    run_seed: u64,
) -> CandidateGraph {
    let seeds = rec.seeds();
    let raw = expand_seeds(&seeds, kb);
    let filtered = filter_candidates(&raw, &seeds, stats, cfg, sequence_seed(run_seed, &rec.sequence_id));
    build_graph(&rec.sequence_id, &filtered, kb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{tokenize, ImageEntry};

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn expansion_examples() {
        let kb = KnowledgeEdgeList::from_pairs([("dog", "park")]);
        assert_eq!(expand_seeds(&[s(&["dog"])], &kb), vec![s(&["dog", "park"])]);
        assert_eq!(expand_seeds(&[s(&["dog"])], &KnowledgeEdgeList::new()), vec![s(&["dog"])]);
        let kb = KnowledgeEdgeList::from_pairs([("a", "c"), ("b", "c")]);
        assert_eq!(expand_seeds(&[s(&["a", "b"])], &kb), vec![s(&["a", "b", "c"])]);
    }

    fn stats_from(sentences: &[&str]) -> CorpusStats {
        let rec = SequenceRecord {
            sequence_id: "x".into(),
            images: vec![ImageEntry {
                image_id: "i".into(),
                feature: vec![0.0],
                seed_concepts: vec!["x".into()],
            }],
            gold_stories: sentences.iter().map(|t| vec![tokenize(t)]).collect(),
        };
        CorpusStats::from_records(&[rec])
    }

    #[test]
    fn frequency_floor_is_five() {
        let mut lines = vec!["dog rare"; 4];
        lines.extend(["dog common"; 5]);
        let stats = stats_from(&lines);
        let out = filter_candidates(
            &[s(&["dog", "rare", "common"])],
            &[s(&["dog"])],
            &stats,
            &FilterConfig::default(),
            0,
        );
        assert_eq!(out, vec![s(&["dog", "common"])]);
    }

    #[test]
    fn non_cooccurring_expansions_removed() {
        let mut lines = vec!["loner"; 9];
        lines.extend(["dog"; 5]);
        let stats = stats_from(&lines);
        assert_eq!(stats.frequency("loner"), 9);
        let out = filter_candidates(
            &[s(&["dog", "loner"])],
            &[s(&["dog"])],
            &stats,
            &FilterConfig::default(),
            0,
        );
        assert_eq!(out, vec![s(&["dog"])]);
    }

    #[test]
    fn sampling_to_k_is_seeded() {
        let words: Vec<String> = (0..30).map(|i| format!("w{i}")).collect();
        let lines: Vec<String> = (0..5).map(|_| format!("seed {}", words.join(" "))).collect();
        let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
        let stats = stats_from(&refs);
        let mut raw = s(&["seed"]);
        raw.extend(words.clone());
        let cfg = FilterConfig::default();
        let a = filter_candidates(&[raw.clone()], &[s(&["seed"])], &stats, &cfg, 42);
        let b = filter_candidates(&[raw.clone()], &[s(&["seed"])], &stats, &cfg, 42);
        assert_eq!(a, b);
        assert_eq!(a[0].len(), 10);
        assert_eq!(a[0][0], "seed");
        let c = filter_candidates(&[raw], &[s(&["seed"])], &stats, &cfg, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn filtered_out_image_falls_back_to_seeds() {
        let stats = CorpusStats::default();
        let out = filter_candidates(&[s(&["x", "y"])], &[vec![]], &stats, &FilterConfig::default(), 0);
        assert_eq!(out, vec![Vec::<String>::new()]);
    }

    #[test]
    fn dropping_cooccurrence_rule_only_grows() {
        let mut lines = vec!["alpha beta"; 6];
        lines.extend(["gamma"; 6]);
        let stats = stats_from(&lines);
        let raw = [s(&["alpha", "beta", "gamma"])];
        let seeds = [s(&["alpha"])];
        let with = filter_candidates(&raw, &seeds, &stats, &FilterConfig::default(), 1);
        let without = filter_candidates(
            &raw,
            &seeds,
            &stats,
            &FilterConfig {
                require_cooccurrence: false,
                ..FilterConfig::default()
            },
            1,
        );
        assert!(with[0].iter().all(|c| without[0].contains(c)));
        assert!(without[0].len() > with[0].len());
    }

    #[test]
    fn edges_follow_adjacency_rule() {
        let kb = KnowledgeEdgeList::from_pairs([("dog", "park")]);
        let g = build_graph("g", &[s(&["dog", "park"]), s(&["x"]), s(&["park"])], &kb);
        assert!(g.has_edge(0, 1));
        assert!(!g.has_edge(0, 3), "non-adjacent images must not link");
    }

    #[test]
    fn identical_concepts_in_adjacent_images_link() {
        let g = build_graph("g", &[s(&["dog"]), s(&["dog"]), s(&["cat"]), s(&["dog"])], &KnowledgeEdgeList::new());
        assert_eq!(g.edges, vec![(0, 1)]);
        let kb = KnowledgeEdgeList::from_pairs([("dog", "cat")]);
        let g = build_graph("g", &[s(&["dog"]), s(&["dog"]), s(&["cat"]), s(&["dog"])], &kb);
        assert_eq!(g.edges, vec![(0, 1), (1, 2), (2, 3)]);
    }

    #[test]
    fn node_count_and_partitions() {
        let g = build_graph("g", &[s(&["a", "b"]), s(&["c"]), s(&["d", "e", "f"])], &KnowledgeEdgeList::new());
        assert_eq!(g.node_count(), 6);
        assert_eq!(g.images.iter().map(Vec::len).sum::<usize>(), 6);
        assert_eq!(g.k, 3);
        assert_eq!(g.image_of(), vec![0, 0, 1, 2, 2, 2]);
        let mask = g.attention_mask();
        assert!(mask.allows(2, 6 + 1));
        assert!(!mask.allows(2, 6));
        assert!(g.debug_dump().contains("node\t3\timg2\td"));
    }
}
