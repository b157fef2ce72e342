//! Shared planner front end: concept sets, per-sequence model inputs, the
//! image encoder + graph attention backbone, and the plan file format.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::{read_jsonl, write_jsonl, Header};
use crate::data::{gold_concepts, EmbeddingTable, GoldStory, SequenceRecord};
use crate::error::{Error, Result};
use crate::graph::CandidateGraph;
use crate::neural::{AttentionMask, ConceptGat, ImageEncoder, Linear, ParamStore, Tape, Tensor, Var};

/// Candidate, gold and target concept sets of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptSets {
    /// Candidate concept of each graph node, in node order.
    pub candidates: Vec<String>,
    pub image_of: Vec<usize>,
    /// Gold word set of each gold story.
    pub gold: Vec<BTreeSet<String>>,
}

impl ConceptSets {
    pub fn new(graph: &CandidateGraph, stories: &[GoldStory]) -> Self {
        ConceptSets {
            candidates: graph.concepts(),
            image_of: graph.image_of(),
            gold: stories.iter().map(gold_concepts).collect(),
        }
    }

    /// Whether each node is a target under gold story `story`.
    pub fn target_mask(&self, story: usize) -> Vec<bool> {
        match self.gold.get(story) {
            Some(g) => self.candidates.iter().map(|c| g.contains(c)).collect(),
            None => vec![false; self.candidates.len()],
        }
    }

    /// Target concept strings under gold story `story`.
    pub fn targets(&self, story: usize) -> BTreeSet<String> {
        self.candidates
            .iter()
            .zip(self.target_mask(story))
            .filter(|(_, t)| *t)
            .map(|(c, _)| c.clone())
            .collect()
    }

    /// All distinct candidate strings.
    pub fn candidate_set(&self) -> BTreeSet<String> {
        self.candidates.iter().cloned().collect()
    }
}

/// Everything a planner needs for one sequence, as plain tensors.
#[derive(Clone, Debug)]
pub struct SequenceInput {
    pub sequence_id: String,
    /// `N × D_img` raw image features.
    pub features: Tensor,
    /// `n × D_word` concept word vectors in node order.
    pub concept_words: Tensor,
    pub mask: AttentionMask,
    pub image_of: Vec<usize>,
    /// Node ids per image.
    pub images: Vec<Vec<usize>>,
    pub concepts: Vec<String>,
}

impl SequenceInput {
    pub fn new(rec: &SequenceRecord, graph: &CandidateGraph, words: &EmbeddingTable) -> Result<Self> {
        if graph.image_count() != rec.len() {
            return Err(Error::Shape(format!(
                "{}: graph has {} images, record has {}",
                rec.sequence_id,
                graph.image_count(),
                rec.len()
            )));
        }
        let rows: Vec<Vec<f64>> = rec.images.iter().map(|i| i.feature.clone()).collect();
        let features = Tensor::from_rows(&rows)?;
        features.ensure_finite("image features")?;
        let concepts = graph.concepts();
        Ok(SequenceInput {
            sequence_id: rec.sequence_id.clone(),
            features,
            concept_words: words.lookup(&concepts),
            mask: graph.attention_mask(),
            image_of: graph.image_of(),
            images: graph.images.clone(),
            concepts,
        })
    }

    pub fn node_count(&self) -> usize {
        self.concepts.len()
    }

    pub fn image_count(&self) -> usize {
        self.features.rows()
    }

    /// Groups node ids by image, keeping the given order within each image.
    pub fn partition(&self, nodes: &[usize]) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.image_count()];
        for &n in nodes {
            out[self.image_of[n]].push(n);
        }
        out
    }

    pub fn names(&self, groups: &[Vec<usize>]) -> Vec<Vec<String>> {
        groups
            .iter()
            .map(|g| g.iter().map(|&n| self.concepts[n].clone()).collect())
            .collect()
    }
}

/// Model widths shared by the planners.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerDims {
    pub feature_dim: usize,
    pub word_dim: usize,
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub max_images: usize,
}

/// Image encoder, concept input projection and two-layer graph attention.
#[derive(Clone, Debug)]
pub struct PlannerBackbone {
    encoder: ImageEncoder,
    word_proj: Linear,
    gat: ConceptGat,
    pub dims: PlannerDims,
}

impl PlannerBackbone {
    pub fn new(store: &mut ParamStore, prefix: &str, dims: PlannerDims) -> Self {
        PlannerBackbone {
            encoder: ImageEncoder::new(
                store,
                &format!("{prefix}.encoder"),
                dims.feature_dim,
                dims.hidden_dim,
                dims.max_images,
            ),
            word_proj: Linear::new(store, &format!("{prefix}.word_proj"), dims.word_dim, dims.emb_dim, true),
            gat: ConceptGat::new(store, &format!("{prefix}.gat"), dims.emb_dim, dims.hidden_dim, dims.heads),
            dims,
        }
    }

    /// Returns the encoded images (`N × D_h`) and the updated concept
    /// features (`n × D_emb`).
    pub fn forward(&self, t: &mut Tape, s: &ParamStore, input: &SequenceInput) -> Result<(Var, Var)> {
        if input.concept_words.cols() != self.dims.word_dim {
            return Err(Error::Shape(format!(
                "concept vectors have dimension {}, model expects {}",
                input.concept_words.cols(),
                self.dims.word_dim
            )));
        }
        let feats = t.leaf(input.features.clone());
        let encoded = self.encoder.forward(t, s, feats)?;
        if input.node_count() == 0 {
            let empty = t.leaf(Tensor::zeros(0, self.dims.emb_dim));
            return Ok((encoded, empty));
        }
        let words = t.leaf(input.concept_words.clone());
        let x = self.word_proj.forward(t, s, words);
        let v = self.gat.forward(t, s, x, encoded, &input.mask);
        Ok((encoded, v))
    }
}

/// Per-image planned concepts with node ids, ready for realization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub concepts: Vec<Vec<String>>,
    pub nodes: Vec<Vec<usize>>,
}

impl SelectionResult {
    pub fn empty(images: usize) -> Self {
        SelectionResult {
            concepts: vec![Vec::new(); images],
            nodes: vec![Vec::new(); images],
        }
    }

    pub fn concept_set(&self) -> BTreeSet<String> {
        self.concepts.iter().flatten().cloned().collect()
    }

    pub fn total(&self) -> usize {
        self.concepts.iter().map(Vec::len).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub s: f64,
    pub s_c: f64,
    pub s_i: f64,
}

/// One line of a plan file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanRecord {
    pub sequence_id: String,
    pub method: String,
    pub concepts: Vec<Vec<String>>,
    #[serde(default)]
    pub nodes: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<ScoreBreakdown>,
}

pub fn write_plans(path: &Path, header: &Header, plans: &[PlanRecord]) -> Result<()> {
    write_jsonl(path, header, plans)
}

pub fn read_plans(path: &Path) -> Result<Vec<PlanRecord>> {
    Ok(read_jsonl(path)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{tokenize, ImageEntry, KnowledgeEdgeList};
    use crate::graph::build_graph;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn target_is_candidates_intersect_gold() {
        let g = build_graph("q", &[s(&["dog", "tree"]), s(&["park", "car"])], &KnowledgeEdgeList::new());
        let story: GoldStory = vec![tokenize("the dog ran ."), tokenize("to the park")];
        let sets = ConceptSets::new(&g, &[story]);
        assert_eq!(sets.target_mask(0), vec![true, false, true, false]);
        assert_eq!(sets.targets(0).into_iter().collect::<Vec<_>>(), s(&["dog", "park"]));
        assert!(sets.targets(3).is_empty());
    }

    #[test]
    fn backbone_shapes() {
        let g = build_graph("q", &[s(&["a", "b"]), s(&["c"])], &KnowledgeEdgeList::from_pairs([("a", "c")]));
        let rec = SequenceRecord {
            sequence_id: "q".into(),
            images: (0..2)
                .map(|i| ImageEntry {
                    image_id: i.to_string(),
                    feature: vec![0.1 * i as f64; 6],
                    seed_concepts: vec![],
                })
                .collect(),
            gold_stories: vec![],
        };
        let words = EmbeddingTable::new(5);
        let input = SequenceInput::new(&rec, &g, &words).unwrap();
        let dims = PlannerDims {
            feature_dim: 6,
            word_dim: 5,
            emb_dim: 8,
            hidden_dim: 6,
            heads: 2,
            max_images: 5,
        };
        let mut store = ParamStore::new(3);
        let bb = PlannerBackbone::new(&mut store, "p", dims);
        let mut t = Tape::new();
        let (enc, v) = bb.forward(&mut t, &store, &input).unwrap();
        assert_eq!(t.value(enc).shape(), [2, 6]);
        assert_eq!(t.value(v).shape(), [3, 8]);
        assert_eq!(input.partition(&[2, 0]), vec![vec![0], vec![2]]);
    }
}
