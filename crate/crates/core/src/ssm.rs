//! Sequential selection: a GRU query that copies one candidate per step
//! until it emits the end token, and the image-to-concept baseline that
//! predicts concepts from the full concept vocabulary instead.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::neural::{masked_softmax, GruCell, ImageEncoder, Linear, ParamStore, Tape, Tensor, Var};
use crate::planner::{PlannerBackbone, PlannerDims, SelectionResult, SequenceInput};

pub const DEFAULT_T_MAX: usize = 15;

/// Decoder state between selection steps.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmState {
    pub hidden: Tensor,
    pub selected: Vec<usize>,
    /// `true` for candidates that may no longer be chosen.
    pub mask: Vec<bool>,
}

impl SsmState {
    pub fn new(hidden: Tensor, candidates: usize) -> Self {
        SsmState {
            hidden,
            selected: Vec::new(),
            mask: vec![false; candidates],
        }
    }

    /// Slot availability for a softmax over candidates plus the end token.
    pub fn allowed(&self) -> Vec<bool> {
        self.mask.iter().map(|m| !m).chain(std::iter::once(true)).collect()
    }

    pub fn choose(&mut self, candidate: usize) {
        debug_assert!(!self.mask[candidate], "candidate {candidate} already selected");
        self.mask[candidate] = true;
        self.selected.push(candidate);
    }
}

#[derive(Clone, Debug)]
pub struct SsmModel {
    pub backbone: PlannerBackbone,
    cell: GruCell,
    hidden_proj: Linear,
    query_proj: Linear,
    start: String,
    end: String,
}

impl SsmModel {
    pub fn new(store: &mut ParamStore, dims: PlannerDims) -> Self {
        let backbone = PlannerBackbone::new(store, "ssm", dims);
        let cell = GruCell::new(store, "ssm.gru", dims.emb_dim, dims.hidden_dim);
        let hidden_proj = Linear::new(store, "ssm.hidden_proj", dims.hidden_dim, dims.emb_dim, false);
        let query_proj = Linear::new(store, "ssm.query_proj", dims.emb_dim, dims.emb_dim, false);
        let (start, end) = ("ssm.start".to_string(), "ssm.end".to_string());
        for name in [&start, &end] {
            let v = Tensor::uniform(1, dims.emb_dim, 1.0, store.rng());
            store.insert_frozen(name, v);
        }
        SsmModel {
            backbone,
            cell,
            hidden_proj,
            query_proj,
            start,
            end,
        }
    }

    /// Projected slot keys: candidate rows then the end token.
    pub fn slot_keys(&self, t: &mut Tape, s: &ParamStore, candidates: Var) -> Var {
        let end = t.param(s, &self.end);
        let slots = t.concat_rows(&[candidates, end]);
        self.query_proj.forward(t, s, slots)
    }

    /// Advances the GRU on `prev` and scores every slot: `(h, 1 × (n+1) logits)`.
    pub fn step(&self, t: &mut Tape, s: &ParamStore, h_prev: Var, prev: Var, keys: Var) -> (Var, Var) {
        let h = self.cell.step(t, s, h_prev, prev);
        let q = self.hidden_proj.forward(t, s, h);
        (h, t.matmul_t(q, keys))
    }

    /// Value-level step: slot distribution (masked candidates get exactly 0)
    /// and the state with the advanced hidden vector.
    pub fn ssm_step(
        &self,
        s: &ParamStore,
        state: &SsmState,
        prev: &Tensor,
        candidates: &Tensor,
    ) -> Result<(Vec<f64>, SsmState)> {
        let mut t = Tape::new();
        let h_prev = t.leaf(state.hidden.clone());
        let prev = t.leaf(prev.clone());
        let cands = t.leaf(candidates.clone());
        let keys = self.slot_keys(&mut t, s, cands);
        let (h, logits) = self.step(&mut t, s, h_prev, prev, keys);
        let hidden = t.value(h).clone();
        hidden.ensure_finite("selection state")?;
        let logits = t.value(logits);
        logits.ensure_finite("selection scores")?;
        let probs = masked_softmax(logits.data(), Some(&state.allowed()));
        let mut next = state.clone();
        next.hidden = hidden;
        Ok((probs, next))
    }

    /// Greedy selection; node ids in selection order.
    pub fn select_nodes(&self, s: &ParamStore, input: &SequenceInput, t_max: usize) -> Result<Vec<usize>> {
        let mut t = Tape::new();
        let (encoded, concepts) = self.backbone.forward(&mut t, s, input)?;
        let n = input.node_count();
        if n == 0 {
            return Ok(Vec::new());
        }
        let h0 = t.mean_rows(encoded);
        let candidates = t.value(concepts).clone();
        let mut state = SsmState::new(t.value(h0).clone(), n);
        let mut prev = s.value(&self.start).expect("start token").clone();
        for _ in 0..t_max {
            let (probs, next) = self.ssm_step(s, &state, &prev, &candidates)?;
            state = next;
            let best = argmax(&probs);
            if best == n {
                break;
            }
            state.choose(best);
            prev = candidates.select_rows(&[best]);
        }
        Ok(state.selected)
    }

    pub fn select(&self, s: &ParamStore, input: &SequenceInput, t_max: usize) -> Result<SelectionResult> {
        let nodes = input.partition(&self.select_nodes(s, input, t_max)?);
        Ok(SelectionResult {
            concepts: input.names(&nodes),
            nodes,
        })
    }

    /// Teacher-forced selection loss. `targets[j]` marks node `j` as a member
    /// of the target set; the feeding order shuffles targets within each image.
    pub fn loss(&self, t: &mut Tape, s: &ParamStore, input: &SequenceInput, targets: &[bool], seed: u64) -> Result<Var> {
        let (encoded, concepts) = self.backbone.forward(t, s, input)?;
        let n = input.node_count();
        let order = target_order(&input.images, targets, seed);
        let mut h = t.mean_rows(encoded);
        let mut prev = t.param(s, &self.start);
        let keys = if n == 0 {
            let end = t.param(s, &self.end);
            self.query_proj.forward(t, s, end)
        } else {
            self.slot_keys(t, s, concepts)
        };
        let mut allowed = vec![true; n + 1];
        let mut remaining: Vec<bool> = targets.to_vec();
        let mut total: Option<Var> = None;
        for step in 0..=order.len() {
            let (next, logits) = self.step(t, s, h, prev, keys);
            h = next;
            let mut y = vec![0.0; n + 1];
            if step == order.len() {
                y[n] = 1.0;
            } else {
                for (k, &r) in remaining.iter().enumerate() {
                    if r {
                        y[k] = 1.0;
                    }
                }
            }
            let l = t.softmax_xent(logits, Some(&allowed), &y);
            total = Some(match total {
                Some(acc) => t.add(acc, l),
                None => l,
            });
            if let Some(&chosen) = order.get(step) {
                allowed[chosen] = false;
                remaining[chosen] = false;
                prev = t.gather(concepts, &[chosen]);
            }
        }
        Ok(total.expect("at least the end step"))
    }
}

/// Target nodes image by image, shuffled within each image.
pub fn target_order(images: &[Vec<usize>], targets: &[bool], seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = Vec::new();
    for ids in images {
        let mut group: Vec<usize> = ids.iter().copied().filter(|&j| targets[j]).collect();
        group.shuffle(&mut rng);
        order.extend(group);
    }
    order
}

/// First index of the maximum.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-image projection of encoded images onto a concept vocabulary.
#[derive(Clone, Debug)]
pub struct I2cModel {
    encoder: ImageEncoder,
    proj: Linear,
    vocabulary: Vec<String>,
    index: HashMap<String, usize>,
}

pub const I2C_PER_IMAGE: usize = 3;

impl I2cModel {
    pub fn new(store: &mut ParamStore, dims: PlannerDims, vocabulary: Vec<String>) -> Self {
        let encoder = ImageEncoder::new(store, "i2c.encoder", dims.feature_dim, dims.hidden_dim, dims.max_images);
        let proj = Linear::new(store, "i2c.proj", dims.hidden_dim, vocabulary.len().max(1), true);
        let index = vocabulary.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        I2cModel {
            encoder,
            proj,
            vocabulary,
            index,
        }
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    /// `N × |vocabulary|` concept logits.
    pub fn logits(&self, t: &mut Tape, s: &ParamStore, features: &Tensor) -> Result<Var> {
        let f = t.leaf(features.clone());
        let enc = self.encoder.forward(t, s, f)?;
        Ok(self.proj.forward(t, s, enc))
    }

    /// Multi-label cross-entropy against each image's target concepts.
    pub fn loss(&self, t: &mut Tape, s: &ParamStore, features: &Tensor, targets: &[BTreeSet<String>]) -> Result<Var> {
        let logits = self.logits(t, s, features)?;
        let width = t.value(logits).cols();
        let mut y = vec![0.0; t.value(logits).len()];
        for (i, set) in targets.iter().enumerate() {
            for c in set {
                if let Some(&k) = self.index.get(c) {
                    y[i * width + k] = 1.0;
                }
            }
        }
        Ok(t.bce_logits(logits, &y))
    }

    /// Top-`k` concepts per image; ties go to the lower vocabulary index.
    pub fn select(&self, s: &ParamStore, input: &SequenceInput, k: usize) -> Result<SelectionResult> {
        let mut t = Tape::new();
        let logits = self.logits(&mut t, s, &input.features)?;
        let logits = t.value(logits);
        logits.ensure_finite("concept logits")?;
        let mut out = SelectionResult::empty(input.image_count());
        for i in 0..input.image_count() {
            let row = logits.row_slice(i);
            let mut ranked: Vec<usize> = (0..self.vocabulary.len()).collect();
            ranked.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            for &c in ranked.iter().take(k) {
                let name = &self.vocabulary[c];
                out.concepts[i].push(name.clone());
                if let Some(&node) = input.images[i].iter().find(|&&j| &input.concepts[j] == name) {
                    out.nodes[i].push(node);
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;
    use crate::data::{EmbeddingTable, ImageEntry, KnowledgeEdgeList, SequenceRecord};
    use crate::graph::build_graph;
    use rand::Rng;

    pub(crate) fn toy_dims() -> PlannerDims {
        PlannerDims {
            feature_dim: 4,
            word_dim: 3,
            emb_dim: 4,
            hidden_dim: 4,
            heads: 2,
            max_images: 5,
        }
    }

    pub(crate) fn toy_input(seed: u64, images: usize, per_image: usize) -> SequenceInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lists: Vec<Vec<String>> = (0..images)
            .map(|i| (0..per_image).map(|j| format!("c{i}_{j}")).collect())
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
        SequenceInput::new(&rec, &g, &EmbeddingTable::new(3)).unwrap()
    }
}
