//! Maximal clique selection: bilinear concept–concept and image–concept
//! correlation maps trained against indicator targets, then clique search
//! over the thresholded concept map.

mod clique;
mod search;

pub use clique::{brute_force_maximal_cliques, enumerate_maximal_cliques, prune_graph, PrunedGraph, DEFAULT_CLIQUE_CAP};
pub use search::{score_clique, tau_search, CliquePlan, PlanOutcome, TauPolicy, LOG_FLOOR};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::neural::{Linear, ParamStore, Tape, Tensor, Var};
use crate::planner::{PlannerBackbone, PlannerDims, SequenceInput};

/// Node `j` sits in image `slots[j].0` at position `slots[j].1`.
fn slots_of(images: &[Vec<usize>]) -> (Vec<(usize, usize)>, usize) {
    let n: usize = images.iter().map(Vec::len).sum();
    let mut slots = vec![(0, 0); n];
    for (i, ids) in images.iter().enumerate() {
        for (p, &j) in ids.iter().enumerate() {
            slots[j] = (i, p);
        }
    }
    (slots, images.iter().map(Vec::len).max().unwrap_or(0))
}

/// `concept` is `n × n` over graph nodes; `image` is `N × K` with unused
/// slots left at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMaps {
    pub concept: Tensor,
    pub image: Tensor,
    pub slots: Vec<(usize, usize)>,
}

impl CorrelationMaps {
    /// Builds the maps from an `n × n` concept map and one image score per node.
    pub fn from_node_scores(concept: Tensor, node_scores: &[f64], images: &[Vec<usize>]) -> Self {
        let (slots, k) = slots_of(images);
        assert_eq!(node_scores.len(), slots.len());
        let mut image = Tensor::zeros(images.len(), k);
        for (j, &(i, p)) in slots.iter().enumerate() {
            image.set(i, p, node_scores[j]);
        }
        CorrelationMaps { concept, image, slots }
    }

    pub fn node_image_score(&self, node: usize) -> f64 {
        let (i, p) = self.slots[node];
        self.image.get(i, p)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetMaps {
    pub concept: Tensor,
    pub image: Tensor,
}

/// Indicator targets: a concept pair is 1 when both nodes are targets, an
/// image slot is 1 when its node is a target.
pub fn target_maps(images: &[Vec<usize>], targets: &[bool]) -> TargetMaps {
    let (slots, k) = slots_of(images);
    let n = slots.len();
    assert_eq!(targets.len(), n);
    let mut concept = Tensor::zeros(n, n);
    let mut image = Tensor::zeros(images.len(), k);
    for i in 0..n {
        if targets[i] {
            image.set(slots[i].0, slots[i].1, 1.0);
            for j in 0..n {
                if targets[j] {
                    concept.set(i, j, 1.0);
                }
            }
        }
    }
    TargetMaps { concept, image }
}

/// `λ_c·‖M_C − M̂_C‖² + λ_i·‖M_I − M̂_I‖²`
pub fn mcsm_loss(maps: &CorrelationMaps, targets: &TargetMaps, concept_weight: f64, image_weight: f64) -> f64 {
    let sq = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    concept_weight * sq(&maps.concept, &targets.concept) + image_weight * sq(&maps.image, &targets.image)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub concept: f64,
    pub image: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            concept: 1.0,
            image: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct McsmModel {
    pub backbone: PlannerBackbone,
    concept_left: Linear,
    concept_right: Linear,
    image_proj: Linear,
    concept_image: Linear,
    pub weights: LossWeights,
}

impl McsmModel {
    pub fn new(store: &mut ParamStore, dims: PlannerDims, weights: LossWeights) -> Self {
        let e = dims.emb_dim;
        McsmModel {
            backbone: PlannerBackbone::new(store, "mcsm", dims),
            concept_left: Linear::new(store, "mcsm.concept_left", e, e, false),
            concept_right: Linear::new(store, "mcsm.concept_right", e, e, false),
            image_proj: Linear::new(store, "mcsm.image_proj", dims.hidden_dim, e, false),
            concept_image: Linear::new(store, "mcsm.concept_image", e, e, false),
            weights,
        }
    }

    /// Map entries from already computed features: the `n × n` concept map
    /// and a `1 × n` row holding each node's score against its own image.
    pub fn maps_from_features(
        &self,
        t: &mut Tape,
        s: &ParamStore,
        concepts: Var,
        encoded: Var,
        image_of: &[usize],
    ) -> (Var, Var) {
        let left = self.concept_left.forward(t, s, concepts);
        let right = self.concept_right.forward(t, s, concepts);
        let cc = t.matmul_t(left, right);
        let concept_map = t.sigmoid(cc);
        let img = self.image_proj.forward(t, s, encoded);
        let con = self.concept_image.forward(t, s, concepts);
        let ic = t.matmul_t(img, con);
        let n = image_of.len();
        let own: Vec<usize> = image_of.iter().enumerate().map(|(j, &i)| i * n + j).collect();
        let picked = t.pick(ic, &own);
        (concept_map, t.sigmoid(picked))
    }

    pub fn maps_on_tape(&self, t: &mut Tape, s: &ParamStore, input: &SequenceInput) -> Result<(Var, Var)> {
        let (encoded, concepts) = self.backbone.forward(t, s, input)?;
        Ok(self.maps_from_features(t, s, concepts, encoded, &input.image_of))
    }

    pub fn correlation_maps(&self, s: &ParamStore, input: &SequenceInput) -> Result<CorrelationMaps> {
        let n = input.node_count();
        if n == 0 {
            return Ok(CorrelationMaps::from_node_scores(Tensor::zeros(0, 0), &[], &input.images));
        }
        let mut t = Tape::new();
        let (cm, im) = self.maps_on_tape(&mut t, s, input)?;
        let concept = t.value(cm).clone();
        concept.ensure_finite("concept map")?;
        let scores = t.value(im).data().to_vec();
        Ok(CorrelationMaps::from_node_scores(concept, &scores, &input.images))
    }

    /// Weighted squared error of both maps against the indicator targets.
    pub fn loss(&self, t: &mut Tape, s: &ParamStore, input: &SequenceInput, targets: &[bool]) -> Result<Option<Var>> {
        let n = input.node_count();
        if n == 0 {
            return Ok(None);
        }
        let (cm, im) = self.maps_on_tape(t, s, input)?;
        let mut tc = Tensor::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if targets[i] && targets[j] {
                    tc.set(i, j, 1.0);
                }
            }
        }
        let ti = Tensor::row(&targets.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect::<Vec<_>>());
        let lc = t.sq_err(cm, tc, None);
        let li = t.sq_err(im, ti, None);
        let lc = t.scale(lc, self.weights.concept);
        let li = t.scale(li, self.weights.image);
        Ok(Some(t.add(lc, li)))
    }

    pub fn plan(&self, s: &ParamStore, input: &SequenceInput, policy: &TauPolicy) -> Result<CliquePlan> {
        let maps = self.correlation_maps(s, input)?;
        Ok(tau_search(&maps, &input.images, policy))
    }
}
