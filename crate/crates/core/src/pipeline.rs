//! Glue between data, planners and evaluation: per-sequence preparation,
//! training loops for each planner, and plan records for every method.

use std::collections::BTreeSet;

use crate::data::{CorpusStats, EmbeddingTable, KnowledgeEdgeList, SequenceRecord};
use crate::error::Result;
use crate::eval::{rand_baseline, RAND_PER_IMAGE};
use crate::graph::{graph_for_record, sequence_seed, CandidateGraph, FilterConfig};
use crate::mcsm::{McsmModel, TauPolicy};
use crate::neural::ParamStore;
use crate::planner::{ConceptSets, PlanRecord, SelectionResult, SequenceInput};
use crate::ssm::{I2cModel, SsmModel};
use crate::training::{fit, TrainOptions};

/// One sequence ready for a planner.
#[derive(Clone, Debug)]
pub struct PreparedSequence {
    pub graph: CandidateGraph,
    pub input: SequenceInput,
    pub sets: ConceptSets,
}

impl PreparedSequence {
    /// Target sets of every gold story.
    pub fn targets(&self) -> Vec<BTreeSet<String>> {
        (0..self.sets.gold.len()).map(|g| self.sets.targets(g)).collect()
    }
}

/// Builds graphs and model inputs for `records`.
pub fn prepare(
    records: &[SequenceRecord],
    kb: &KnowledgeEdgeList,
    stats: &CorpusStats,
    words: &EmbeddingTable,
    filter: &FilterConfig,
    seed: u64,
) -> Result<Vec<PreparedSequence>> {
    records
        .iter()
        .map(|rec| {
            let graph = graph_for_record(rec, kb, stats, filter, seed);
            prepare_with_graph(rec, graph, words)
        })
        .collect()
}

pub fn prepare_with_graph(rec: &SequenceRecord, graph: CandidateGraph, words: &EmbeddingTable) -> Result<PreparedSequence> {
    let input = SequenceInput::new(rec, &graph, words)?;
    let sets = ConceptSets::new(&graph, &rec.gold_stories);
    Ok(PreparedSequence { graph, input, sets })
}

fn story_index(epoch: usize, stories: usize) -> usize {
    if stories == 0 {
        0
    } else {
        epoch % stories
    }
}

/// Gold stories are visited round-robin across epochs.
pub fn train_ssm(store: &mut ParamStore, model: &SsmModel, data: &[PreparedSequence], opts: &TrainOptions) -> Result<Vec<f64>> {
    fit(store, data.len(), opts, |t, s, step| {
        let p = &data[step.sample];
        let targets = p.sets.target_mask(story_index(step.epoch, p.sets.gold.len()));
        let seed = sequence_seed(opts.seed ^ step.epoch as u64, &p.input.sequence_id);
        model.loss(t, s, &p.input, &targets, seed).map(Some)
    })
}

pub fn train_mcsm(store: &mut ParamStore, model: &McsmModel, data: &[PreparedSequence], opts: &TrainOptions) -> Result<Vec<f64>> {
    fit(store, data.len(), opts, |t, s, step| {
        let p = &data[step.sample];
        let targets = p.sets.target_mask(story_index(step.epoch, p.sets.gold.len()));
        model.loss(t, s, &p.input, &targets)
    })
}

/// Every candidate concept seen in `data`, sorted.
pub fn i2c_vocabulary(data: &[PreparedSequence]) -> Vec<String> {
    let all: BTreeSet<String> = data.iter().flat_map(|p| p.sets.candidates.iter().cloned()).collect();
    all.into_iter().collect()
}

/// Per-image targets: gold concepts among that image's candidates.
fn image_targets(p: &PreparedSequence, story: usize) -> Vec<BTreeSet<String>> {
    let mask = p.sets.target_mask(story);
    p.input
        .images
        .iter()
        .map(|ids| ids.iter().filter(|&&j| mask[j]).map(|&j| p.sets.candidates[j].clone()).collect())
        .collect()
}

pub fn train_i2c(store: &mut ParamStore, model: &I2cModel, data: &[PreparedSequence], opts: &TrainOptions) -> Result<Vec<f64>> {
    fit(store, data.len(), opts, |t, s, step| {
        let p = &data[step.sample];
        let targets = image_targets(p, story_index(step.epoch, p.sets.gold.len()));
        model.loss(t, s, &p.input.features, &targets).map(Some)
    })
}

fn record(p: &PreparedSequence, method: &str, sel: SelectionResult) -> PlanRecord {
    PlanRecord {
        sequence_id: p.input.sequence_id.clone(),
        method: method.to_string(),
        concepts: sel.concepts,
        nodes: sel.nodes,
        tau: None,
        outcome: None,
        score: None,
    }
}

pub fn plan_rand(p: &PreparedSequence, seed: u64) -> PlanRecord {
    let candidates = p.graph.candidates();
    let concepts = rand_baseline(&candidates, RAND_PER_IMAGE, sequence_seed(seed, &p.input.sequence_id));
    let nodes = p
        .input
        .images
        .iter()
        .zip(&concepts)
        .map(|(ids, names)| {
            ids.iter()
                .copied()
                .filter(|&j| names.contains(&p.sets.candidates[j]))
                .collect()
        })
        .collect();
    record(p, "rand", SelectionResult { concepts, nodes })
}

pub fn plan_i2c(model: &I2cModel, store: &ParamStore, p: &PreparedSequence) -> Result<PlanRecord> {
    Ok(record(p, "i2c", model.select(store, &p.input, crate::ssm::I2C_PER_IMAGE)?))
}

pub fn plan_ssm(model: &SsmModel, store: &ParamStore, p: &PreparedSequence, t_max: usize) -> Result<PlanRecord> {
    Ok(record(p, "ssm", model.select(store, &p.input, t_max)?))
}

pub fn plan_mcsm(model: &McsmModel, store: &ParamStore, p: &PreparedSequence, policy: &TauPolicy) -> Result<PlanRecord> {
    let plan = model.plan(store, &p.input, policy)?;
    let sel = SelectionResult {
        concepts: p.input.names(&plan.per_image),
        nodes: plan.per_image.clone(),
    };
    let mut r = record(p, "mcsm", sel);
    r.tau = Some(plan.tau);
    r.outcome = Some(plan.outcome.as_str().to_string());
    r.score = Some(plan.score);
    Ok(r)
}

/// Distinct selected concepts of a plan.
pub fn plan_concepts(plan: &PlanRecord) -> BTreeSet<String> {
    plan.concepts.iter().flatten().cloned().collect()
}
