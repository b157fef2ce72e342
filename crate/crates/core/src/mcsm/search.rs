//! Clique scoring and the descending-threshold search over the concept map.

use serde::{Deserialize, Serialize};

use super::clique::{enumerate_maximal_cliques, prune_graph, DEFAULT_CLIQUE_CAP};
use super::CorrelationMaps;
use crate::planner::ScoreBreakdown;

/// Lower clamp applied to map entries before taking logs.
pub const LOG_FLOOR: f64 = 1e-8;

fn clamped_ln(x: f64) -> f64 {
    x.max(LOG_FLOOR).ln()
}

/// Mean log concept correlation over ordered member pairs plus the mean log
/// image correlation of the members. A single member has `s_c = 0`.
pub fn score_clique(members: &[usize], maps: &CorrelationMaps) -> ScoreBreakdown {
    let m = members.len();
    let s_c = if m < 2 {
        0.0
    } else {
        let mut acc = 0.0;
        for &i in members {
            for &j in members {
                if i != j {
                    acc += clamped_ln(maps.concept.get(i, j));
                }
            }
        }
        acc / ((m - 1) * m) as f64
    };
    let s_i = if m == 0 {
        0.0
    } else {
        members.iter().map(|&j| clamped_ln(maps.node_image_score(j))).sum::<f64>() / m as f64
    };
    ScoreBreakdown { s: s_c + s_i, s_c, s_i }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TauPolicy {
    pub start: f64,
    pub step: f64,
    pub floor: f64,
    /// Qualifying cliques needed to stop at a threshold.
    pub min_cliques: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub clique_cap: usize,
}

impl Default for TauPolicy {
    fn default() -> Self {
        TauPolicy {
            start: 0.30,
            step: 0.02,
            floor: 0.05,
            min_cliques: 5,
            min_size: 7,
            max_size: 15,
            clique_cap: DEFAULT_CLIQUE_CAP,
        }
    }
}

impl TauPolicy {
    /// `start, start - step, …` while above the floor, then the floor itself.
    pub fn schedule(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut k = 0u32;
        loop {
            let tau = ((self.start - f64::from(k) * self.step) * 1e9).round() / 1e9;
            if tau <= self.floor + 1e-12 || self.step <= 0.0 && k > 0 {
                break;
            }
            out.push(tau);
            k += 1;
        }
        out.push(self.floor);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanOutcome {
    /// Stopped at a threshold with enough mid-sized cliques.
    Qualified,
    /// No threshold qualified; best clique of size ≥ 2 seen during the descent.
    CliqueFallback,
    /// No clique of size ≥ 2 at any threshold; one concept per image.
    ImageArgmax,
}

impl PlanOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            PlanOutcome::Qualified => "qualified",
            PlanOutcome::CliqueFallback => "clique_fallback",
            PlanOutcome::ImageArgmax => "image_argmax",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CliquePlan {
    /// Sorted node ids.
    pub members: Vec<usize>,
    pub per_image: Vec<Vec<usize>>,
    pub score: ScoreBreakdown,
    pub tau: f64,
    pub outcome: PlanOutcome,
    /// Qualifying cliques at `tau` (zero for fallbacks).
    pub qualifying: usize,
}

fn better(a: &(ScoreBreakdown, Vec<usize>), b: &(ScoreBreakdown, Vec<usize>)) -> bool {
    a.0.s > b.0.s || a.0.s == b.0.s && a.1 < b.1
}

/// Lowers the threshold until at least `min_cliques` maximal cliques of the
/// configured size exist and returns the best-scoring one; ties go to the
/// lexicographically smallest member set. `images` lists node ids per image.
pub fn tau_search(maps: &CorrelationMaps, images: &[Vec<usize>], policy: &TauPolicy) -> CliquePlan {
    let partition = |members: &[usize]| -> Vec<Vec<usize>> {
        images
            .iter()
            .map(|ids| ids.iter().copied().filter(|j| members.contains(j)).collect())
            .collect()
    };
    let mut fallback: Option<(ScoreBreakdown, Vec<usize>, f64)> = None;
    for tau in policy.schedule() {
        let graph = prune_graph(&maps.concept, tau);
        let cliques = match enumerate_maximal_cliques(&graph, policy.clique_cap) {
            Ok(c) => c,
            Err(e) => {
                log::warn!("threshold {tau}: {e}; skipped");
                continue;
            }
        };
        let sized: Vec<&Vec<usize>> = cliques
            .iter()
            .filter(|c| (policy.min_size..=policy.max_size).contains(&c.len()))
            .collect();
        if sized.len() >= policy.min_cliques {
            let mut best: Option<(ScoreBreakdown, Vec<usize>)> = None;
            for c in &sized {
                let cand = (score_clique(c, maps), (*c).clone());
                if best.as_ref().map_or(true, |b| better(&cand, b)) {
                    best = Some(cand);
                }
            }
            let (score, members) = best.expect("qualifying clique");
            return CliquePlan {
                per_image: partition(&members),
                members,
                score,
                tau,
                outcome: PlanOutcome::Qualified,
                qualifying: sized.len(),
            };
        }
        for c in cliques.iter().filter(|c| c.len() >= 2) {
            let cand = (score_clique(c, maps), c.clone());
            let replace = fallback
                .as_ref()
                .map_or(true, |(s, m, _)| better(&cand, &(*s, m.clone())));
            if replace {
                fallback = Some((cand.0, cand.1, tau));
            }
        }
    }
    if let Some((score, members, tau)) = fallback {
        return CliquePlan {
            per_image: partition(&members),
            members,
            score,
            tau,
            outcome: PlanOutcome::CliqueFallback,
            qualifying: 0,
        };
    }
    let mut members: Vec<usize> = images
        .iter()
        .filter(|ids| !ids.is_empty())
        .map(|ids| {
            let mut best = ids[0];
            for &j in ids {
                if maps.node_image_score(j) > maps.node_image_score(best) {
                    best = j;
                }
            }
            best
        })
        .collect();
    members.sort_unstable();
    CliquePlan {
        per_image: partition(&members),
        score: score_clique(&members, maps),
        members,
        tau: policy.floor,
        outcome: PlanOutcome::ImageArgmax,
        qualifying: 0,
    }
}
