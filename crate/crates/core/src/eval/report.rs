use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{concept_prf, distinct_n, macro_average, PrfResult};

/// One planner's output over a test set. A failed sequence carries its
/// diagnostic instead of a selection.
#[derive(Clone, Debug, Default)]
pub struct PlannerRun {
    pub method: String,
    pub selections: Vec<Result<BTreeSet<String>, String>>,
    /// Realized story tokens, one list per sequence; may be empty.
    pub stories: Vec<Vec<String>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub distinct_2: f64,
    pub distinct_3: f64,
    pub distinct_4: f64,
}

impl DiversityReport {
    pub fn of(stories: &[Vec<String>]) -> Self {
        DiversityReport {
            distinct_2: distinct_n(stories, 2),
            distinct_3: distinct_n(stories, 3),
            distinct_4: distinct_n(stories, 4),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub method: String,
    #[serde(flatten)]
    pub scores: PrfResult,
    pub sequences: usize,
    pub failures: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diversity: Option<DiversityReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
}

impl BenchmarkReport {
    pub fn row(&self, method: &str) -> Option<&BenchmarkRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Tab-separated table, scores ×100.
    pub fn to_tsv(&self) -> String {
        let with_div = self.rows.iter().any(|r| r.diversity.is_some());
        let mut out = String::from("Method\tPrecision\tRecall\tF");
        if with_div {
            out.push_str("\tDist-2\tDist-3\tDist-4");
        }
        out.push('\n');
        for r in &self.rows {
            let s = &r.scores;
            write!(out, "{}\t{:.2}\t{:.2}\t{:.2}", r.method, 100.0 * s.precision, 100.0 * s.recall, 100.0 * s.f)
                .expect("write to string");
            if with_div {
                match &r.diversity {
                    Some(d) => write!(
                        out,
                        "\t{:.2}\t{:.2}\t{:.2}",
                        100.0 * d.distinct_2,
                        100.0 * d.distinct_3,
                        100.0 * d.distinct_4
                    )
                    .expect("write to string"),
                    None => out.push_str("\t-\t-\t-"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Macro-averaged P/R/F per planner. `targets[i]` holds one target set per
/// gold story of sequence `i`; failed sequences score zero.
pub fn benchmark(runs: &[PlannerRun], targets: &[Vec<BTreeSet<String>>]) -> BenchmarkReport {
    let rows = runs
        .iter()
        .map(|run| {
            let mut failures = Vec::new();
            let scores: Vec<PrfResult> = targets
                .iter()
                .enumerate()
                .map(|(i, t)| match run.selections.get(i) {
                    Some(Ok(sel)) => concept_prf(sel, t),
                    Some(Err(msg)) => {
                        log::warn!("{}: sequence {i} failed: {msg}", run.method);
                        failures.push(format!("sequence {i}: {msg}"));
                        PrfResult::default()
                    }
                    None => {
                        failures.push(format!("sequence {i}: no selection"));
                        PrfResult::default()
                    }
                })
                .collect();
            BenchmarkRow {
                method: run.method.clone(),
                scores: macro_average(&scores),
                sequences: targets.len(),
                failures,
                diversity: (!run.stories.is_empty()).then(|| DiversityReport::of(&run.stories)),
            }
        })
        .collect();
    BenchmarkReport { rows }
}
