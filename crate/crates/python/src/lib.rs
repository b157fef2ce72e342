//! Python bindings: the run configuration, the command-line pipeline, clique
//! search and the evaluation metrics.

use std::collections::BTreeSet;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use storyplan::config::RunConfig;
use storyplan::error::Error;
use storyplan::mcsm::{self, CorrelationMaps, PrunedGraph, TauPolicy};
use storyplan::neural::Tensor;

create_exception!(pystoryplan, StoryplanError, PyException);

fn to_py(e: Error) -> PyErr {
    StoryplanError::new_err(e.to_string())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(to_py)
}

/// Run configuration with defaults for every field.
#[pyclass(name = "RunConfig", module = "pystoryplan")]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (path=None, overrides=Vec::new()))]
    fn new(path: Option<PathBuf>, overrides: Vec<String>) -> PyResult<Self> {
        let inner = RunConfig::load(path.as_deref(), &overrides).map_err(to_py)?;
        Ok(PyRunConfig { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (text, overrides=Vec::new()))]
    fn from_toml(text: &str, overrides: Vec<String>) -> PyResult<Self> {
        let inner = RunConfig::from_toml(text, &overrides).map_err(to_py)?;
        Ok(PyRunConfig { inner })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(seed={})", self.inner.seed)
    }
}

/// Runs the command-line front end with `args` (without the program name)
/// and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    let argv = std::iter::once("storyplan".to_string()).chain(args);
    storyplan::cli::main_with_args(argv)
}

/// Maximal cliques of an undirected graph, each sorted, in sorted order.
#[pyfunction]
fn maximal_cliques(n: usize, edges: Vec<(usize, usize)>) -> PyResult<Vec<Vec<usize>>> {
    if let Some(&(u, v)) = edges.iter().find(|(u, v)| *u >= n || *v >= n) {
        return Err(StoryplanError::new_err(format!("edge ({u}, {v}) outside {n} nodes")));
    }
    mcsm::enumerate_maximal_cliques(&PrunedGraph::from_edges(n, &edges), usize::MAX).map_err(to_py)
}

/// `(s, s_c, s_i)` for `members` under the given concept map and per-node
/// image scores; `images` lists node ids per image.
#[pyfunction]
fn score_clique(
    concept_map: Vec<Vec<f64>>,
    node_scores: Vec<f64>,
    images: Vec<Vec<usize>>,
    members: Vec<usize>,
) -> PyResult<(f64, f64, f64)> {
    let maps = correlation_maps(concept_map, &node_scores, &images)?;
    let s = mcsm::score_clique(&members, &maps);
    Ok((s.s, s.s_c, s.s_i))
}

fn correlation_maps(concept_map: Vec<Vec<f64>>, node_scores: &[f64], images: &[Vec<usize>]) -> PyResult<CorrelationMaps> {
    let concept = matrix(concept_map)?;
    let nodes: usize = images.iter().map(Vec::len).sum();
    if concept.rows() != nodes || concept.cols() != nodes || node_scores.len() != nodes {
        return Err(StoryplanError::new_err(format!(
            "{nodes} nodes need a {nodes}x{nodes} map and {nodes} scores"
        )));
    }
    Ok(CorrelationMaps::from_node_scores(concept, node_scores, images))
}

/// Threshold search over a concept map. Returns a dict with `members`,
/// `per_image`, `tau`, `outcome`, `qualifying` and `score`.
#[pyfunction]
#[pyo3(signature = (concept_map, node_scores, images, start=0.3, step=0.02, floor=0.05, min_cliques=5, min_size=7, max_size=15))]
#[allow(clippy::too_many_arguments)]
fn tau_search<'py>(
    py: Python<'py>,
    concept_map: Vec<Vec<f64>>,
    node_scores: Vec<f64>,
    images: Vec<Vec<usize>>,
    start: f64,
    step: f64,
    floor: f64,
    min_cliques: usize,
    min_size: usize,
    max_size: usize,
) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
    let maps = correlation_maps(concept_map, &node_scores, &images)?;
    let policy = TauPolicy {
        start,
        step,
        floor,
        min_cliques,
        min_size,
        max_size,
        ..TauPolicy::default()
    };
    let plan = mcsm::tau_search(&maps, &images, &policy);
    let d = pyo3::types::PyDict::new(py);
    d.set_item("members", plan.members)?;
    d.set_item("per_image", plan.per_image)?;
    d.set_item("tau", plan.tau)?;
    d.set_item("outcome", plan.outcome.as_str())?;
    d.set_item("qualifying", plan.qualifying)?;
    d.set_item("score", (plan.score.s, plan.score.s_c, plan.score.s_i))?;
    Ok(d)
}

/// `(precision, recall, f)` against the best-matching target set.
#[pyfunction]
fn concept_prf(selected: BTreeSet<String>, targets: Vec<BTreeSet<String>>) -> (f64, f64, f64) {
    let r = storyplan::eval::concept_prf(&selected, &targets);
    (r.precision, r.recall, r.f)
}

#[pyfunction]
fn harmonic_mean(p: f64, r: f64) -> f64 {
    storyplan::eval::harmonic_mean(p, r)
}

#[pyfunction]
fn pearson(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<f64> {
    storyplan::eval::pearson(&xs, &ys).map_err(to_py)
}

#[pyfunction]
fn distinct_n(stories: Vec<Vec<String>>, n: usize) -> PyResult<f64> {
    if n == 0 {
        return Err(StoryplanError::new_err("n must be positive"));
    }
    Ok(storyplan::eval::distinct_n(&stories, n))
}

#[pyfunction]
#[pyo3(signature = (candidates, references, n_max=4))]
fn corpus_bleu(candidates: Vec<Vec<String>>, references: Vec<Vec<Vec<String>>>, n_max: usize) -> PyResult<f64> {
    if candidates.len() != references.len() {
        return Err(StoryplanError::new_err("one reference set per candidate"));
    }
    Ok(storyplan::eval::corpus_bleu(&candidates, &references, n_max))
}

#[pyfunction]
fn rouge_l(candidate: Vec<String>, references: Vec<Vec<String>>) -> f64 {
    storyplan::eval::rouge_l(&candidate, &references)
}

/// Expected F of the random baseline, or `None` when candidates repeat.
#[pyfunction]
#[pyo3(signature = (candidates, target, k=3))]
fn rand_expected_f(candidates: Vec<Vec<String>>, target: BTreeSet<String>, k: usize) -> Option<f64> {
    storyplan::eval::rand_expected_f(&candidates, &target, k)
}

#[pyfunction]
fn template_sentence(concepts: Vec<String>) -> String {
    storyplan::realizer::template_sentence(&concepts)
}

/// `(name, passed, detail)` for the clique oracle and gradient checks.
#[pyfunction]
fn selftest() -> Vec<(String, bool, String)> {
    storyplan::selftest::run_all()
        .into_iter()
        .map(|r| (r.name, r.passed, r.detail))
        .collect()
}

#[pymodule]
fn pystoryplan(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("StoryplanError", m.py().get_type::<StoryplanError>())?;
    m.add("__version__", storyplan::artifact::VERSION)?;
    m.add_class::<PyRunConfig>()?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_function(wrap_pyfunction!(maximal_cliques, m)?)?;
    m.add_function(wrap_pyfunction!(score_clique, m)?)?;
    m.add_function(wrap_pyfunction!(tau_search, m)?)?;
    m.add_function(wrap_pyfunction!(concept_prf, m)?)?;
    m.add_function(wrap_pyfunction!(harmonic_mean, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(distinct_n, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(rand_expected_f, m)?)?;
    m.add_function(wrap_pyfunction!(template_sentence, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}
