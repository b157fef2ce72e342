//! Central finite-difference oracle for tape gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many scalars per parameter tensor (sampled), all if `None`.
    pub max_per_param: Option<usize>,
    /// Denominator floor, multiplied by `max(1, |loss|)`: central-difference
    /// roundoff grows like `ε·|loss| / step`, so tiny gradients of a large
    /// loss are compared absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_per_param: None,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// (parameter, flat index, analytic, numeric) at the worst scalar.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn loss_value<F>(store: &ParamStore, build: &F) -> f64
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, store);
    tape.scalar(loss)
}

/// Gradients of the tape loss produced by `build`, keyed by parameter name.
pub fn analytic_grads<F>(store: &ParamStore, build: &F) -> BTreeMap<String, Tensor>
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    let mut scratch = store.clone();
    scratch.zero_grad();
    let mut tape = Tape::new();
    let loss = build(&mut tape, &scratch);
    tape.backward(loss);
    tape.accumulate_into(&mut scratch);
    scratch
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(n, p)| (n.to_string(), p.grad.clone()))
        .collect()
}

/// Compares `analytic` against central differences of the loss built by `build`.
pub fn compare_with_fd<F>(
    store: &ParamStore,
    analytic: &BTreeMap<String, Tensor>,
    build: &F,
    opts: &GradCheckOptions,
) -> GradCheckReport
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    let floor = opts.floor * loss_value(store, build).abs().max(1.0);
    for (name, grad) in analytic {
        let n = grad.len();
        let idx: Vec<usize> = match opts.max_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in idx {
            let orig = work.value(name).expect("param").data()[i];
            work.value_mut(name).unwrap().data_mut()[i] = orig + opts.step;
            let plus = loss_value(&work, build);
            work.value_mut(name).unwrap().data_mut()[i] = orig - opts.step;
            let minus = loss_value(&work, build);
            work.value_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grad.data()[i];
            let err = relative_error(a, numeric, floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i, a, numeric));
            }
        }
    }
    report
}

/// Finite-difference check of every non-frozen parameter against the tape.
pub fn grad_check<F>(store: &ParamStore, build: F, opts: &GradCheckOptions) -> GradCheckReport
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    let analytic = analytic_grads(store, &build);
    compare_with_fd(store, &analytic, &build, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half_norm(t: &mut Tape, s: &ParamStore) -> Var {
        let th = t.param(s, "theta");
        let sq = t.mul(th, th);
        let sum = t.sum(sq);
        t.scale(sum, 0.5)
    }

    fn store() -> ParamStore {
        let mut s = ParamStore::new(11);
        s.glorot("theta", 4, 5);
        s
    }

    #[test]
    fn quadratic_matches_to_1e8() {
        let s = store();
        let r = grad_check(&s, half_norm, &GradCheckOptions::default());
        assert_eq!(r.checked, 20);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        // analytic gradient of ½‖θ‖² is θ itself
        let g = analytic_grads(&s, &half_norm);
        assert!(g["theta"].max_abs_diff(s.value("theta").unwrap()) < 1e-15);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let s = store();
        let mut g = analytic_grads(&s, &half_norm);
        g.get_mut("theta").unwrap().data_mut()[3] += 0.5;
        let r = compare_with_fd(&s, &g, &half_norm, &GradCheckOptions::default());
        assert!(r.max_rel_error > 1e-2, "{r:?}");
        assert_eq!(r.worst.as_ref().unwrap().1, 3);
    }

    #[test]
    fn sampling_limits_checked_count() {
        let s = store();
        let opts = GradCheckOptions {
            max_per_param: Some(7),
            ..Default::default()
        };
        assert_eq!(grad_check(&s, half_norm, &opts).checked, 7);
    }
}
