//! Mini-batch training loop shared by the planners and the realizer.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{adam_step, clip_grad_norm, AdamConfig, ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 20,
            batch_size: 8,
            adam: AdamConfig::default(),
            clip_norm: Some(5.0),
            seed: 0,
        }
    }
}

/// Context handed to the per-sample loss builder.
#[derive(Clone, Copy, Debug)]
pub struct Step {
    pub epoch: usize,
    pub sample: usize,
}

/// Runs `epochs` passes over `samples` items in a seeded shuffled order.
/// `build` records one sample's loss on a fresh tape, or returns `None` to
/// skip it. Returns the mean loss of each epoch.
pub fn fit<F>(store: &mut ParamStore, samples: usize, opts: &TrainOptions, mut build: F) -> Result<Vec<f64>>
where
    F: FnMut(&mut Tape, &ParamStore, Step) -> Result<Option<Var>>,
{
    let batch = opts.batch_size.max(1);
    let mut history = Vec::with_capacity(opts.epochs);
    let mut order: Vec<usize> = (0..samples).collect();
    for epoch in 0..opts.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(batch) {
            store.zero_grad();
            let mut used = 0usize;
            for &sample in chunk {
                let mut t = Tape::new();
                let Some(loss) = build(&mut t, store, Step { epoch, sample })? else {
                    continue;
                };
                let value = t.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}, sample {sample}")));
                }
                t.backward(loss);
                t.accumulate_into(store);
                total += value;
                count += 1;
                used += 1;
            }
            if used == 0 {
                continue;
            }
            store.scale_grads(1.0 / used as f64);
            if let Some(max) = opts.clip_norm {
                clip_grad_norm(store, max);
            }
            adam_step(store, &opts.adam);
        }
        let mean = if count == 0 { 0.0 } else { total / count as f64 };
        log::debug!("epoch {epoch}: mean loss {mean:.6}");
        history.push(mean);
    }
    store.zero_grad();
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::Tensor;

    fn quadratic(opts: &TrainOptions) -> (ParamStore, Vec<f64>) {
        let mut store = ParamStore::new(1);
        store.insert("w", Tensor::row(&[2.0, -1.0]));
        let targets = [Tensor::row(&[0.5, 0.5]), Tensor::row(&[0.3, 0.7])];
        let hist = fit(&mut store, 2, opts, |t, s, step| {
            let w = t.param(s, "w");
            Ok(Some(t.sq_err(w, targets[step.sample].clone(), None)))
        })
        .unwrap();
        (store, hist)
    }

    #[test]
    fn loss_decreases_and_runs_repeat() {
        let opts = TrainOptions {
            epochs: 200,
            batch_size: 2,
            adam: AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            clip_norm: None,
            seed: 4,
        };
        let (a, ha) = quadratic(&opts);
        let (b, hb) = quadratic(&opts);
        assert!(ha.last().unwrap() < &0.1);
        assert!(ha[0] > *ha.last().unwrap());
        assert_eq!(ha, hb);
        assert!(a.bit_equal(&b));
    }
}
