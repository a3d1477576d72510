use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use super::transformer::{ForwardOptions, Model};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{HetaError, Result};

/// One next-token training pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainExample {
    pub context: Vec<usize>,
    pub answer: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub clip_norm: f64,
    /// Fraction of examples held out for accuracy measurement.
    pub holdout_fraction: f64,
    pub eval_every: usize,
    /// Stop early once held-out accuracy reaches this.
    pub stop_accuracy: f64,
    /// Minimum held-out accuracy for success.
    pub required_accuracy: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 16,
            lr: 3e-3,
            warmup: 100,
            clip_norm: 1.0,
            holdout_fraction: 0.1,
            eval_every: 100,
            stop_accuracy: 0.99,
            required_accuracy: 0.9,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainPoint {
    pub step: usize,
    pub loss: f64,
    pub holdout_accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub holdout_accuracy: f64,
    pub holdout_size: usize,
    pub history: Vec<TrainPoint>,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &Model) -> Self {
        let zeros: Vec<Vec<f64>> = model.params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, model: &mut Model, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (k, p) in model.params.tensors_mut().into_iter().enumerate() {
            let g = grads[k].data();
            let mut next = (**p).clone();
            for (j, w) in next.data_mut().iter_mut().enumerate() {
                let m = &mut self.m[k][j];
                let v = &mut self.v[k][j];
                *m = Self::B1 * *m + (1.0 - Self::B1) * g[j];
                *v = Self::B2 * *v + (1.0 - Self::B2) * g[j] * g[j];
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            }
            *p = Arc::new(next);
        }
    }
}

/// Mean next-token cross-entropy over `batch` and its parameter gradient.
pub fn loss_and_grad(model: &Model, batch: &[&TrainExample]) -> Result<(f64, Vec<Tensor>)> {
    let g = Graph::new();
    let bound = model.bind(&g, true)?;
    let opts = ForwardOptions::default();
    let mut total: Option<Var> = None;
    for ex in batch {
        let x = bound.lookup(&ex.context)?;
        let h = bound.residual(x, &opts, None)?;
        let lp = bound.read_logits(h, ex.context.len() - 1)?.log_softmax_rows()?;
        let nll = lp.index_flat(ex.answer)?.neg()?;
        total = Some(match total {
            Some(t) => t.add(nll)?,
            None => nll,
        });
    }
    let loss = total
        .ok_or_else(|| HetaError::Precondition("empty batch".into()))?
        .scale(1.0 / batch.len() as f64)?;
    let value = loss.item()?;
    let grads = g.grad(loss, bound.leaves())?;
    Ok((value, grads))
}

/// Fraction of examples whose argmax prediction is the answer.
pub fn accuracy(model: &Model, examples: &[TrainExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(HetaError::Precondition("no examples to score".into()));
    }
    let opts = ForwardOptions::default();
    let mut hits = 0;
    for ex in examples {
        let x = model.embed(&ex.context)?;
        let logits = model.read_logits(&x, ex.context.len() - 1, &opts)?;
        if argmax(&logits) == ex.answer {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Adam on next-token cross-entropy at the read position of each example.
///
/// Fails with [`HetaError::NonConvergence`] if held-out accuracy stays
/// below `cfg.required_accuracy` when the step budget runs out.
pub fn train(model: &mut Model, examples: &[TrainExample], cfg: &TrainConfig) -> Result<TrainReport> {
    if examples.len() < 2 {
        return Err(HetaError::Precondition("need at least two training examples".into()));
    }
    for ex in examples {
        if ex.context.is_empty() {
            return Err(HetaError::Precondition("empty training context".into()));
        }
        model.check_ids(&ex.context)?;
        model.check_ids(&[ex.answer])?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = ((examples.len() as f64 * cfg.holdout_fraction).round() as usize).clamp(1, examples.len() - 1);
    let holdout: Vec<TrainExample> = order[..n_hold].iter().map(|&i| examples[i].clone()).collect();
    let mut pool: Vec<usize> = order[n_hold..].to_vec();

    let mut adam = Adam::new(model);
    let mut history = Vec::new();
    let mut cursor = pool.len();
    let mut acc = 0.0;
    let mut running = 0.0;
    let mut step = 0;
    while step < cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == pool.len() {
                pool.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&examples[pool[cursor]]);
            cursor += 1;
        }
        let (loss, mut grads) = loss_and_grad(model, &batch)?;
        let norm = grads.iter().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        if norm > cfg.clip_norm {
            grads = grads.iter().map(|g| g.scale(cfg.clip_norm / norm)).collect();
        }
        let lr = cfg.lr * ((step + 1) as f64 / cfg.warmup.max(1) as f64).min(1.0);
        adam.step(model, &grads, lr);
        running = if step == 0 { loss } else { 0.95 * running + 0.05 * loss };
        step += 1;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            acc = accuracy(model, &holdout)?;
            history.push(TrainPoint {
                step,
                loss: running,
                holdout_accuracy: acc,
            });
            if acc >= cfg.stop_accuracy {
                break;
            }
        }
    }
    if acc < cfg.required_accuracy {
        return Err(HetaError::NonConvergence {
            steps: step,
            target: cfg.required_accuracy,
            achieved: acc,
        });
    }
    Ok(TrainReport {
        steps: step,
        holdout_accuracy: acc,
        holdout_size: holdout.len(),
        history,
    })
}
