//! Mini-batch bookkeeping and the shared optimization step.

use rand::seq::SliceRandom;

use crate::error::{invalid, Result};
use crate::nn::optim::clip_grad_norm;
use crate::nn::{AdamW, AdamWConfig, Graph, ParamStore, Var};
use crate::rng::{derive, rng};

/// Hyperparameters common to every training loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            lr: 3e-3,
            weight_decay: 0.01,
            warmup_fraction: 0.1,
            clip: 1.0,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        if self.clip < 0.0 {
            return Err(invalid("clip must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        self.optimizer(1).validate()
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> u64 {
        (self.epochs * self.steps_per_epoch(n)) as u64
    }

    pub fn optimizer(&self, total_steps: u64) -> AdamWConfig {
        AdamWConfig {
            lr_peak: self.lr,
            weight_decay: self.weight_decay,
            total_steps,
            warmup_fraction: self.warmup_fraction,
            ..Default::default()
        }
    }
}

/// One row of a training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Seeded shuffle of `0..n` cut into batches of at most `batch` items.
pub fn batches(n: usize, batch: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng(derive(seed, &[0xba7c, epoch])));
    idx.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

/// Builds the loss with `f`, backpropagates, clips and applies one AdamW
/// update. Returns the loss value and the learning rate used.
pub fn optimizer_step<F>(store: &mut ParamStore, opt: &mut AdamW, clip: f64, f: F) -> Result<(f64, f64)>
where
    F: FnOnce(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(invalid(format!("loss became {value}")));
    }
    g.backward(loss)?;
    store.zero_grad();
    g.accumulate_into(store)?;
    if clip > 0.0 {
        clip_grad_norm(store, clip);
    }
    let lr = opt.step(store)?;
    Ok((value, lr))
}

/// Evaluates a loss without touching gradients.
pub fn eval_loss<F>(store: &ParamStore, f: F) -> Result<f64>
where
    F: FnOnce(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    Ok(g.value(loss).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_partition_indices() {
        let b = batches(10, 4, 3, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, batches(10, 4, 3, 0));
        assert_ne!(b, batches(10, 4, 3, 1));
    }

    #[test]
    fn step_counts() {
        let c = TrainConfig {
            epochs: 3,
            batch_size: 8,
            ..Default::default()
        };
        assert_eq!(c.steps_per_epoch(20), 3);
        assert_eq!(c.total_steps(20), 9);
    }
}
