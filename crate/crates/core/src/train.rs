//! The training loop: shuffled mini-batches, AdamW, warmup + cosine.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backward::loss_and_gradients;
use crate::config::TrainConfig;
use crate::error::{input, Error, Result};
use crate::freeze::{trainable_fraction, FreezeMask};
use crate::model::TransformerModel;
use crate::optim::{AdamW, WarmupCosine};

/// Source of wall-clock time in seconds. The core has no clock of its own.
pub trait Clock {
    fn now(&self) -> f64;
}

/// A clock that never advances; every duration reads as zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn now(&self) -> f64 {
        0.0
    }
}

/// Outcome of one `train` call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Token-weighted mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub seconds: f64,
    pub trainable_params: usize,
    pub total_params: usize,
    pub trainable_fraction: f64,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }

    /// Concatenates a later stage onto this report.
    pub fn extend(&mut self, later: TrainReport) {
        self.epoch_losses.extend(later.epoch_losses);
        self.steps += later.steps;
        self.seconds += later.seconds;
        self.trainable_params = self.trainable_params.max(later.trainable_params);
        self.trainable_fraction = self.trainable_fraction.max(later.trainable_fraction);
    }
}

/// Sequences truncated to the effective length cap; ones with nothing to
/// predict are dropped.
pub(crate) fn prepare<'a>(model: &TransformerModel, data: &'a [Vec<u32>], config: &TrainConfig) -> Vec<&'a [u32]> {
    let cap = config.max_seq_len.min(model.config.max_seq_len);
    data.iter()
        .map(|s| &s[..s.len().min(cap)])
        .filter(|s| s.len() >= 2)
        .collect()
}

/// Trains the groups `mask` leaves trainable on `data`.
///
/// Frozen parameters are never written. Each epoch visits the sequences in
/// an order drawn from `config.seed`, so a fixed seed and dataset give an
/// identical loss curve.
pub fn train(
    model: &mut TransformerModel,
    data: &[Vec<u32>],
    config: &TrainConfig,
    mask: &FreezeMask,
    clock: &dyn Clock,
) -> Result<TrainReport> {
    config.validate()?;
    mask.validate(model)?;
    let seqs = prepare(model, data, config);
    if seqs.is_empty() {
        return Err(input("training data is empty (no sequence with at least 2 tokens)"));
    }
    let batches_per_epoch = seqs.len().div_ceil(config.batch_size);
    let schedule = WarmupCosine::new(config.learning_rate, config.warmup_ratio, batches_per_epoch * config.epochs);
    let mut opt = AdamW::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0;
    let start = clock.now();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&[u32]> = chunk.iter().map(|&i| seqs[i]).collect();
            let (loss, mut grads) = loss_and_gradients(model, &batch, mask)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            if let Some(max_norm) = config.grad_clip_norm {
                let norm = libm::sqrt(grads.norm_sq());
                if norm > max_norm {
                    grads.scale((max_norm / norm) as f32);
                }
            }
            opt.step(model, &grads, mask, schedule.lr(step));
            let n: usize = batch.iter().map(|s| s.len() - 1).sum();
            sum += loss * n as f64;
            count += n;
            step += 1;
        }
        epoch_losses.push(sum / count as f64);
    }
    Ok(TrainReport {
        epoch_losses,
        steps: step,
        seconds: clock.now() - start,
        trainable_params: mask.trainable_params(model),
        total_params: model.num_params(),
        trainable_fraction: trainable_fraction(model, mask),
    })
}
