//! Pieces shared by the two pre-training loops: batching, schedules and the
//! per-epoch metrics record.

use rand::seq::SliceRandom;

use crate::error::{HexaError, Result};
use crate::nn::cosine_lr;
use crate::rng::RngStreams;
use crate::scheme::Scheme;

/// Shuffled batches of image ids for one epoch. A trailing single image is
/// folded into the previous batch so every batch can be cut-mixed.
pub fn epoch_batches(n: usize, batch_size: usize, streams: &RngStreams, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(HexaError::config(format!("batch size must be at least 2, got {batch_size}")));
    }
    if n < 2 {
        return Err(HexaError::contract(format!("training needs at least 2 images, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut streams.stream("order", epoch as u64, 0));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().unwrap_or_default();
        if let Some(prev) = batches.last_mut() {
            prev.extend(tail);
        }
    }
    Ok(batches)
}

/// Number of optimizer steps per epoch produced by [`epoch_batches`].
pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    let full = n.div_ceil(batch_size.max(1));
    if full > 1 && n % batch_size == 1 {
        full - 1
    } else {
        full
    }
}

/// Cosine schedule over the whole run, indexed by global step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f32,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f32 {
        cosine_lr(self.base, step, self.total_steps)
    }
}

/// One row of the metrics table.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub scheme: Scheme,
    pub loss_std: f32,
    pub loss_adv: Option<f32>,
    pub loss_cmx: Option<f32>,
    pub loss_total: f32,
    pub kmeans_objective: Option<f64>,
    pub queue_size: Option<usize>,
    /// Assignment-change fraction after re-clustering (prototype runs only).
    pub churn: Option<f64>,
    pub wall_time_s: f64,
}

/// Running means of the per-step loss terms.
#[derive(Clone, Debug, Default)]
pub struct LossAccumulator {
    steps: usize,
    std: f64,
    adv: Option<f64>,
    cmx: Option<f64>,
    total: f64,
}

impl LossAccumulator {
    pub fn add(&mut self, std: f32, adv: Option<f32>, cmx: Option<f32>, total: f32) {
        self.steps += 1;
        self.std += std as f64;
        self.total += total as f64;
        if let Some(a) = adv {
            *self.adv.get_or_insert(0.0) += a as f64;
        }
        if let Some(c) = cmx {
            *self.cmx.get_or_insert(0.0) += c as f64;
        }
    }

    /// `(std, adv, cmx, total)` means.
    pub fn means(&self) -> (f32, Option<f32>, Option<f32>, f32) {
        let n = self.steps.max(1) as f64;
        (
            (self.std / n) as f32,
            self.adv.map(|v| (v / n) as f32),
            self.cmx.map(|v| (v / n) as f32),
            (self.total / n) as f32,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_every_image_once() {
        let s = RngStreams::new(3);
        for (n, b) in [(10, 4), (9, 4), (8, 4), (3, 2), (2, 5)] {
            let batches = epoch_batches(n, b, &s, 0).unwrap();
            let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            assert!(batches.iter().all(|b| b.len() >= 2));
            assert_eq!(batches.len(), steps_per_epoch(n, b));
        }
    }
}
