use crate::tensor::{BatchMoments, Tensor};

/// Which running-statistic set a forward pass reads and updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BnMode {
    Clean,
    Adversarial,
}

impl BnMode {
    pub fn name(self) -> &'static str {
        match self {
            BnMode::Clean => "clean",
            BnMode::Adversarial => "adv",
        }
    }
}

/// How batch normalization behaves during one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnUsage {
    /// Normalize with batch statistics, optionally folding them into the
    /// running set of the pass's mode.
    Batch { update_running: bool },
    /// Normalize with the clean running statistics.
    Running,
}

impl BnUsage {
    pub fn training(training: bool) -> Self {
        if training {
            BnUsage::Batch {
                update_running: true,
            }
        } else {
            BnUsage::Running
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Batch normalization with shared affine parameters and separate running
/// statistics for clean and adversarial inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct DualBatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub clean: RunningStats,
    pub adversarial: RunningStats,
    /// Weight kept on the old running value at each update.
    pub momentum: f32,
    pub eps: f32,
}

impl DualBatchNorm {
    pub fn new(channels: usize, momentum: f32, eps: f32) -> Self {
        DualBatchNorm {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            clean: RunningStats::new(channels),
            adversarial: RunningStats::new(channels),
            momentum,
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn stats(&self, mode: BnMode) -> &RunningStats {
        match mode {
            BnMode::Clean => &self.clean,
            BnMode::Adversarial => &self.adversarial,
        }
    }

    pub fn stats_mut(&mut self, mode: BnMode) -> &mut RunningStats {
        match mode {
            BnMode::Clean => &mut self.clean,
            BnMode::Adversarial => &mut self.adversarial,
        }
    }

    /// Folds batch moments into the running set selected by `mode`.
    pub fn update(&mut self, mode: BnMode, moments: &BatchMoments) {
        let m = self.momentum;
        let stats = self.stats_mut(mode);
        for (r, b) in stats.mean.iter_mut().zip(&moments.mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in stats.var.iter_mut().zip(&moments.var) {
            // Keep the variance strictly positive even for constant channels.
            *r = (m * *r + (1.0 - m) * b).max(f32::MIN_POSITIVE);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn update_touches_only_selected_set() {
        let mut bn = DualBatchNorm::new(2, 0.9, 1e-5);
        let moments = BatchMoments {
            mean: vec![1.0, 2.0],
            var: vec![4.0, 0.0],
        };
        bn.update(BnMode::Adversarial, &moments);
        assert_eq!(bn.clean, RunningStats::new(2));
        assert!((bn.adversarial.mean[0] - 0.1).abs() < 1e-7);
        assert!((bn.adversarial.var[0] - 1.3).abs() < 1e-6);
        assert!(bn.adversarial.var[1] > 0.0);
    }
}
