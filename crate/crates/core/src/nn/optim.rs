use std::f32::consts::PI;

use crate::error::{HexaError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.06,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// Cosine decay from `base` at step 0 to zero at `total` steps.
pub fn cosine_lr(base: f32, step: usize, total: usize) -> f32 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total) as f32) / total as f32;
    0.5 * base * (1.0 + (PI * t).cos())
}

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    pub velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(cfg: &SgdConfig) -> Self {
        Sgd {
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Applies one update with a single learning rate.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>], lr: f32) -> Result<()> {
        let lrs = vec![lr; params.len()];
        self.step_with_lrs(params, grads, &lrs)
    }

    /// Applies one update with a learning rate per parameter tensor.
    /// Parameters without a gradient only receive weight decay.
    pub fn step_with_lrs(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Option<&Tensor>],
        lrs: &[f32],
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != lrs.len() {
            return Err(HexaError::contract("optimizer: parameter/gradient count mismatch"));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(HexaError::Architecture("optimizer state does not match parameters".into()));
        }
        for (((p, g), v), &lr) in params.iter_mut().zip(grads).zip(&mut self.velocity).zip(lrs) {
            if v.len() != p.numel() || g.is_some_and(|g| g.numel() != p.numel()) {
                return Err(HexaError::Architecture("optimizer state does not match parameters".into()));
            }
            let data = p.data_mut();
            for i in 0..data.len() {
                let grad = g.map_or(0.0, |g| g.data()[i]) + self.weight_decay * data[i];
                v[i] = self.momentum * v[i] + grad;
                data[i] -= lr * v[i];
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-7);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-7);
    }

    #[test]
    fn momentum_accumulates() {
        let mut sgd = Sgd::new(&SgdConfig {
            lr: 1.0,
            momentum: 0.5,
            weight_decay: 0.0,
        });
        let mut p = Tensor::from_vec(vec![0.0]);
        let g = Tensor::from_vec(vec![1.0]);
        sgd.step(&mut [&mut p], &[Some(&g)], 1.0).unwrap();
        sgd.step(&mut [&mut p], &[Some(&g)], 1.0).unwrap();
        // v1 = 1, v2 = 1.5
        assert_eq!(p.data(), &[-2.5]);
    }
}
