//! Signed-gradient (PGD) adversarial views.

use crate::error::{HexaError, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Norm ball the accumulated perturbation is projected onto.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PerturbNorm {
    LInf,
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdvConfig {
    /// Radius of the perturbation ball, in normalized-pixel units.
    pub epsilon: f32,
    /// Step size of each signed-gradient step.
    pub eta: f32,
    pub steps: usize,
    pub norm: PerturbNorm,
    /// Clamp adversarial views back into the valid raw-pixel range.
    pub clamp_to_pixels: bool,
}

impl Default for AdvConfig {
    fn default() -> Self {
        AdvConfig {
            epsilon: 1.0,
            eta: 1.0,
            steps: 1,
            norm: PerturbNorm::LInf,
            clamp_to_pixels: false,
        }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 || self.eta <= 0.0 || self.steps == 0 {
            return Err(HexaError::config(format!(
                "adversarial config needs epsilon >= 0, eta > 0, steps >= 1 (got {}, {}, {})",
                self.epsilon, self.eta, self.steps
            )));
        }
        Ok(())
    }
}

/// Per-channel bounds of valid pixels in normalized space.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelBounds {
    pub low: Vec<f32>,
    pub high: Vec<f32>,
}

impl PixelBounds {
    pub fn from_normalization(mean: &[f32], std: &[f32]) -> Self {
        PixelBounds {
            low: mean.iter().zip(std).map(|(m, s)| -m / s).collect(),
            high: mean.iter().zip(std).map(|(m, s)| (1.0 - m) / s).collect(),
        }
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Ascends `loss_fn` with `cfg.steps` signed-gradient steps from `views`
/// (`B×C×H×W`), projecting the accumulated perturbation onto the epsilon ball.
///
/// `loss_fn` builds the loss on the tape it is handed from the perturbed view
/// variable. Each step uses a fresh tape that is dropped before returning.
pub fn pgd_attack<F>(
    views: &Tensor,
    cfg: &AdvConfig,
    bounds: Option<&PixelBounds>,
    mut loss_fn: F,
) -> Result<Tensor>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    cfg.validate()?;
    if views.ndim() != 4 {
        return Err(HexaError::contract(format!(
            "pgd_attack expects B×C×H×W views, got {:?}",
            views.shape()
        )));
    }
    let mut delta = vec![0.0f32; views.numel()];
    let batch = views.shape()[0];
    let per = views.numel() / batch.max(1);
    let channels = views.shape()[1];
    let plane = per / channels.max(1);
    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let mut current = views.clone();
        current.data_mut().iter_mut().zip(&delta).for_each(|(v, d)| *v += d);
        let x = tape.param(current);
        let loss = loss_fn(&mut tape, x)?;
        let grad = tape.input_gradient(loss, x)?;
        if !grad.all_finite() {
            return Err(HexaError::numeric(
                format!("pgd step {step}"),
                "non-finite input gradient",
            ));
        }
        for (d, g) in delta.iter_mut().zip(grad.data()) {
            *d += cfg.eta * sign(*g);
        }
        project(&mut delta, per, cfg);
        if let (true, Some(b)) = (cfg.clamp_to_pixels, bounds) {
            for (i, d) in delta.iter_mut().enumerate() {
                let c = (i % per) / plane;
                let v = views.data()[i];
                *d = (v + *d).clamp(b.low[c], b.high[c]) - v;
            }
        }
    }
    let mut out = views.clone();
    out.data_mut().iter_mut().zip(&delta).for_each(|(v, d)| *v += d);
    Ok(out)
}

fn project(delta: &mut [f32], per: usize, cfg: &AdvConfig) {
    match cfg.norm {
        PerturbNorm::LInf => delta
            .iter_mut()
            .for_each(|d| *d = d.clamp(-cfg.epsilon, cfg.epsilon)),
        PerturbNorm::L2 => {
            for sample in delta.chunks_mut(per.max(1)) {
                let norm = sample.iter().map(|v| v * v).sum::<f32>().sqrt();
                if norm > cfg.epsilon && norm > 0.0 {
                    let s = cfg.epsilon / norm;
                    sample.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
    }
}
