//! Cut-mixed views: a rectangle of image `b` pasted into image `a`, with the
//! pseudo-label mixed by the area each source keeps.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{HexaError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CutMixConfig {
    pub beta_alpha: f32,
    pub beta_beta: f32,
}

impl Default for CutMixConfig {
    fn default() -> Self {
        CutMixConfig {
            beta_alpha: 5.0,
            beta_beta: 3.0,
        }
    }
}

impl CutMixConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta_alpha > 0.0 && self.beta_beta > 0.0 {
            Ok(())
        } else {
            Err(HexaError::config(format!(
                "Beta({}, {}) parameters must be positive",
                self.beta_alpha, self.beta_beta
            )))
        }
    }
}

/// Two-term pseudo-label mixture `lambda * y_a + (1 - lambda) * y_b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixedPseudoLabel {
    pub label_a: usize,
    pub label_b: usize,
    pub lambda: f32,
}

impl MixedPseudoLabel {
    /// Dense soft-label over `classes` entries.
    pub fn to_dense(&self, classes: usize) -> Vec<f32> {
        let mut y = vec![0.0; classes];
        y[self.label_a] += self.lambda;
        y[self.label_b] += 1.0 - self.lambda;
        y
    }
}

/// Binary `width × height` mask that is 1 everywhere except one axis-aligned
/// rectangle of zeros (where the second image shows through).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CutMask {
    pub width: usize,
    pub height: usize,
    pub x0: usize,
    pub y0: usize,
    pub cut_width: usize,
    pub cut_height: usize,
}

impl CutMask {
    pub fn full(width: usize, height: usize) -> Self {
        CutMask {
            width,
            height,
            x0: 0,
            y0: 0,
            cut_width: 0,
            cut_height: 0,
        }
    }

    pub fn at(&self, x: usize, y: usize) -> bool {
        !(x >= self.x0 && x < self.x0 + self.cut_width && y >= self.y0 && y < self.y0 + self.cut_height)
    }

    pub fn ones(&self) -> usize {
        self.width * self.height - self.cut_width * self.cut_height
    }

    /// Fraction of pixels taken from image `a`.
    pub fn lambda(&self) -> f32 {
        self.ones() as f32 / (self.width * self.height) as f32
    }

    /// Row-major `height × width` 0/1 grid.
    pub fn to_grid(&self) -> Vec<u8> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| self.at(x, y) as u8))
            .collect()
    }
}

/// Samples a mask whose zero rectangle covers about `(1 - lambda_raw)` of the
/// area, `lambda_raw ~ Beta(alpha, beta)`. Returns the mask and its exact
/// area fraction of ones.
pub fn sample_cutmix_mask(
    cfg: &CutMixConfig,
    width: usize,
    height: usize,
    rng: &mut impl Rng,
) -> Result<(CutMask, f32)> {
    cfg.validate()?;
    if width == 0 || height == 0 {
        return Err(HexaError::contract("cutmix mask needs a non-empty image"));
    }
    let beta = Beta::new(cfg.beta_alpha as f64, cfg.beta_beta as f64)
        .map_err(|e| HexaError::config(e.to_string()))?;
    let lambda_raw = beta.sample(rng);
    let total = width * height;
    let area = (((1.0 - lambda_raw) * total as f64).round() as usize).min(total);
    let mut mask = CutMask::full(width, height);
    if area > 0 {
        // Width uniform over the values that can host `area` pixels.
        let w_min = area.div_ceil(height).max(1);
        let w_max = width.min(area);
        let w = rng.random_range(w_min..=w_max);
        let h = ((area as f64 / w as f64).round() as usize).clamp(1, height);
        mask.cut_width = w;
        mask.cut_height = h;
        mask.x0 = rng.random_range(0..=width - w);
        mask.y0 = rng.random_range(0..=height - h);
    }
    let lambda = mask.lambda();
    Ok((mask, lambda))
}

/// `mask ⊙ a + (1 - mask) ⊙ b` for one `C×H×W` image pair.
pub fn apply_mask(a: &[f32], b: &[f32], channels: usize, mask: &CutMask, out: &mut [f32]) {
    let plane = mask.width * mask.height;
    for c in 0..channels {
        for y in 0..mask.height {
            for x in 0..mask.width {
                let i = c * plane + y * mask.width + x;
                out[i] = if mask.at(x, y) { a[i] } else { b[i] };
            }
        }
    }
}

/// `grid ⊙ a + (1 - grid) ⊙ b` for an arbitrary row-major `H×W` 0/1 grid
/// shared by all channels. Returns the fraction of ones.
pub fn apply_grid(a: &[f32], b: &[f32], channels: usize, grid: &[u8], out: &mut [f32]) -> Result<f32> {
    let plane = grid.len();
    if plane == 0 || a.len() != channels * plane || b.len() != a.len() || out.len() != a.len() {
        return Err(HexaError::contract("apply_grid: buffer sizes do not match the grid"));
    }
    for c in 0..channels {
        for (p, &m) in grid.iter().enumerate() {
            let i = c * plane + p;
            out[i] = if m != 0 { a[i] } else { b[i] };
        }
    }
    Ok(grid.iter().filter(|&&m| m != 0).count() as f32 / plane as f32)
}

/// Mixes row `i` of `batch_a` with row `i` of `batch_b` under an independent
/// mask per row.
pub fn cutmix(
    batch_a: &Tensor,
    labels_a: &[usize],
    batch_b: &Tensor,
    labels_b: &[usize],
    cfg: &CutMixConfig,
    rng: &mut impl Rng,
) -> Result<(Tensor, Vec<MixedPseudoLabel>)> {
    let masks = sample_batch_masks(batch_a, cfg, rng)?;
    cutmix_with_masks(batch_a, labels_a, batch_b, labels_b, &masks)
}

/// Draws one mask per row of a `B×C×H×W` batch.
pub fn sample_batch_masks(batch: &Tensor, cfg: &CutMixConfig, rng: &mut impl Rng) -> Result<Vec<CutMask>> {
    let shape = batch.shape();
    if shape.len() != 4 {
        return Err(HexaError::contract(format!("cutmix expects B×C×H×W, got {shape:?}")));
    }
    (0..shape[0])
        .map(|_| sample_cutmix_mask(cfg, shape[3], shape[2], rng).map(|(m, _)| m))
        .collect()
}

pub fn cutmix_with_masks(
    batch_a: &Tensor,
    labels_a: &[usize],
    batch_b: &Tensor,
    labels_b: &[usize],
    masks: &[CutMask],
) -> Result<(Tensor, Vec<MixedPseudoLabel>)> {
    if batch_a.shape() != batch_b.shape() || batch_a.ndim() != 4 {
        return Err(HexaError::Shape {
            op: "cutmix",
            lhs: batch_a.shape().to_vec(),
            rhs: batch_b.shape().to_vec(),
        });
    }
    let [n, c, h, w] = [batch_a.shape()[0], batch_a.shape()[1], batch_a.shape()[2], batch_a.shape()[3]];
    if labels_a.len() != n || labels_b.len() != n || masks.len() != n {
        return Err(HexaError::contract("cutmix: labels/masks do not match the batch"));
    }
    let mut out = vec![0.0; batch_a.numel()];
    let per = c * h * w;
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mask = &masks[i];
        if mask.width != w || mask.height != h {
            return Err(HexaError::contract("cutmix: mask size differs from image size"));
        }
        apply_mask(batch_a.sample(i), batch_b.sample(i), c, mask, &mut out[i * per..(i + 1) * per]);
        labels.push(MixedPseudoLabel {
            label_a: labels_a[i],
            label_b: labels_b[i],
            lambda: mask.lambda(),
        });
    }
    Ok((Tensor::new(batch_a.shape(), out)?, labels))
}

/// Uniform random permutation of `0..n` without fixed points, so that every
/// row is mixed with a different image.
pub fn sample_derangement(n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(HexaError::contract(format!(
            "cut-mixing needs a batch of at least 2 images, got {n}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}
