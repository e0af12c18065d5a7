//! Standard random view transforms on `C×H×W` images with pixels in `[0,1]`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{HexaError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TransformConfig {
    /// Crop area as a fraction of the image, `[min, max]`.
    pub scale: (f32, f32),
    /// Crop aspect ratio range (width / height), sampled log-uniformly.
    pub ratio: (f32, f32),
    pub output_size: usize,
    pub flip_p: f32,
    pub brightness: f32,
    pub contrast: f32,
    pub grayscale_p: f32,
    /// Std of additive Gaussian pixel noise; stands in for blur at low resolution.
    pub noise_sigma: f32,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Default for TransformConfig {
    fn default() -> Self {
        TransformConfig {
            scale: (0.2, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
            output_size: 32,
            flip_p: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            grayscale_p: 0.2,
            noise_sigma: 0.05,
            mean: vec![0.5; 3],
            std: vec![0.25; 3],
        }
    }
}

impl TransformConfig {
    /// Deterministic pipeline: full-image resize and normalization only.
    pub fn identity(output_size: usize) -> Self {
        TransformConfig {
            scale: (1.0, 1.0),
            ratio: (1.0, 1.0),
            output_size,
            flip_p: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            grayscale_p: 0.0,
            noise_sigma: 0.0,
            ..TransformConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f32| (0.0..=1.0).contains(&p);
        if !(self.scale.0 > 0.0 && self.scale.0 <= self.scale.1) {
            return Err(HexaError::config(format!("crop scale range {:?} invalid", self.scale)));
        }
        if self.scale.1 > 1.0 {
            return Err(HexaError::contract(format!(
                "crop scale {} would exceed the image",
                self.scale.1
            )));
        }
        if !(self.ratio.0 > 0.0 && self.ratio.0 <= self.ratio.1) {
            return Err(HexaError::config(format!("aspect ratio range {:?} invalid", self.ratio)));
        }
        if !prob(self.flip_p) || !prob(self.grayscale_p) {
            return Err(HexaError::config("probabilities must lie in [0,1]"));
        }
        if self.noise_sigma < 0.0 || self.brightness < 0.0 || self.contrast < 0.0 {
            return Err(HexaError::config("jitter and noise strengths must be non-negative"));
        }
        if self.output_size == 0 {
            return Err(HexaError::config("output size must be positive"));
        }
        if self.mean.len() != self.std.len() || self.std.iter().any(|&s| s <= 0.0) {
            return Err(HexaError::config("normalization mean/std malformed"));
        }
        Ok(())
    }

    /// Normalized-space value of raw pixel `v` in channel `c`.
    pub fn normalize_value(&self, c: usize, v: f32) -> f32 {
        (v - self.mean[c]) / self.std[c]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

fn dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        _ => Err(HexaError::contract(format!(
            "expected a non-empty C×H×W image, got {:?}",
            image.shape()
        ))),
    }
}

/// Random-resized-crop box selection; falls back to the whole image.
pub fn sample_crop(height: usize, width: usize, cfg: &TransformConfig, rng: &mut impl Rng) -> CropBox {
    let area = (height * width) as f32;
    let (log_lo, log_hi) = (cfg.ratio.0.ln(), cfg.ratio.1.ln());
    for _ in 0..10 {
        let target = area * uniform(rng, cfg.scale.0, cfg.scale.1);
        let ratio = uniform(rng, log_lo, log_hi).exp();
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let x0 = rng.random_range(0..=width - w);
            let y0 = rng.random_range(0..=height - h);
            return CropBox {
                x0,
                y0,
                width: w,
                height: h,
            };
        }
    }
    CropBox {
        x0: 0,
        y0: 0,
        width,
        height,
    }
}

fn uniform(rng: &mut impl Rng, lo: f32, hi: f32) -> f32 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Bilinear resize of a crop to `size × size` with half-pixel centers.
pub fn resize_crop(image: &Tensor, crop: CropBox, size: usize) -> Result<Tensor> {
    let (c, h, w) = dims(image)?;
    if crop.x0 + crop.width > w || crop.y0 + crop.height > h || crop.width == 0 || crop.height == 0 {
        return Err(HexaError::contract(format!("crop {crop:?} exceeds a {h}×{w} image")));
    }
    let src = image.data();
    let mut out = vec![0.0; c * size * size];
    let sy = crop.height as f32 / size as f32;
    let sx = crop.width as f32 / size as f32;
    let axis = |o: usize, scale: f32, len: usize| {
        let p = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f32);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, p - i0 as f32)
    };
    for oy in 0..size {
        let (y0, y1, fy) = axis(oy, sy, crop.height);
        for ox in 0..size {
            let (x0, x1, fx) = axis(ox, sx, crop.width);
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(ch * h + crop.y0 + y) * w + crop.x0 + x];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(ch * size + oy) * size + ox] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Tensor::new(&[c, size, size], out)
}

/// Mirrors a `C×H×W` image left to right.
pub fn hflip(image: &Tensor) -> Result<Tensor> {
    let (_, _, w) = dims(image)?;
    let mut data = image.data().to_vec();
    for row in data.chunks_mut(w) {
        row.reverse();
    }
    Tensor::new(image.shape(), data)
}

/// Per-channel `(x - mean) / std`.
pub fn normalize(image: &mut Tensor, cfg: &TransformConfig) -> Result<()> {
    let (c, h, w) = dims(image)?;
    if cfg.mean.len() != c {
        return Err(HexaError::config(format!(
            "normalization has {} channels, image has {c}",
            cfg.mean.len()
        )));
    }
    for (ch, plane) in image.data_mut().chunks_mut(h * w).enumerate() {
        plane.iter_mut().for_each(|v| *v = (*v - cfg.mean[ch]) / cfg.std[ch]);
    }
    Ok(())
}

/// Produces one augmented, normalized view of `image`.
pub fn random_transform(image: &Tensor, cfg: &TransformConfig, rng: &mut impl Rng) -> Result<Tensor> {
    cfg.validate()?;
    let (c, h, w) = dims(image)?;
    let crop = sample_crop(h, w, cfg, rng);
    let mut view = resize_crop(image, crop, cfg.output_size)?;
    if cfg.flip_p > 0.0 && rng.random::<f32>() < cfg.flip_p {
        view = hflip(&view)?;
    }
    let plane = cfg.output_size * cfg.output_size;
    if cfg.brightness > 0.0 {
        let f = uniform(rng, 1.0 - cfg.brightness, 1.0 + cfg.brightness).max(0.0);
        view.data_mut().iter_mut().for_each(|v| *v = (*v * f).clamp(0.0, 1.0));
    }
    if cfg.contrast > 0.0 {
        let f = uniform(rng, 1.0 - cfg.contrast, 1.0 + cfg.contrast).max(0.0);
        let mean = luminance(view.data(), c, plane).iter().sum::<f32>() / plane as f32;
        view.data_mut()
            .iter_mut()
            .for_each(|v| *v = ((*v - mean) * f + mean).clamp(0.0, 1.0));
    }
    if cfg.grayscale_p > 0.0 && rng.random::<f32>() < cfg.grayscale_p {
        let gray = luminance(view.data(), c, plane);
        for ch in view.data_mut().chunks_mut(plane) {
            ch.copy_from_slice(&gray);
        }
    }
    if cfg.noise_sigma > 0.0 {
        for v in view.data_mut() {
            let n: f32 = StandardNormal.sample(rng);
            *v += cfg.noise_sigma * n;
        }
    }
    view.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    normalize(&mut view, cfg)?;
    Ok(view)
}

fn luminance(data: &[f32], c: usize, plane: usize) -> Vec<f32> {
    if c != 3 {
        return (0..plane)
            .map(|i| (0..c).map(|ch| data[ch * plane + i]).sum::<f32>() / c as f32)
            .collect();
    }
    (0..plane)
        .map(|i| 0.299 * data[i] + 0.587 * data[plane + i] + 0.114 * data[2 * plane + i])
        .collect()
}

/// Transforms every image of a `B×C×H×W` batch; image `i` draws from `rngs(i)`.
pub fn transform_batch<R: Rng>(
    images: &Tensor,
    cfg: &TransformConfig,
    mut rng_for: impl FnMut(usize) -> R,
) -> Result<Tensor> {
    let shape = images.shape();
    if shape.len() != 4 {
        return Err(HexaError::contract(format!("expected B×C×H×W, got {shape:?}")));
    }
    let views = (0..shape[0])
        .map(|i| {
            let img = Tensor::new(&shape[1..], images.sample(i).to_vec())?;
            random_transform(&img, cfg, &mut rng_for(i))
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&views)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(seed: u64) -> Tensor {
        Tensor::uniform(&[3, 12, 10], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn identity_pipeline_is_plain_resize() {
        let img = image(1);
        let cfg = TransformConfig {
            scale: (1.0, 1.0),
            ..TransformConfig::identity(8)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let view = random_transform(&img, &cfg, &mut rng).unwrap();
        let full = CropBox {
            x0: 0,
            y0: 0,
            width: 10,
            height: 12,
        };
        let mut expected = resize_crop(&img, full, 8).unwrap();
        normalize(&mut expected, &cfg).unwrap();
        assert_eq!(view, expected);
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let img = Tensor::uniform(&[3, 6, 6], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let full = CropBox {
            x0: 0,
            y0: 0,
            width: 6,
            height: 6,
        };
        let out = resize_crop(&img, full, 6).unwrap();
        assert!(out.max_abs_diff(&img) < 1e-6);
    }

    #[test]
    fn flip_is_an_involution() {
        let img = image(4);
        assert_eq!(hflip(&hflip(&img).unwrap()).unwrap(), img);
        assert_ne!(hflip(&img).unwrap(), img);
    }

    #[test]
    fn same_seed_same_view() {
        let img = image(5);
        let cfg = TransformConfig::default();
        let a = random_transform(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = random_transform(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[3, 32, 32]);
    }

    #[test]
    fn crop_beyond_image_is_contract_error() {
        let cfg = TransformConfig {
            scale: (0.5, 1.5),
            ..TransformConfig::default()
        };
        let err = random_transform(&image(6), &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, HexaError::Contract(_)));
    }

    #[test]
    fn raw_pixels_are_clamped_before_normalization() {
        let img = image(7);
        let cfg = TransformConfig {
            noise_sigma: 2.0,
            brightness: 0.9,
            ..TransformConfig::default()
        };
        let view = random_transform(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (lo, hi) = (cfg.normalize_value(0, 0.0), cfg.normalize_value(0, 1.0));
        assert!(view.data().iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
    }
}
