//! Convolutional backbone plus MLP projection head.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;

use super::batchnorm::{BnMode, BnUsage, DualBatchNorm};
use crate::error::{HexaError, Result};
use crate::tensor::{BnNormalization, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Output channels of each stride-2 conv block.
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub head_hidden: usize,
    pub proj_dim: usize,
    pub bn_momentum: f32,
    pub bn_eps: f32,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 3,
            widths: vec![16, 32, 64, 128],
            kernel: 3,
            stride: 2,
            head_hidden: 128,
            proj_dim: 64,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    /// Width of the pooled backbone features.
    pub fn feature_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(self.in_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(HexaError::config("encoder widths must be non-empty and positive"));
        }
        if self.in_channels == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(HexaError::config("encoder channels, kernel and stride must be positive"));
        }
        if self.head_hidden == 0 || self.proj_dim == 0 {
            return Err(HexaError::config("projection head sizes must be positive"));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) || self.bn_eps <= 0.0 {
            return Err(HexaError::config("bn momentum must be in (0,1) and eps positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub weight: Tensor,
    pub bn: DualBatchNorm,
}

/// `linear(hidden) -> relu -> linear(proj_dim)`; weights stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Backbone and projection parameters together with the dual BN statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub blocks: Vec<ConvBlock>,
    pub head: Option<ProjectionHead>,
}

/// Where a forward pass stops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderOutput {
    /// Pooled backbone features, `B × feature_dim`.
    Features,
    /// L2-normalized projections, `B × proj_dim`.
    Latent,
}

/// Encoder parameters registered on a tape, in [`EncoderParams::parameters`] order.
#[derive(Clone, Debug)]
pub struct BoundEncoder {
    pub vars: Vec<Var>,
}

impl BoundEncoder {
    /// Gradients of each parameter after a backward pass.
    pub fn grads<'t>(&self, tape: &'t Tape) -> Vec<Option<&'t Tensor>> {
        self.vars.iter().map(|&v| tape.grad(v)).collect()
    }
}

impl EncoderParams {
    pub fn init(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(config.widths.len());
        let mut in_c = config.in_channels;
        for &out_c in &config.widths {
            let fan_in = in_c * config.kernel * config.kernel;
            let weight = Tensor::randn(
                &[out_c, in_c, config.kernel, config.kernel],
                (2.0 / fan_in as f32).sqrt(),
                rng,
            );
            blocks.push(ConvBlock {
                weight,
                bn: DualBatchNorm::new(out_c, config.bn_momentum, config.bn_eps),
            });
            in_c = out_c;
        }
        let feat = config.feature_dim();
        let head = ProjectionHead {
            w1: Tensor::randn(&[feat, config.head_hidden], (2.0 / feat as f32).sqrt(), rng),
            b1: Tensor::zeros(&[config.head_hidden]),
            w2: Tensor::randn(
                &[config.head_hidden, config.proj_dim],
                (1.0 / config.head_hidden as f32).sqrt(),
                rng,
            ),
            b2: Tensor::zeros(&[config.proj_dim]),
        };
        Ok(EncoderParams {
            config,
            blocks,
            head: Some(head),
        })
    }

    /// Trainable tensors with stable names, backbone first.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("conv{i}.weight"), &b.weight));
            out.push((format!("conv{i}.bn.gamma"), &b.bn.gamma));
            out.push((format!("conv{i}.bn.beta"), &b.bn.beta));
        }
        if let Some(h) = &self.head {
            out.push(("head.w1".into(), &h.w1));
            out.push(("head.b1".into(), &h.b1));
            out.push(("head.w2".into(), &h.w2));
            out.push(("head.b2".into(), &h.b2));
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bn.gamma);
            out.push(&mut b.bn.beta);
        }
        if let Some(h) = &mut self.head {
            out.push(&mut h.w1);
            out.push(&mut h.b1);
            out.push(&mut h.w2);
            out.push(&mut h.b2);
        }
        out
    }

    /// Number of leading entries of [`Self::parameters`] that belong to the backbone.
    pub fn backbone_param_count(&self) -> usize {
        self.blocks.len() * 3
    }

    /// Running statistics as named buffers: `(name, values)`.
    pub fn buffers(&self) -> Vec<(String, &Vec<f32>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for mode in [BnMode::Clean, BnMode::Adversarial] {
                let s = b.bn.stats(mode);
                out.push((format!("conv{i}.bn.{}.mean", mode.name()), &s.mean));
                out.push((format!("conv{i}.bn.{}.var", mode.name()), &s.var));
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            let bn = &mut b.bn;
            out.push(&mut bn.clean.mean);
            out.push(&mut bn.clean.var);
            out.push(&mut bn.adversarial.mean);
            out.push(&mut bn.adversarial.var);
        }
        out
    }

    /// Hash of every parameter and statistic bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, t) in self.parameters() {
            name.hash(&mut h);
            t.shape().hash(&mut h);
            t.data().iter().for_each(|v| v.to_bits().hash(&mut h));
        }
        for (name, b) in self.buffers() {
            name.hash(&mut h);
            b.iter().for_each(|v| v.to_bits().hash(&mut h));
        }
        h.finish()
    }

    /// Hash of the backbone parameters and statistics only.
    pub fn backbone_fingerprint(&self) -> u64 {
        let mut copy = self.clone();
        copy.head = None;
        copy.fingerprint()
    }

    /// Registers every parameter on `tape`; trainable parameters collect gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundEncoder {
        let vars = self
            .parameters()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect();
        BoundEncoder { vars }
    }

    /// Runs the encoder on `x` (`B×C×H×W`) and returns features or latents.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        bound: &BoundEncoder,
        x: Var,
        mode: BnMode,
        usage: BnUsage,
        output: EncoderOutput,
    ) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(HexaError::Shape {
                op: "encode",
                lhs: shape,
                rhs: vec![self.config.in_channels],
            });
        }
        if bound.vars.len() != self.parameters().len() {
            return Err(HexaError::Architecture(
                "bound parameter count does not match the encoder".into(),
            ));
        }
        let pad = self.config.kernel / 2;
        let stride = self.config.stride;
        let mut h = x;
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let [w, gamma, beta] = [bound.vars[3 * i], bound.vars[3 * i + 1], bound.vars[3 * i + 2]];
            h = tape.conv2d(h, w, stride, pad)?;
            let norm = match usage {
                BnUsage::Batch { .. } => BnNormalization::Batch,
                BnUsage::Running => BnNormalization::Running {
                    mean: &block.bn.clean.mean,
                    var: &block.bn.clean.var,
                },
            };
            let (y, moments) = tape.batch_norm(h, gamma, beta, norm, block.bn.eps)?;
            if let (BnUsage::Batch { update_running: true }, Some(m)) = (usage, moments) {
                block.bn.update(mode, &m);
            }
            h = tape.relu(y);
            check_finite(tape, h, i)?;
        }
        let features = tape.global_avg_pool(h)?;
        if output == EncoderOutput::Features {
            return Ok(features);
        }
        let Some(_) = &self.head else {
            return Err(HexaError::Architecture("encoder has no projection head".into()));
        };
        let base = 3 * self.blocks.len();
        let [w1, b1, w2, b2] = [bound.vars[base], bound.vars[base + 1], bound.vars[base + 2], bound.vars[base + 3]];
        let z = tape.matmul(features, w1)?;
        let z = tape.add_bias(z, b1)?;
        let z = tape.relu(z);
        check_finite(tape, z, self.blocks.len())?;
        let z = tape.matmul(z, w2)?;
        let z = tape.add_bias(z, b2)?;
        check_finite(tape, z, self.blocks.len() + 1)?;
        tape.l2_normalize(z)
    }

    /// Unit-norm latents of a batch without gradient tracking.
    pub fn encode(&mut self, batch: &Tensor, mode: BnMode, training: bool) -> Result<Tensor> {
        self.run_detached(batch, mode, BnUsage::training(training), EncoderOutput::Latent)
    }

    /// Pooled backbone features of a batch without gradient tracking.
    pub fn backbone_features(&mut self, batch: &Tensor, mode: BnMode, training: bool) -> Result<Tensor> {
        self.run_detached(batch, mode, BnUsage::training(training), EncoderOutput::Features)
    }

    pub fn run_detached(
        &mut self,
        batch: &Tensor,
        mode: BnMode,
        usage: BnUsage,
        output: EncoderOutput,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(batch.clone());
        let out = self.forward(&mut tape, &bound, x, mode, usage, output)?;
        Ok(tape.value(out).clone())
    }

    /// Evaluation-mode features; never touches the running statistics.
    pub fn eval_features(&self, batch: &Tensor) -> Result<Tensor> {
        // Running-mode passes write nothing back, so a scratch copy is enough.
        self.clone()
            .run_detached(batch, BnMode::Clean, BnUsage::Running, EncoderOutput::Features)
    }

    /// Evaluation-mode latents; never touches the running statistics.
    pub fn eval_latents(&self, batch: &Tensor) -> Result<Tensor> {
        self.clone()
            .run_detached(batch, BnMode::Clean, BnUsage::Running, EncoderOutput::Latent)
    }

    pub fn same_architecture(&self, other: &EncoderParams) -> bool {
        let a = self.parameters();
        let b = other.parameters();
        a.len() == b.len()
            && a.iter().zip(&b).all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
            && self.buffers().len() == other.buffers().len()
    }
}

fn check_finite(tape: &Tape, v: Var, layer: usize) -> Result<()> {
    if tape.value(v).all_finite() {
        Ok(())
    } else {
        Err(HexaError::numeric(
            format!("encoder layer {layer}"),
            "non-finite activation",
        ))
    }
}

/// Exponential moving average of the query encoder into the key encoder:
/// `key = beta * key + (1 - beta) * query`, statistics included.
pub fn momentum_update(key: &mut EncoderParams, query: &EncoderParams, beta: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(HexaError::config(format!("momentum beta {beta} outside [0,1]")));
    }
    if !key.same_architecture(query) {
        return Err(HexaError::Architecture(
            "key and query encoders differ in shape".into(),
        ));
    }
    let q_params: Vec<&Tensor> = query.parameters().into_iter().map(|(_, t)| t).collect();
    for (k, q) in key.parameters_mut().into_iter().zip(q_params) {
        blend(k.data_mut(), q.data(), beta);
    }
    let q_bufs: Vec<&Vec<f32>> = query.buffers().into_iter().map(|(_, b)| b).collect();
    for (k, q) in key.buffers_mut().into_iter().zip(q_bufs) {
        blend(k, q, beta);
    }
    Ok(())
}

fn blend(key: &mut [f32], query: &[f32], beta: f32) {
    if beta == 1.0 {
        return;
    }
    if beta == 0.0 {
        key.copy_from_slice(query);
        return;
    }
    for (k, &q) in key.iter_mut().zip(query) {
        *k = beta * *k + (1.0 - beta) * q;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> EncoderParams {
        let cfg = EncoderConfig {
            widths: vec![4, 8],
            head_hidden: 8,
            proj_dim: 5,
            ..EncoderConfig::default()
        };
        EncoderParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn latents_are_unit_norm_and_deterministic() {
        let mut enc = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = Tensor::randn(&[3, 3, 8, 8], 1.0, &mut rng);
        let first: Vec<f32> = x.sample(0).to_vec();
        x.data_mut()[384..].copy_from_slice(&first);
        let z = enc.encode(&x, BnMode::Clean, true).unwrap();
        assert_eq!(z.shape(), &[3, 5]);
        for r in 0..3 {
            let n: f32 = z.row(r).iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
        assert_eq!(z.row(0), z.row(2));
    }

    #[test]
    fn adversarial_pass_leaves_clean_stats_bitwise() {
        let mut enc = small();
        let before = enc.blocks[0].bn.clean.clone();
        let x = Tensor::randn(&[4, 3, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        enc.encode(&x, BnMode::Adversarial, true).unwrap();
        assert_eq!(enc.blocks[0].bn.clean, before);
        assert_ne!(enc.blocks[0].bn.adversarial, before);
    }

    #[test]
    fn eval_mode_uses_clean_stats_regardless_of_mode() {
        let mut enc = small();
        let x = Tensor::randn(&[4, 3, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        enc.encode(&x, BnMode::Adversarial, true).unwrap();
        let fp = enc.fingerprint();
        let a = enc.encode(&x, BnMode::Clean, false).unwrap();
        let b = enc.encode(&x, BnMode::Adversarial, false).unwrap();
        assert_eq!(a, b);
        assert_eq!(enc.fingerprint(), fp);
    }

    #[test]
    fn backbone_features_shape_and_head_independence() {
        let mut enc = small();
        let x = Tensor::zeros(&[2, 3, 8, 8]);
        let f = enc.backbone_features(&x, BnMode::Clean, false).unwrap();
        assert_eq!(f.shape(), &[2, 8]);
        assert!(f.all_finite());
        let mut headless = enc.clone();
        headless.head = None;
        assert_eq!(headless.backbone_features(&x, BnMode::Clean, false).unwrap(), f);
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let mut enc = small();
        let x = Tensor::zeros(&[2, 1, 8, 8]);
        assert!(enc.encode(&x, BnMode::Clean, false).is_err());
    }

    #[test]
    fn momentum_update_cases() {
        let query = small();
        let mut key = query.clone();
        for t in key.parameters_mut() {
            t.data_mut().fill(0.0);
        }
        let mut ones = query.clone();
        for t in ones.parameters_mut() {
            t.data_mut().fill(1.0);
        }
        let mut k = key.clone();
        momentum_update(&mut k, &ones, 0.99).unwrap();
        for (_, t) in k.parameters() {
            assert!(t.data().iter().all(|&v| (v - 0.01).abs() < 1e-7));
        }
        let mut k = key.clone();
        momentum_update(&mut k, &query, 1.0).unwrap();
        assert_eq!(k, key);
        let mut k = key.clone();
        momentum_update(&mut k, &query, 0.0).unwrap();
        assert_eq!(k, query);
    }

    #[test]
    fn momentum_update_rejects_mismatch() {
        let query = small();
        let mut key = EncoderParams::init(EncoderConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(
            momentum_update(&mut key, &query, 0.5),
            Err(HexaError::Architecture(_))
        ));
    }
}
