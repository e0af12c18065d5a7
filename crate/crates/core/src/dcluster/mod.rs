//! Prototype training: k-means pseudo-labels refreshed every epoch, predicted
//! from clean, adversarial and cut-mixed crops in between.

mod kmeans;

pub use kmeans::{assignment_churn, spherical_kmeans, KmeansConfig, KmeansResult, PrototypeBank};

use std::time::Instant;

use crate::augment::{
    cutmix_with_masks, pgd_attack, sample_batch_masks, sample_derangement, transform_batch, AdvConfig,
    CutMixConfig, MixedPseudoLabel, PixelBounds, TransformConfig,
};
use crate::error::{HexaError, Result};
use crate::moco::BatchIndex;
use crate::nn::{BnMode, BnUsage, EncoderConfig, EncoderOutput, EncoderParams, Sgd, SgdConfig};
use crate::objectives::{hexa_combine, mixed_loss, prototype_loss, prototype_rows, HexaWeights};
use crate::rng::RngStreams;
use crate::scheme::Scheme;
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{epoch_batches, EpochMetrics, LossAccumulator, LrSchedule};

/// Multi-crop layout: `(count, resolution)` groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CropSpec {
    pub groups: Vec<(usize, usize)>,
}

impl Default for CropSpec {
    fn default() -> Self {
        CropSpec { groups: vec![(2, 32)] }
    }
}

impl CropSpec {
    pub fn six_crop() -> Self {
        CropSpec {
            groups: vec![(2, 24), (4, 16)],
        }
    }

    pub fn total(&self) -> usize {
        self.groups.iter().map(|g| g.0).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.total() == 0 || self.groups.iter().any(|g| g.1 == 0) {
            return Err(HexaError::config("crop spec needs at least one crop of positive resolution"));
        }
        Ok(())
    }

    /// `(group, crop-within-group, resolution)` for every crop.
    pub fn crops(&self) -> Vec<(usize, usize, usize)> {
        self.groups
            .iter()
            .enumerate()
            .flat_map(|(g, &(count, res))| (0..count).map(move |c| (g, c, res)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DclusterConfig {
    pub encoder: EncoderConfig,
    pub transform: TransformConfig,
    pub adv: AdvConfig,
    pub cutmix: CutMixConfig,
    pub weights: HexaWeights,
    pub scheme: Scheme,
    pub tau: f32,
    pub kmeans: KmeansConfig,
    pub crops: CropSpec,
    pub sgd: SgdConfig,
}

impl Default for DclusterConfig {
    fn default() -> Self {
        DclusterConfig {
            encoder: EncoderConfig::default(),
            transform: TransformConfig::default(),
            adv: AdvConfig::default(),
            cutmix: CutMixConfig::default(),
            weights: HexaWeights::default(),
            scheme: Scheme::STD,
            tau: 0.2,
            kmeans: KmeansConfig::default(),
            crops: CropSpec::default(),
            sgd: SgdConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DclusterState {
    pub config: DclusterConfig,
    pub encoder: EncoderParams,
    /// Prototypes and per-image pseudo-labels; frozen within an epoch.
    pub bank: Option<PrototypeBank>,
    pub optimizer: Sgd,
    pub streams: RngStreams,
}

/// Loss terms of one step plus the clean latents of each image's first crop.
#[derive(Clone, Debug, PartialEq)]
pub struct DclusterStep {
    pub loss_std: f32,
    pub loss_adv: Option<f32>,
    pub loss_cmx: Option<f32>,
    pub loss_total: f32,
    pub latents: Tensor,
}

impl DclusterState {
    pub fn new(config: DclusterConfig, seed: u64) -> Result<Self> {
        config.transform.validate()?;
        config.adv.validate()?;
        config.cutmix.validate()?;
        config.weights.validate()?;
        config.crops.validate()?;
        let streams = RngStreams::new(seed);
        let encoder = EncoderParams::init(config.encoder.clone(), &mut streams.stream("init", 0, 0))?;
        let optimizer = Sgd::new(&config.sgd);
        Ok(DclusterState {
            config,
            encoder,
            bank: None,
            optimizer,
            streams,
        })
    }

    /// Initial pseudo-labels: k-means over evaluation-mode latents of the
    /// current (randomly initialized) encoder.
    pub fn initialize_bank(&mut self, images: &Tensor) -> Result<f64> {
        let res = self.config.crops.groups[0].1;
        let view_cfg = TransformConfig {
            mean: self.config.transform.mean.clone(),
            std: self.config.transform.std.clone(),
            ..TransformConfig::identity(res)
        };
        let mut latents = Vec::with_capacity(images.shape()[0]);
        for chunk in (0..images.shape()[0]).collect::<Vec<_>>().chunks(256) {
            let views = transform_batch(&images.select(chunk), &view_cfg, |_| self.streams.stream("unused", 0, 0))?;
            latents.push(self.encoder.eval_latents(&views)?);
        }
        let z = concat_rows(&latents)?;
        let result = spherical_kmeans(&z, &self.config.kmeans, &mut self.streams.stream("kmeans", 0, 0))?;
        let objective = result.objective / z.shape()[0] as f64;
        self.bank = Some(result.bank);
        Ok(objective)
    }

    fn bank(&self) -> Result<&PrototypeBank> {
        self.bank
            .as_ref()
            .ok_or_else(|| HexaError::contract("prototype bank is not initialized"))
    }
}

fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    let d = parts.first().map_or(0, |t| t.row_len());
    let mut data = Vec::new();
    let mut n = 0;
    for p in parts {
        n += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    Tensor::new(&[n, d], data)
}

/// One update on raw images `B×C×H×W`, against the frozen bank.
pub fn dcluster_step(state: &mut DclusterState, images: &Tensor, index: BatchIndex<'_>, lr: f32) -> Result<DclusterStep> {
    let cfg = state.config.clone();
    let b = images.shape().first().copied().unwrap_or(0);
    if index.ids.len() != b {
        return Err(HexaError::contract("batch ids do not match the batch size"));
    }
    let bank = state.bank()?.clone();
    let targets = bank.targets(index.ids)?;
    let do_adv = cfg.scheme.adv && cfg.weights.alpha1 > 0.0;
    let do_cmx = cfg.scheme.needs_cutmix() && cfg.weights.alpha2 > 0.0;
    if do_cmx && b < 2 {
        return Err(HexaError::contract("cut-mixed crops need a batch of at least 2"));
    }
    let epoch = index.epoch as u64;
    let streams = state.streams;

    let crops = cfg.crops.crops();
    let mut views = Vec::with_capacity(crops.len());
    for &(g, c, res) in &crops {
        let tcfg = TransformConfig {
            output_size: res,
            ..cfg.transform.clone()
        };
        let name = format!("crop{g}.{c}");
        views.push(transform_batch(images, &tcfg, |i| streams.stream(&name, epoch, index.ids[i] as u64))?);
    }

    let adv_views = if do_adv || (do_cmx && cfg.scheme.cmx_a) {
        let bounds = PixelBounds::from_normalization(&cfg.transform.mean, &cfg.transform.std);
        let encoder = &mut state.encoder;
        let mut out = Vec::with_capacity(views.len());
        for v in &views {
            out.push(pgd_attack(v, &cfg.adv, Some(&bounds), |tape, x| {
                let bound = encoder.bind(tape, false);
                let z = encoder.forward(
                    tape,
                    &bound,
                    x,
                    BnMode::Adversarial,
                    BnUsage::Batch { update_running: false },
                    EncoderOutput::Latent,
                )?;
                let c = tape.constant(bank.centroids.clone());
                prototype_loss(tape, z, c, &targets, cfg.tau)
            })?);
        }
        Some(out)
    } else {
        None
    };

    // One permutation per step, shared by every crop.
    let mut mixes: Vec<(Tensor, Vec<MixedPseudoLabel>)> = Vec::new();
    if do_cmx {
        let mut rng = streams.stream("cutmix", epoch, index.step as u64);
        let perm = sample_derangement(b, &mut rng)?;
        let partner: Vec<usize> = perm.iter().map(|&p| targets[p]).collect();
        for (ci, v) in views.iter().enumerate() {
            let masks = sample_batch_masks(v, &cfg.cutmix, &mut rng)?;
            if cfg.scheme.cmx {
                mixes.push(cutmix_with_masks(v, &targets, &v.select(&perm), &partner, &masks)?);
            }
            if let (true, Some(adv)) = (cfg.scheme.cmx_a, &adv_views) {
                let a = &adv[ci];
                mixes.push(cutmix_with_masks(a, &targets, &a.select(&perm), &partner, &masks)?);
            }
        }
    }

    let mut tape = Tape::new();
    let bound = state.encoder.bind(&mut tape, true);
    let protos = tape.constant(bank.centroids.clone());
    let train = BnUsage::Batch { update_running: true };
    let crop_scale = 1.0 / crops.len() as f32;

    let mut latents = None;
    let mut std_terms = Vec::with_capacity(views.len());
    for v in &views {
        let x = tape.constant(v.clone());
        let z = state.encoder.forward(&mut tape, &bound, x, BnMode::Clean, train, EncoderOutput::Latent)?;
        if latents.is_none() {
            latents = Some(tape.value(z).clone());
        }
        std_terms.push(prototype_loss(&mut tape, z, protos, &targets, cfg.tau)?);
    }
    let std = average(&mut tape, &std_terms, crop_scale)?;

    let adv = match (do_adv, &adv_views) {
        (true, Some(adv)) => {
            let mut terms = Vec::with_capacity(adv.len());
            for v in adv {
                let x = tape.constant(v.clone());
                let z = state.encoder.forward(&mut tape, &bound, x, BnMode::Adversarial, train, EncoderOutput::Latent)?;
                terms.push(prototype_loss(&mut tape, z, protos, &targets, cfg.tau)?);
            }
            Some(average(&mut tape, &terms, crop_scale)?)
        }
        _ => None,
    };

    let cmx = if mixes.is_empty() {
        None
    } else {
        let mut terms = Vec::with_capacity(mixes.len());
        for (xm, labels) in &mixes {
            let x = tape.constant(xm.clone());
            let z = state.encoder.forward(&mut tape, &bound, x, BnMode::Clean, train, EncoderOutput::Latent)?;
            terms.push(mixed_loss(&mut tape, labels, |t, idx| prototype_rows(t, z, protos, idx, cfg.tau))?);
        }
        // Clean and adversarial mixes are separate terms that add up.
        Some(average(&mut tape, &terms, crop_scale)?)
    };

    let total = hexa_combine(&mut tape, std, adv, cmx, &cfg.weights)?;
    let report = DclusterStep {
        loss_std: tape.value(std).item()?,
        loss_adv: adv.map(|v| tape.value(v).item()).transpose()?,
        loss_cmx: cmx.map(|v| tape.value(v).item()).transpose()?,
        loss_total: tape.value(total).item()?,
        latents: latents.expect("at least one crop"),
    };
    tape.backward(total)?;
    let grads = bound.grads(&tape);
    state.optimizer.step(&mut state.encoder.parameters_mut(), &grads, lr)?;
    Ok(report)
}

fn average(tape: &mut Tape, terms: &[Var], scale: f32) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(if scale == 1.0 { acc } else { tape.scale(acc, scale) })
}

/// One epoch over `images` (`N×C×H×W`), then re-clustering of the collected
/// clean latents into a fresh bank.
pub fn dcluster_epoch(
    state: &mut DclusterState,
    images: &Tensor,
    epoch: usize,
    batch_size: usize,
    schedule: &LrSchedule,
    global_step: &mut usize,
) -> Result<EpochMetrics> {
    let start = Instant::now();
    let n = images.shape()[0];
    let old = state.bank()?.assignments.clone();
    if old.len() != n {
        return Err(HexaError::contract(format!(
            "assignment table covers {} images but the dataset has {n}",
            old.len()
        )));
    }
    let d = state.config.encoder.proj_dim;
    let mut collected = Tensor::zeros(&[n, d]);
    let mut losses = LossAccumulator::default();
    for (step, ids) in epoch_batches(n, batch_size, &state.streams, epoch)?.iter().enumerate() {
        let batch = images.select(ids);
        let lr = schedule.at(*global_step);
        let r = dcluster_step(state, &batch, BatchIndex { ids, epoch, step }, lr)?;
        for (row, &id) in ids.iter().enumerate() {
            collected.row_mut(id).copy_from_slice(r.latents.row(row));
        }
        losses.add(r.loss_std, r.loss_adv, r.loss_cmx, r.loss_total);
        *global_step += 1;
    }
    let result = spherical_kmeans(
        &collected,
        &state.config.kmeans,
        &mut state.streams.stream("kmeans", epoch as u64 + 1, 0),
    )?;
    let churn = assignment_churn(&old, &result.bank.assignments)?;
    let objective = result.objective / n as f64;
    state.bank = Some(result.bank);
    let (loss_std, loss_adv, loss_cmx, loss_total) = losses.means();
    Ok(EpochMetrics {
        epoch,
        scheme: state.config.scheme,
        loss_std,
        loss_adv,
        loss_cmx,
        loss_total,
        kmeans_objective: Some(objective),
        queue_size: None,
        churn: Some(churn),
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(scheme: Scheme, crops: CropSpec) -> DclusterConfig {
        DclusterConfig {
            encoder: EncoderConfig {
                widths: vec![4, 8],
                head_hidden: 8,
                proj_dim: 6,
                ..EncoderConfig::default()
            },
            scheme,
            kmeans: KmeansConfig { k: 3, iters: 5, restarts: 2 },
            crops,
            ..DclusterConfig::default()
        }
    }

    fn images(n: usize) -> Tensor {
        Tensor::uniform(&[n, 3, 8, 8], 0.0, 1.0, &mut RngStreams::new(5).stream("data", 0, 0))
    }

    #[test]
    fn epoch_refreshes_assignments_to_argmax() {
        let mut state = DclusterState::new(tiny(Scheme::ADV_CMX, CropSpec { groups: vec![(2, 8)] }), 0).unwrap();
        let x = images(12);
        state.initialize_bank(&x).unwrap();
        let schedule = LrSchedule { base: 0.05, total_steps: 6 };
        let mut step = 0;
        let m = dcluster_epoch(&mut state, &x, 0, 4, &schedule, &mut step).unwrap();
        assert_eq!(step, 3);
        assert!(m.loss_adv.is_some() && m.loss_cmx.is_some());
        let bank = state.bank.as_ref().unwrap();
        assert_eq!(bank.assignments.len(), 12);
    }

    #[test]
    fn multi_crop_with_mixed_resolutions_runs() {
        let crops = CropSpec {
            groups: vec![(1, 8), (2, 4)],
        };
        let mut state = DclusterState::new(tiny(Scheme::ADV_CMX_CMX_A, crops), 1).unwrap();
        let x = images(6);
        state.initialize_bank(&x).unwrap();
        let ids = [0, 1, 2];
        let r = dcluster_step(&mut state, &x.select(&ids), BatchIndex { ids: &ids, epoch: 0, step: 0 }, 0.05).unwrap();
        assert!(r.loss_total.is_finite());
        assert_eq!(r.latents.shape(), &[3, 6]);
    }

    #[test]
    fn bank_size_mismatch_is_contract_error() {
        let mut state = DclusterState::new(tiny(Scheme::STD, CropSpec::default()), 2).unwrap();
        state.config.crops = CropSpec { groups: vec![(1, 8)] };
        state.initialize_bank(&images(6)).unwrap();
        let schedule = LrSchedule { base: 0.05, total_steps: 1 };
        let err = dcluster_epoch(&mut state, &images(8), 0, 4, &schedule, &mut 0).unwrap_err();
        assert!(matches!(err, HexaError::Contract(_)));
    }
}
