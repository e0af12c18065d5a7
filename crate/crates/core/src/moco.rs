//! Queue-based contrastive training with a momentum key encoder and
//! adversarial / cut-mixed query streams.

use std::time::Instant;

use crate::augment::{
    cutmix_with_masks, pgd_attack, sample_batch_masks, sample_derangement, transform_batch, AdvConfig,
    CutMixConfig, MixedPseudoLabel, PixelBounds, TransformConfig,
};
use crate::error::{HexaError, Result};
use crate::nn::{momentum_update, BnMode, BnUsage, EncoderConfig, EncoderOutput, EncoderParams, Sgd, SgdConfig};
use crate::objectives::{contrastive_cutmix_loss, hexa_combine, info_nce_reduced, HexaWeights, Negatives};
use crate::rng::RngStreams;
use crate::scheme::Scheme;
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{epoch_batches, EpochMetrics, LossAccumulator, LrSchedule};

/// Fixed-capacity FIFO of detached key embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    storage: Vec<f32>,
    /// Slot the next row is written to.
    head: usize,
    len: usize,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(HexaError::config("queue capacity and dimension must be positive"));
        }
        Ok(NegativeQueue {
            capacity,
            dim,
            storage: vec![0.0; capacity * dim],
            head: 0,
            len: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends the rows of `keys` (`B×d`), evicting the oldest rows when full.
    pub fn enqueue(&mut self, keys: &Tensor) -> Result<()> {
        if keys.ndim() != 2 || keys.shape()[1] != self.dim {
            return Err(HexaError::contract(format!(
                "queue holds {}-dim keys, got shape {:?}",
                self.dim,
                keys.shape()
            )));
        }
        let b = keys.shape()[0];
        if b > self.capacity {
            return Err(HexaError::contract(format!(
                "cannot enqueue {b} keys into a queue of capacity {}",
                self.capacity
            )));
        }
        for r in 0..b {
            let at = self.head * self.dim;
            self.storage[at..at + self.dim].copy_from_slice(keys.row(r));
            self.head = (self.head + 1) % self.capacity;
        }
        self.len = (self.len + b).min(self.capacity);
        Ok(())
    }

    /// Stored rows from oldest to newest, as an `len×d` tensor.
    pub fn snapshot(&self) -> Tensor {
        let start = (self.head + self.capacity - self.len) % self.capacity;
        let mut data = Vec::with_capacity(self.len * self.dim);
        for i in 0..self.len {
            let slot = (start + i) % self.capacity;
            data.extend_from_slice(&self.storage[slot * self.dim..(slot + 1) * self.dim]);
        }
        Tensor::new(&[self.len, self.dim], data).expect("queue snapshot shape")
    }

    /// Rebuilds a queue from its oldest-to-newest rows.
    pub fn from_rows(capacity: usize, rows: &Tensor) -> Result<Self> {
        if rows.ndim() != 2 {
            return Err(HexaError::contract("queue rows must be a matrix"));
        }
        let mut q = NegativeQueue::new(capacity, rows.shape()[1])?;
        q.enqueue(rows)?;
        Ok(q)
    }
}

/// Source of the negatives in the contrastive losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NegativeSource {
    Queue,
    /// All other keys of the current batch, with no memory.
    InBatch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MocoConfig {
    pub encoder: EncoderConfig,
    pub transform: TransformConfig,
    pub adv: AdvConfig,
    pub cutmix: CutMixConfig,
    pub weights: HexaWeights,
    pub scheme: Scheme,
    pub tau: f32,
    pub queue_capacity: usize,
    pub beta: f32,
    pub negatives: NegativeSource,
    pub exclude_other_positive: bool,
    pub sgd: SgdConfig,
}

impl Default for MocoConfig {
    fn default() -> Self {
        MocoConfig {
            encoder: EncoderConfig::default(),
            transform: TransformConfig::default(),
            adv: AdvConfig::default(),
            cutmix: CutMixConfig::default(),
            weights: HexaWeights::default(),
            scheme: Scheme::STD,
            tau: 0.2,
            queue_capacity: 4096,
            beta: 0.99,
            negatives: NegativeSource::Queue,
            exclude_other_positive: false,
            sgd: SgdConfig::default(),
        }
    }
}

/// Query encoder, momentum key encoder, queue and optimizer.
#[derive(Clone, Debug)]
pub struct MocoState {
    pub config: MocoConfig,
    pub query: EncoderParams,
    pub key: EncoderParams,
    pub queue: NegativeQueue,
    pub optimizer: Sgd,
    pub streams: RngStreams,
}

/// Loss terms of one step. Terms the scheme does not train are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss_std: f32,
    pub loss_adv: Option<f32>,
    pub loss_cmx: Option<f32>,
    pub loss_total: f32,
    pub queue_size: usize,
    /// Operations recorded on the key-encoder tape; zero when keys carry no graph.
    pub key_tape_ops: usize,
}

/// Identity of a batch within a run: which images, and where in training.
#[derive(Clone, Copy, Debug)]
pub struct BatchIndex<'a> {
    pub ids: &'a [usize],
    pub epoch: usize,
    pub step: usize,
}

impl MocoState {
    pub fn new(config: MocoConfig, seed: u64) -> Result<Self> {
        config.transform.validate()?;
        config.adv.validate()?;
        config.cutmix.validate()?;
        config.weights.validate()?;
        if !(0.0..=1.0).contains(&config.beta) {
            return Err(HexaError::config(format!("momentum beta {} outside [0,1]", config.beta)));
        }
        let streams = RngStreams::new(seed);
        let query = EncoderParams::init(config.encoder.clone(), &mut streams.stream("init", 0, 0))?;
        let key = query.clone();
        let queue = NegativeQueue::new(config.queue_capacity, config.encoder.proj_dim)?;
        let optimizer = Sgd::new(&config.sgd);
        Ok(MocoState {
            config,
            query,
            key,
            queue,
            optimizer,
            streams,
        })
    }
}

fn negatives_for(tape: &mut Tape, source: NegativeSource, queue: &Tensor) -> Negatives {
    match source {
        NegativeSource::InBatch => Negatives::InBatch,
        NegativeSource::Queue => Negatives::Queue(tape.constant(queue.clone())),
    }
}

/// One training step on raw images `B×C×H×W` (pixels in `[0,1]`).
pub fn moco_step(state: &mut MocoState, images: &Tensor, index: BatchIndex<'_>, lr: f32) -> Result<StepReport> {
    let cfg = state.config.clone();
    let b = images.shape().first().copied().unwrap_or(0);
    if index.ids.len() != b {
        return Err(HexaError::contract("batch ids do not match the batch size"));
    }
    let do_adv = cfg.scheme.adv && cfg.weights.alpha1 > 0.0;
    let do_cmx = cfg.scheme.needs_cutmix() && cfg.weights.alpha2 > 0.0;
    if do_cmx && b < 2 {
        return Err(HexaError::contract("cut-mixed queries need a batch of at least 2"));
    }
    if state.queue.dim() != cfg.encoder.proj_dim {
        return Err(HexaError::contract(format!(
            "queue dimension {} does not match latent dimension {}",
            state.queue.dim(),
            cfg.encoder.proj_dim
        )));
    }
    let epoch = index.epoch as u64;
    let streams = state.streams;
    let xq = transform_batch(images, &cfg.transform, |i| streams.stream("T", epoch, index.ids[i] as u64))?;
    let xk = transform_batch(images, &cfg.transform, |i| streams.stream("T'", epoch, index.ids[i] as u64))?;

    // Keys: momentum encoder, batch statistics, nothing requires a gradient.
    let (zk, key_tape_ops) = {
        let mut tape = Tape::new();
        let bound = state.key.bind(&mut tape, false);
        let x = tape.constant(xk);
        let z = state.key.forward(
            &mut tape,
            &bound,
            x,
            BnMode::Clean,
            BnUsage::Batch { update_running: false },
            EncoderOutput::Latent,
        )?;
        (tape.value(z).clone(), tape.recorded_ops())
    };
    let queue = state.queue.snapshot();

    let x_adv = if do_adv || (do_cmx && cfg.scheme.cmx_a) {
        let bounds = PixelBounds::from_normalization(&cfg.transform.mean, &cfg.transform.std);
        let query = &mut state.query;
        Some(pgd_attack(&xq, &cfg.adv, Some(&bounds), |tape, x| {
            let bound = query.bind(tape, false);
            let z = query.forward(
                tape,
                &bound,
                x,
                BnMode::Adversarial,
                BnUsage::Batch { update_running: false },
                EncoderOutput::Latent,
            )?;
            let k = tape.constant(zk.clone());
            let negs = negatives_for(tape, cfg.negatives, &queue);
            info_nce_reduced(tape, z, k, negs, cfg.tau)
        })?)
    } else {
        None
    };

    // Cut-mixed queries share one derangement and one mask per row.
    let mut mixes: Vec<(Tensor, Vec<MixedPseudoLabel>)> = Vec::new();
    let mut perm = Vec::new();
    if do_cmx {
        let mut rng = streams.stream("cutmix", epoch, index.step as u64);
        perm = sample_derangement(b, &mut rng)?;
        let ids: Vec<usize> = (0..b).collect();
        let masks = sample_batch_masks(&xq, &cfg.cutmix, &mut rng)?;
        let sources = [(cfg.scheme.cmx, Some(&xq)), (cfg.scheme.cmx_a, x_adv.as_ref())];
        for (enabled, src) in sources {
            if let (true, Some(src)) = (enabled, src) {
                mixes.push(cutmix_with_masks(src, &ids, &src.select(&perm), &perm, &masks)?);
            }
        }
    }

    let mut tape = Tape::new();
    let bound = state.query.bind(&mut tape, true);
    let k = tape.constant(zk.clone());
    let negs = negatives_for(&mut tape, cfg.negatives, &queue);
    let train = BnUsage::Batch { update_running: true };

    let x = tape.constant(xq);
    let zq = state.query.forward(&mut tape, &bound, x, BnMode::Clean, train, EncoderOutput::Latent)?;
    let std = info_nce_reduced(&mut tape, zq, k, negs, cfg.tau)?;

    let adv = match (do_adv, &x_adv) {
        (true, Some(xa)) => {
            let x = tape.constant(xa.clone());
            let z = state.query.forward(&mut tape, &bound, x, BnMode::Adversarial, train, EncoderOutput::Latent)?;
            Some(info_nce_reduced(&mut tape, z, k, negs, cfg.tau)?)
        }
        _ => None,
    };

    let mut cmx: Option<Var> = None;
    for (xm, labels) in &mixes {
        let lambdas: Vec<f32> = labels.iter().map(|l| l.lambda).collect();
        let x = tape.constant(xm.clone());
        let z = state.query.forward(&mut tape, &bound, x, BnMode::Clean, train, EncoderOutput::Latent)?;
        let term = contrastive_cutmix_loss(&mut tape, z, k, &perm, &lambdas, negs, cfg.tau, cfg.exclude_other_positive)?;
        cmx = Some(match cmx {
            Some(prev) => tape.add(prev, term)?,
            None => term,
        });
    }

    let total = hexa_combine(&mut tape, std, adv, cmx, &cfg.weights)?;
    let report = StepReport {
        loss_std: tape.value(std).item()?,
        loss_adv: adv.map(|v| tape.value(v).item()).transpose()?,
        loss_cmx: cmx.map(|v| tape.value(v).item()).transpose()?,
        loss_total: tape.value(total).item()?,
        queue_size: 0,
        key_tape_ops,
    };
    tape.backward(total)?;
    let grads = bound.grads(&tape);
    state.optimizer.step(&mut state.query.parameters_mut(), &grads, lr)?;
    drop(tape);

    momentum_update(&mut state.key, &state.query, cfg.beta)?;
    state.queue.enqueue(&zk)?;
    Ok(StepReport {
        queue_size: state.queue.len(),
        ..report
    })
}

/// One pass over `images` (`N×C×H×W`) in shuffled batches.
pub fn moco_epoch(
    state: &mut MocoState,
    images: &Tensor,
    epoch: usize,
    batch_size: usize,
    schedule: &LrSchedule,
    global_step: &mut usize,
) -> Result<EpochMetrics> {
    let start = Instant::now();
    let mut losses = LossAccumulator::default();
    for (step, ids) in epoch_batches(images.shape()[0], batch_size, &state.streams, epoch)?.iter().enumerate() {
        let batch = images.select(ids);
        let r = moco_step(state, &batch, BatchIndex { ids, epoch, step }, schedule.at(*global_step))?;
        losses.add(r.loss_std, r.loss_adv, r.loss_cmx, r.loss_total);
        *global_step += 1;
    }
    let (loss_std, loss_adv, loss_cmx, loss_total) = losses.means();
    Ok(EpochMetrics {
        epoch,
        scheme: state.config.scheme,
        loss_std,
        loss_adv,
        loss_cmx,
        loss_total,
        kmeans_objective: None,
        queue_size: Some(state.queue.len()),
        churn: None,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}
