//! Transfer evaluation of frozen or fine-tuned encoders: linear probe,
//! low-shot probe and label-subset fine-tuning.

use rand::seq::SliceRandom;

use crate::augment::{transform_batch, TransformConfig};
use crate::error::{HexaError, Result};
use crate::nn::{cosine_lr, BnMode, BnUsage, EncoderOutput, EncoderParams, Sgd, SgdConfig};
use crate::objectives::cross_entropy_rows;
use crate::rng::RngStreams;
use crate::tensor::{Tape, Tensor};

/// Labeled images, `N×C×H×W` with pixels in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.ndim() != 4 || images.shape()[0] != labels.len() {
            return Err(HexaError::contract(format!(
                "labeled set: {} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        Ok(LabeledSet { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet {
            images: self.images.select(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    fn by_class(&self, classes: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Independent runs averaged by the low-shot probe.
    pub runs: usize,
    pub seed: u64,
    /// Fine-tuning learning rates for the backbone and the classifier.
    pub backbone_lr: f32,
    pub head_lr: f32,
    /// Normalization applied to images before the encoder.
    pub view: TransformConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 30,
            lr: 0.1,
            batch_size: 128,
            momentum: 0.9,
            weight_decay: 0.0,
            runs: 5,
            seed: 0,
            backbone_lr: 0.01,
            head_lr: 0.1,
            view: TransformConfig::identity(32),
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.runs == 0 || self.lr <= 0.0 {
            return Err(HexaError::config("probe needs positive batch size, runs and learning rate"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_run: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl EvalReport {
    pub fn from_runs(per_run: Vec<f64>) -> Self {
        let n = per_run.len().max(1) as f64;
        let mean = per_run.iter().sum::<f64>() / n;
        let var = per_run.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        EvalReport {
            per_run,
            mean,
            std: var.sqrt(),
        }
    }

    /// Top-1 accuracy of a single-run report (the mean otherwise).
    pub fn top1(&self) -> f64 {
        self.mean
    }
}

/// Softmax regression weights `d×K` and bias `K`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearClassifier {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        LinearClassifier {
            weight: Tensor::zeros(&[dim, classes]),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let w = tape.constant(self.weight.clone());
        let b = tape.constant(self.bias.clone());
        let l = tape.matmul(x, w)?;
        let l = tape.add_bias(l, b)?;
        Ok(argmax_rows(tape.value(l)))
    }
}

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.shape()[0])
        .map(|r| {
            let row = t.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// Per-dimension standardization fitted on training features.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
}

impl Standardizer {
    pub fn fit(x: &Tensor) -> Self {
        let (n, d) = (x.shape()[0], x.row_len());
        let mut mean = vec![0.0f64; d];
        for r in 0..n {
            mean.iter_mut().zip(x.row(r)).for_each(|(m, &v)| *m += v as f64);
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
        let mut var = vec![0.0f64; d];
        for r in 0..n {
            for ((s, &v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v as f64 - m).powi(2);
            }
        }
        Standardizer {
            mean: mean.iter().map(|&m| m as f32).collect(),
            inv_std: var.iter().map(|&v| (1.0 / ((v / n.max(1) as f64).sqrt() + 1e-6)) as f32).collect(),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        let d = self.mean.len();
        for row in out.data_mut().chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.inv_std) {
                *v = (*v - m) * s;
            }
        }
        out
    }
}

/// Trains softmax regression on fixed features with SGD + cosine decay.
pub fn train_linear(
    features: &Tensor,
    labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
    streams: &RngStreams,
) -> Result<LinearClassifier> {
    cfg.validate()?;
    let n = features.shape()[0];
    let mut clf = LinearClassifier::zeros(features.row_len(), classes);
    let mut opt = Sgd::new(&SgdConfig {
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    });
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut streams.stream("probe-order", epoch as u64, 0));
        for idx in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let x = tape.constant(features.select(idx));
            let w = tape.param(clf.weight.clone());
            let b = tape.param(clf.bias.clone());
            let l = tape.matmul(x, w)?;
            let l = tape.add_bias(l, b)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let rows = cross_entropy_rows(&mut tape, l, &y)?;
            let loss = tape.mean(rows)?;
            tape.backward(loss)?;
            let grads = [tape.grad(w).cloned(), tape.grad(b).cloned()];
            let lr = cosine_lr(cfg.lr, step, total);
            opt.step(
                &mut [&mut clf.weight, &mut clf.bias],
                &[grads[0].as_ref(), grads[1].as_ref()],
                lr,
            )?;
            step += 1;
        }
    }
    Ok(clf)
}

/// Evaluation-mode backbone features of every image, computed in chunks.
pub fn extract_features(encoder: &EncoderParams, images: &Tensor, view: &TransformConfig) -> Result<Tensor> {
    let n = images.shape()[0];
    let d = encoder.config.feature_dim();
    let mut data = Vec::with_capacity(n * d);
    let ids: Vec<usize> = (0..n).collect();
    let streams = RngStreams::new(0);
    for chunk in ids.chunks(256) {
        let views = transform_batch(&images.select(chunk), view, |_| streams.stream("eval", 0, 0))?;
        data.extend_from_slice(encoder.eval_features(&views)?.data());
    }
    Tensor::new(&[n, d], data)
}

/// Linear probe on fixed features (already extracted).
pub fn probe_features(
    train: (&Tensor, &[usize]),
    test: (&Tensor, &[usize]),
    classes: usize,
    cfg: &ProbeConfig,
    streams: &RngStreams,
) -> Result<f64> {
    if let Some(&bad) = train.1.iter().chain(test.1).find(|&&l| l >= classes) {
        return Err(HexaError::contract(format!("label {bad} outside {classes} classes")));
    }
    let st = Standardizer::fit(train.0);
    let clf = train_linear(&st.apply(train.0), train.1, classes, cfg, streams)?;
    Ok(accuracy(&clf.predict(&st.apply(test.0))?, test.1))
}

fn class_count(train: &LabeledSet, test: &LabeledSet) -> Result<usize> {
    let (a, b) = (train.classes(), test.classes());
    if train.is_empty() || test.is_empty() {
        return Err(HexaError::contract("evaluation needs non-empty train and test sets"));
    }
    if b > a {
        return Err(HexaError::contract(format!(
            "test set has {b} classes but training set only {a}"
        )));
    }
    Ok(a)
}

/// Linear classifier on frozen evaluation-mode backbone features.
pub fn linear_probe(encoder: &EncoderParams, train: &LabeledSet, test: &LabeledSet, cfg: &ProbeConfig) -> Result<EvalReport> {
    let classes = class_count(train, test)?;
    let ftr = extract_features(encoder, &train.images, &cfg.view)?;
    let fte = extract_features(encoder, &test.images, &cfg.view)?;
    let acc = probe_features((&ftr, &train.labels), (&fte, &test.labels), classes, cfg, &RngStreams::new(cfg.seed))?;
    Ok(EvalReport::from_runs(vec![acc]))
}

/// Exactly `k` examples per class, drawn with `rng`-stream `run`.
pub fn sample_k_per_class(set: &LabeledSet, k: usize, streams: &RngStreams, run: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(HexaError::config("shots per class must be at least 1"));
    }
    let mut out = Vec::new();
    for (c, mut members) in set.by_class(set.classes()).into_iter().enumerate() {
        if members.len() < k {
            return Err(HexaError::contract(format!(
                "class {c} has {} examples, fewer than k={k}",
                members.len()
            )));
        }
        members.shuffle(&mut streams.stream("subset", run as u64, c as u64));
        out.extend_from_slice(&members[..k]);
    }
    out.sort_unstable();
    Ok(out)
}

/// `⌈fraction · n_c⌉` examples of every class `c`.
pub fn sample_fraction(set: &LabeledSet, fraction: f64, streams: &RngStreams, run: usize) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(HexaError::config(format!("label fraction {fraction} outside (0, 1]")));
    }
    let mut out = Vec::new();
    for (c, mut members) in set.by_class(set.classes()).into_iter().enumerate() {
        let take = ((fraction * members.len() as f64).ceil() as usize).min(members.len());
        members.shuffle(&mut streams.stream("subset", run as u64, c as u64));
        out.extend_from_slice(&members[..take]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Linear probes on `cfg.runs` stratified `k`-shot subsets.
pub fn low_shot_probe(
    encoder: &EncoderParams,
    train: &LabeledSet,
    test: &LabeledSet,
    k: usize,
    cfg: &ProbeConfig,
) -> Result<EvalReport> {
    let classes = class_count(train, test)?;
    let ftr = extract_features(encoder, &train.images, &cfg.view)?;
    let fte = extract_features(encoder, &test.images, &cfg.view)?;
    let streams = RngStreams::new(cfg.seed);
    let mut runs = Vec::with_capacity(cfg.runs);
    for run in 0..cfg.runs {
        let idx = sample_k_per_class(train, k, &streams, run)?;
        let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        let acc = probe_features((&ftr.select(&idx), &labels), (&fte, &test.labels), classes, cfg, &streams)?;
        runs.push(acc);
    }
    Ok(EvalReport::from_runs(runs))
}

/// Fine-tunes a copy of the encoder together with a fresh linear head on a
/// labeled subset; returns test accuracy of the tuned model.
pub fn finetune(
    encoder: &EncoderParams,
    subset: &LabeledSet,
    test: &LabeledSet,
    cfg: &ProbeConfig,
) -> Result<(EvalReport, EncoderParams)> {
    cfg.validate()?;
    let classes = class_count(subset, test)?;
    let streams = RngStreams::new(cfg.seed);
    let mut enc = encoder.clone();
    let dim = enc.config.feature_dim();
    // Small random head so that zero epochs evaluate an untrained classifier.
    let mut head = LinearClassifier {
        weight: Tensor::randn(&[dim, classes], 0.01, &mut streams.stream("head-init", 0, 0)),
        bias: Tensor::zeros(&[classes]),
    };
    let sgd = SgdConfig {
        lr: cfg.head_lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    let mut opt = Sgd::new(&sgd);
    let n = subset.len();
    let total = cfg.epochs * n.div_ceil(cfg.batch_size);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut streams.stream("finetune-order", epoch as u64, 0));
        for idx in order.chunks(cfg.batch_size) {
            if idx.len() < 2 {
                continue;
            }
            let aug = TransformConfig {
                output_size: cfg.view.output_size,
                ..TransformConfig::default()
            };
            let views = transform_batch(&subset.images.select(idx), &aug, |i| {
                streams.stream("finetune-view", epoch as u64, idx[i] as u64)
            })?;
            let mut tape = Tape::new();
            let bound = enc.bind(&mut tape, true);
            let w = tape.param(head.weight.clone());
            let b = tape.param(head.bias.clone());
            let x = tape.constant(views);
            let f = enc.forward(
                &mut tape,
                &bound,
                x,
                BnMode::Clean,
                BnUsage::Batch { update_running: true },
                EncoderOutput::Features,
            )?;
            let l = tape.matmul(f, w)?;
            let l = tape.add_bias(l, b)?;
            let y: Vec<usize> = idx.iter().map(|&i| subset.labels[i]).collect();
            let rows = cross_entropy_rows(&mut tape, l, &y)?;
            let loss = tape.mean(rows)?;
            tape.backward(loss)?;
            let mut grads: Vec<Option<Tensor>> = bound.grads(&tape).into_iter().map(|g| g.cloned()).collect();
            grads.push(tape.grad(w).cloned());
            grads.push(tape.grad(b).cloned());
            drop(tape);
            let scale = cosine_lr(1.0, step, total);
            let mut params = enc.parameters_mut();
            let backbone = params.len();
            let mut lrs = vec![cfg.backbone_lr * scale; backbone];
            lrs.extend([cfg.head_lr * scale; 2]);
            params.push(&mut head.weight);
            params.push(&mut head.bias);
            let grad_refs: Vec<Option<&Tensor>> = grads.iter().map(Option::as_ref).collect();
            opt.step_with_lrs(&mut params, &grad_refs, &lrs)?;
            step += 1;
        }
    }
    let fte = extract_features(&enc, &test.images, &cfg.view)?;
    let acc = accuracy(&head.predict(&fte)?, &test.labels);
    Ok((EvalReport::from_runs(vec![acc]), enc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::EncoderConfig;

    #[test]
    fn separable_features_are_fit_exactly() {
        let streams = RngStreams::new(0);
        let mut rng = streams.stream("blobs", 0, 0);
        let mut f = Tensor::randn(&[200, 4], 0.3, &mut rng);
        let labels: Vec<usize> = (0..200).map(|i| i % 2).collect();
        for (i, &l) in labels.iter().enumerate() {
            f.row_mut(i)[0] += if l == 0 { -3.0 } else { 3.0 };
        }
        let cfg = ProbeConfig {
            epochs: 10,
            batch_size: 32,
            ..ProbeConfig::default()
        };
        let (tr, te): (Vec<usize>, Vec<usize>) = (0..200).partition(|i| i % 4 != 0);
        let ltr: Vec<usize> = tr.iter().map(|&i| labels[i]).collect();
        let lte: Vec<usize> = te.iter().map(|&i| labels[i]).collect();
        let acc = probe_features((&f.select(&tr), &ltr), (&f.select(&te), &lte), 2, &cfg, &streams).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn report_mean_matches_runs() {
        let r = EvalReport::from_runs(vec![0.5, 0.75, 1.0]);
        assert_eq!(r.mean, (0.5 + 0.75 + 1.0) / 3.0);
    }

    #[test]
    fn stratified_subsets() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let set = LabeledSet::new(Tensor::zeros(&[30, 1, 2, 2]), labels).unwrap();
        let s = RngStreams::new(1);
        let idx = sample_k_per_class(&set, 4, &s, 0).unwrap();
        for c in 0..3 {
            assert_eq!(idx.iter().filter(|&&i| set.labels[i] == c).count(), 4);
        }
        assert_eq!(idx, sample_k_per_class(&set, 4, &s, 0).unwrap());
        assert!(sample_k_per_class(&set, 11, &s, 0).is_err());
        let idx = sample_fraction(&set, 0.15, &s, 0).unwrap();
        for c in 0..3 {
            assert_eq!(idx.iter().filter(|&&i| set.labels[i] == c).count(), 2);
        }
    }

    #[test]
    fn probe_leaves_encoder_untouched() {
        let cfg = EncoderConfig {
            widths: vec![4, 8],
            head_hidden: 8,
            proj_dim: 4,
            ..EncoderConfig::default()
        };
        let enc = EncoderParams::init(cfg, &mut RngStreams::new(2).stream("init", 0, 0)).unwrap();
        let before = enc.fingerprint();
        let mut rng = RngStreams::new(3).stream("d", 0, 0);
        let images = Tensor::uniform(&[20, 3, 8, 8], 0.0, 1.0, &mut rng);
        let set = LabeledSet::new(images, (0..20).map(|i| i % 2).collect()).unwrap();
        let pcfg = ProbeConfig {
            epochs: 2,
            batch_size: 8,
            view: TransformConfig::identity(8),
            ..ProbeConfig::default()
        };
        linear_probe(&enc, &set, &set, &pcfg).unwrap();
        assert_eq!(enc.fingerprint(), before);
        let (_, tuned) = finetune(&enc, &set, &set, &pcfg).unwrap();
        assert_ne!(tuned.fingerprint(), before);
    }
}
