//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored and
//! unknown keys are rejected. [`RunConfig::to_text`] writes every key back so
//! a saved configuration reproduces the run exactly.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::{AdvConfig, CutMixConfig, PerturbNorm, TransformConfig};
use crate::dcluster::{CropSpec, DclusterConfig, KmeansConfig};
use crate::error::{HexaError, Result, ResultExt};
use crate::eval::ProbeConfig;
use crate::moco::{MocoConfig, NegativeSource};
use crate::nn::{EncoderConfig, SgdConfig};
use crate::objectives::HexaWeights;
use crate::scheme::Scheme;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pretext {
    Moco,
    Dcluster,
}

impl fmt::Display for Pretext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pretext::Moco => "moco",
            Pretext::Dcluster => "dcluster",
        })
    }
}

impl FromStr for Pretext {
    type Err = HexaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moco" => Ok(Pretext::Moco),
            "dcluster" => Ok(Pretext::Dcluster),
            _ => Err(HexaError::config(format!("unknown pretext {s:?} (expected moco or dcluster)"))),
        }
    }
}

/// Everything a pre-training or evaluation run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub pretext: Pretext,
    pub scheme: Scheme,
    pub weights: HexaWeights,
    pub adv: AdvConfig,
    pub cutmix: CutMixConfig,
    pub transform: TransformConfig,
    pub crops: CropSpec,
    pub tau: f32,
    pub queue_capacity: usize,
    pub negatives: NegativeSource,
    pub exclude_other_positive: bool,
    pub kmeans: KmeansConfig,
    /// Momentum of the key encoder.
    pub beta: f32,
    pub sgd: SgdConfig,
    pub encoder: EncoderConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub probe_epochs: usize,
    pub probe_lr: f32,
    pub probe_runs: usize,
    /// Linear-probe the encoder every this many epochs during pre-training
    /// and keep the best checkpoint; 0 disables.
    pub probe_every: usize,
    pub low_shot_k: Vec<usize>,
    pub finetune_fractions: Vec<f64>,
    pub finetune_epochs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let moco = MocoConfig::default();
        let dc = DclusterConfig::default();
        RunConfig {
            pretext: Pretext::Moco,
            scheme: Scheme::STD,
            weights: HexaWeights::default(),
            adv: AdvConfig::default(),
            cutmix: CutMixConfig::default(),
            transform: TransformConfig::default(),
            crops: dc.crops,
            tau: moco.tau,
            queue_capacity: moco.queue_capacity,
            negatives: moco.negatives,
            exclude_other_positive: moco.exclude_other_positive,
            kmeans: dc.kmeans,
            beta: moco.beta,
            sgd: SgdConfig::default(),
            encoder: EncoderConfig::default(),
            epochs: 20,
            batch_size: 128,
            seed: 0,
            train_data: None,
            test_data: None,
            output_dir: PathBuf::from("runs"),
            probe_epochs: 30,
            probe_lr: 0.1,
            probe_runs: 5,
            probe_every: 0,
            low_shot_k: vec![1, 2, 4, 8, 16],
            finetune_fractions: vec![0.01, 0.1, 1.0],
            finetune_epochs: 10,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| HexaError::config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(HexaError::config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// `"2x24,4x16"` into `[(2, 24), (4, 16)]`.
fn parse_crops(value: &str) -> Result<CropSpec> {
    let groups = value
        .split(',')
        .map(str::trim)
        .map(|g| {
            let (n, r) = g
                .split_once('x')
                .ok_or_else(|| HexaError::config(format!("crops: expected COUNTxRES, got {g:?}")))?;
            Ok((parse("crops", n)?, parse("crops", r)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CropSpec { groups })
}

fn format_crops(c: &CropSpec) -> String {
    c.groups.iter().map(|(n, r)| format!("{n}x{r}")).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "pretext" => self.pretext = v.parse()?,
            "scheme" => self.scheme = v.parse()?,
            "adv" => self.scheme.adv = parse_bool(key, v)?,
            "cmx" => self.scheme.cmx = parse_bool(key, v)?,
            "cmx_a" => self.scheme.cmx_a = parse_bool(key, v)?,
            "alpha1" => self.weights.alpha1 = parse(key, v)?,
            "alpha2" => self.weights.alpha2 = parse(key, v)?,
            "epsilon" => self.adv.epsilon = parse(key, v)?,
            "eta" => self.adv.eta = parse(key, v)?,
            "pgd_steps" => self.adv.steps = parse(key, v)?,
            "pgd_norm" => {
                self.adv.norm = match v {
                    "linf" => PerturbNorm::LInf,
                    "l2" => PerturbNorm::L2,
                    _ => return Err(HexaError::config(format!("pgd_norm: expected linf or l2, got {v:?}"))),
                }
            }
            "pgd_clamp" => self.adv.clamp_to_pixels = parse_bool(key, v)?,
            "beta_alpha" => self.cutmix.beta_alpha = parse(key, v)?,
            "beta_beta" => self.cutmix.beta_beta = parse(key, v)?,
            "image_size" => self.transform.output_size = parse(key, v)?,
            "crop_scale_min" => self.transform.scale.0 = parse(key, v)?,
            "crop_scale_max" => self.transform.scale.1 = parse(key, v)?,
            "flip_p" => self.transform.flip_p = parse(key, v)?,
            "brightness" => self.transform.brightness = parse(key, v)?,
            "contrast" => self.transform.contrast = parse(key, v)?,
            "grayscale_p" => self.transform.grayscale_p = parse(key, v)?,
            "noise_sigma" => self.transform.noise_sigma = parse(key, v)?,
            "norm_mean" => self.transform.mean = parse_list(key, v)?,
            "norm_std" => self.transform.std = parse_list(key, v)?,
            "crops" => self.crops = parse_crops(v)?,
            "tau" => self.tau = parse(key, v)?,
            "queue_capacity" => self.queue_capacity = parse(key, v)?,
            "negatives" => {
                self.negatives = match v {
                    "queue" => NegativeSource::Queue,
                    "in_batch" => NegativeSource::InBatch,
                    _ => return Err(HexaError::config(format!("negatives: expected queue or in_batch, got {v:?}"))),
                }
            }
            "exclude_other_positive" => self.exclude_other_positive = parse_bool(key, v)?,
            "k" => self.kmeans.k = parse(key, v)?,
            "kmeans_iters" => self.kmeans.iters = parse(key, v)?,
            "kmeans_restarts" => self.kmeans.restarts = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "lr" => self.sgd.lr = parse(key, v)?,
            "sgd_momentum" => self.sgd.momentum = parse(key, v)?,
            "weight_decay" => self.sgd.weight_decay = parse(key, v)?,
            "widths" => self.encoder.widths = parse_list(key, v)?,
            "head_hidden" => self.encoder.head_hidden = parse(key, v)?,
            "proj_dim" => self.encoder.proj_dim = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "train_data" => self.train_data = (!v.is_empty()).then(|| PathBuf::from(v)),
            "test_data" => self.test_data = (!v.is_empty()).then(|| PathBuf::from(v)),
            "output_dir" => self.output_dir = PathBuf::from(v),
            "probe_epochs" => self.probe_epochs = parse(key, v)?,
            "probe_lr" => self.probe_lr = parse(key, v)?,
            "probe_runs" => self.probe_runs = parse(key, v)?,
            "probe_every" => self.probe_every = parse(key, v)?,
            "low_shot_k" => self.low_shot_k = parse_list(key, v)?,
            "finetune_fractions" => self.finetune_fractions = parse_list(key, v)?,
            "finetune_epochs" => self.finetune_epochs = parse(key, v)?,
            other => return Err(HexaError::config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override such as a command-line `--set`.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| HexaError::config(format!("expected key=value, got {assignment:?}")))?;
        self.set(k, v)
    }

    /// Parses configuration text on top of the defaults.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            cfg.apply_override(line).context(format!("line {}", no + 1))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(HexaError::from)
            .context(format!("reading config {}", path.display()))?;
        Self::parse_text(&text).context(format!("config {}", path.display()))
    }

    /// Every key with its current value, in a stable order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let norm = match self.adv.norm {
            PerturbNorm::LInf => "linf",
            PerturbNorm::L2 => "l2",
        };
        let negatives = match self.negatives {
            NegativeSource::Queue => "queue",
            NegativeSource::InBatch => "in_batch",
        };
        vec![
            ("pretext", self.pretext.to_string()),
            ("scheme", self.scheme.to_string()),
            ("alpha1", self.weights.alpha1.to_string()),
            ("alpha2", self.weights.alpha2.to_string()),
            ("epsilon", self.adv.epsilon.to_string()),
            ("eta", self.adv.eta.to_string()),
            ("pgd_steps", self.adv.steps.to_string()),
            ("pgd_norm", norm.to_string()),
            ("pgd_clamp", self.adv.clamp_to_pixels.to_string()),
            ("beta_alpha", self.cutmix.beta_alpha.to_string()),
            ("beta_beta", self.cutmix.beta_beta.to_string()),
            ("image_size", self.transform.output_size.to_string()),
            ("crop_scale_min", self.transform.scale.0.to_string()),
            ("crop_scale_max", self.transform.scale.1.to_string()),
            ("flip_p", self.transform.flip_p.to_string()),
            ("brightness", self.transform.brightness.to_string()),
            ("contrast", self.transform.contrast.to_string()),
            ("grayscale_p", self.transform.grayscale_p.to_string()),
            ("noise_sigma", self.transform.noise_sigma.to_string()),
            ("norm_mean", join(&self.transform.mean)),
            ("norm_std", join(&self.transform.std)),
            ("crops", format_crops(&self.crops)),
            ("tau", self.tau.to_string()),
            ("queue_capacity", self.queue_capacity.to_string()),
            ("negatives", negatives.to_string()),
            ("exclude_other_positive", self.exclude_other_positive.to_string()),
            ("k", self.kmeans.k.to_string()),
            ("kmeans_iters", self.kmeans.iters.to_string()),
            ("kmeans_restarts", self.kmeans.restarts.to_string()),
            ("beta", self.beta.to_string()),
            ("lr", self.sgd.lr.to_string()),
            ("sgd_momentum", self.sgd.momentum.to_string()),
            ("weight_decay", self.sgd.weight_decay.to_string()),
            ("widths", join(&self.encoder.widths)),
            ("head_hidden", self.encoder.head_hidden.to_string()),
            ("proj_dim", self.encoder.proj_dim.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("train_data", path(&self.train_data)),
            ("test_data", path(&self.test_data)),
            ("output_dir", self.output_dir.display().to_string()),
            ("probe_epochs", self.probe_epochs.to_string()),
            ("probe_lr", self.probe_lr.to_string()),
            ("probe_runs", self.probe_runs.to_string()),
            ("probe_every", self.probe_every.to_string()),
            ("low_shot_k", join(&self.low_shot_k)),
            ("finetune_fractions", join(&self.finetune_fractions)),
            ("finetune_epochs", self.finetune_epochs.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Range checks shared by every entry point.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(HexaError::config(msg));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return fail(format!("beta must lie in [0,1], got {}", self.beta));
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.sgd.lr <= 0.0 || !(0.0..1.0).contains(&self.sgd.momentum) || self.sgd.weight_decay < 0.0 {
            return fail("lr must be positive, sgd_momentum in [0,1) and weight_decay non-negative".into());
        }
        if self.queue_capacity == 0 || self.kmeans.k == 0 || self.kmeans.iters == 0 || self.kmeans.restarts == 0 {
            return fail("queue_capacity, k, kmeans_iters and kmeans_restarts must be positive".into());
        }
        if self.probe_runs == 0 || self.probe_lr <= 0.0 {
            return fail("probe_runs and probe_lr must be positive".into());
        }
        if self.low_shot_k.contains(&0) {
            return fail("low_shot_k entries must be at least 1".into());
        }
        if self.finetune_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return fail("finetune_fractions must lie in (0,1]".into());
        }
        if self.transform.mean.len() != self.transform.std.len() {
            return fail("norm_mean and norm_std need the same number of channels".into());
        }
        self.weights.validate()?;
        self.adv.validate()?;
        self.cutmix.validate()?;
        self.transform.validate()?;
        self.crops.validate()?;
        self.encoder.validate()
    }

    /// Encoder and normalization adjusted to `channels` input channels.
    fn for_channels(&self, channels: usize) -> (EncoderConfig, TransformConfig) {
        let mut enc = self.encoder.clone();
        enc.in_channels = channels;
        let mut t = self.transform.clone();
        let fit = |v: &[f32]| if v.len() == channels { v.to_vec() } else { vec![v[0]; channels] };
        t.mean = fit(&t.mean);
        t.std = fit(&t.std);
        (enc, t)
    }

    pub fn moco_config(&self, channels: usize) -> MocoConfig {
        let (encoder, transform) = self.for_channels(channels);
        MocoConfig {
            encoder,
            transform,
            adv: self.adv,
            cutmix: self.cutmix,
            weights: self.weights,
            scheme: self.scheme,
            tau: self.tau,
            queue_capacity: self.queue_capacity,
            beta: self.beta,
            negatives: self.negatives,
            exclude_other_positive: self.exclude_other_positive,
            sgd: self.sgd,
        }
    }

    pub fn dcluster_config(&self, channels: usize) -> DclusterConfig {
        let (encoder, transform) = self.for_channels(channels);
        DclusterConfig {
            encoder,
            transform,
            adv: self.adv,
            cutmix: self.cutmix,
            weights: self.weights,
            scheme: self.scheme,
            tau: self.tau,
            kmeans: self.kmeans,
            crops: self.crops.clone(),
            sgd: self.sgd,
        }
    }

    /// Probe settings; evaluation views are the full image, normalized.
    pub fn probe_config(&self, channels: usize) -> ProbeConfig {
        let (_, t) = self.for_channels(channels);
        ProbeConfig {
            epochs: self.probe_epochs,
            lr: self.probe_lr,
            runs: self.probe_runs,
            seed: self.seed,
            view: TransformConfig {
                mean: t.mean,
                std: t.std,
                ..TransformConfig::identity(self.transform.output_size)
            },
            ..ProbeConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.pretext = Pretext::Dcluster;
        cfg.scheme = Scheme::ADV_CMX;
        cfg.crops = CropSpec::six_crop();
        cfg.adv.norm = PerturbNorm::L2;
        cfg.train_data = Some("data/train.hxds".into());
        cfg.low_shot_k = vec![2, 8];
        cfg.epsilon_eta(3.0, 1.0);
        let back = RunConfig::parse_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_blank_lines_and_overrides() {
        let cfg = RunConfig::parse_text("# header\n\npretext = dcluster  # trailing\nscheme=std+adv\ncmx = true\n").unwrap();
        assert_eq!(cfg.pretext, Pretext::Dcluster);
        assert_eq!(cfg.scheme, Scheme::ADV_CMX);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for text in ["temprature = 0.2", "tau = abc", "tau = 0", "crops = 2by32", "pretext = simclr", "novalue"] {
            let err = RunConfig::parse_text(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
    }

    #[test]
    fn channel_adaptation() {
        let cfg = RunConfig::default();
        let m = cfg.moco_config(1);
        assert_eq!(m.encoder.in_channels, 1);
        assert_eq!(m.transform.mean, vec![0.5]);
        assert_eq!(cfg.probe_config(3).view.std.len(), 3);
    }

    impl RunConfig {
        fn epsilon_eta(&mut self, e: f32, n: f32) {
            self.adv.epsilon = e;
            self.adv.eta = n;
        }
    }
}
