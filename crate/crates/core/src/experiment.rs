//! Run orchestration: pre-training sessions with checkpoints and metrics,
//! evaluation of saved encoders, and the comparison grids.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::checkpoint::{indices_to_tensor, tensor_to_indices, Checkpoint};
use crate::config::{Pretext, RunConfig};
use crate::data::Dataset;
use crate::dcluster::{dcluster_epoch, CropSpec, DclusterState, PrototypeBank};
use crate::error::{HexaError, Result, ResultExt};
use crate::eval::{finetune, linear_probe, low_shot_probe, sample_fraction, EvalReport, LabeledSet, ProbeConfig};
use crate::metrics::{append_rows, write_table, MetricsLog, EVAL_HEADER};
use crate::moco::{moco_epoch, MocoState, NegativeQueue};
use crate::nn::EncoderParams;
use crate::rng::RngStreams;
use crate::scheme::Scheme;
use crate::tensor::Tensor;
use crate::train::{steps_per_epoch, EpochMetrics, LrSchedule};

/// Either pretext task's training state.
#[derive(Clone, Debug)]
pub enum Trainer {
    Moco(MocoState),
    Dcluster(DclusterState),
}

fn encoder_tensors(prefix: &str, enc: &EncoderParams, out: &mut Vec<(String, Tensor)>) {
    for (name, t) in enc.parameters() {
        out.push((format!("{prefix}.{name}"), t.clone()));
    }
    for (name, b) in enc.buffers() {
        out.push((format!("{prefix}.{name}"), Tensor::from_vec(b.clone())));
    }
}

fn restore_encoder(prefix: &str, enc: &mut EncoderParams, ckpt: &Checkpoint) -> Result<()> {
    let names: Vec<String> = enc.parameters().into_iter().map(|(n, _)| n).collect();
    for (name, p) in names.iter().zip(enc.parameters_mut()) {
        let stored = ckpt.get(&format!("{prefix}.{name}"))?;
        if stored.shape() != p.shape() {
            return Err(HexaError::Architecture(format!(
                "{prefix}.{name}: checkpoint shape {:?}, model shape {:?}",
                stored.shape(),
                p.shape()
            )));
        }
        *p = stored.clone();
    }
    let names: Vec<String> = enc.buffers().into_iter().map(|(n, _)| n).collect();
    for (name, b) in names.iter().zip(enc.buffers_mut()) {
        let stored = ckpt.get(&format!("{prefix}.{name}"))?;
        if stored.numel() != b.len() {
            return Err(HexaError::Architecture(format!("{prefix}.{name}: statistic length mismatch")));
        }
        b.copy_from_slice(stored.data());
    }
    Ok(())
}

fn velocity_tensors(v: &[Vec<f32>], out: &mut Vec<(String, Tensor)>) {
    for (i, buf) in v.iter().enumerate() {
        out.push((format!("optim.velocity.{i}"), Tensor::from_vec(buf.clone())));
    }
}

fn restore_velocity(ckpt: &Checkpoint) -> Vec<Vec<f32>> {
    (0..)
        .map_while(|i| ckpt.get(&format!("optim.velocity.{i}")).ok().map(|t| t.data().to_vec()))
        .collect()
}

impl Trainer {
    pub fn new(cfg: &RunConfig, channels: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.pretext {
            Pretext::Moco => Trainer::Moco(MocoState::new(cfg.moco_config(channels), cfg.seed)?),
            Pretext::Dcluster => Trainer::Dcluster(DclusterState::new(cfg.dcluster_config(channels), cfg.seed)?),
        })
    }

    /// The encoder that gets evaluated: the query encoder for contrastive runs.
    pub fn encoder(&self) -> &EncoderParams {
        match self {
            Trainer::Moco(s) => &s.query,
            Trainer::Dcluster(s) => &s.encoder,
        }
    }

    pub fn scheme(&self) -> Scheme {
        match self {
            Trainer::Moco(s) => s.config.scheme,
            Trainer::Dcluster(s) => s.config.scheme,
        }
    }

    pub fn epoch(
        &mut self,
        images: &Tensor,
        epoch: usize,
        batch_size: usize,
        schedule: &LrSchedule,
        global_step: &mut usize,
    ) -> Result<EpochMetrics> {
        match self {
            Trainer::Moco(s) => moco_epoch(s, images, epoch, batch_size, schedule, global_step),
            Trainer::Dcluster(s) => {
                if s.bank.is_none() {
                    s.initialize_bank(images)?;
                }
                dcluster_epoch(s, images, epoch, batch_size, schedule, global_step)
            }
        }
    }

    /// Every tensor needed to continue training bit-for-bit.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        match self {
            Trainer::Moco(s) => {
                encoder_tensors("query", &s.query, &mut out);
                encoder_tensors("key", &s.key, &mut out);
                out.push(("queue".into(), s.queue.snapshot()));
                velocity_tensors(&s.optimizer.velocity, &mut out);
            }
            Trainer::Dcluster(s) => {
                encoder_tensors("encoder", &s.encoder, &mut out);
                if let Some(bank) = &s.bank {
                    out.push(("bank.centroids".into(), bank.centroids.clone()));
                    out.push(("bank.assignments".into(), indices_to_tensor(&bank.assignments)));
                }
                velocity_tensors(&s.optimizer.velocity, &mut out);
            }
        }
        out
    }

    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        match self {
            Trainer::Moco(s) => {
                restore_encoder("query", &mut s.query, ckpt)?;
                restore_encoder("key", &mut s.key, ckpt)?;
                s.queue = NegativeQueue::from_rows(s.config.queue_capacity, ckpt.get("queue")?)?;
                s.optimizer.velocity = restore_velocity(ckpt);
            }
            Trainer::Dcluster(s) => {
                restore_encoder("encoder", &mut s.encoder, ckpt)?;
                s.bank = if ckpt.has("bank.centroids") {
                    Some(PrototypeBank {
                        centroids: ckpt.get("bank.centroids")?.clone(),
                        assignments: tensor_to_indices(ckpt.get("bank.assignments")?)?,
                    })
                } else {
                    None
                };
                s.optimizer.velocity = restore_velocity(ckpt);
            }
        }
        Ok(())
    }
}

/// A pre-training run in progress.
#[derive(Clone, Debug)]
pub struct Session {
    pub config: RunConfig,
    pub trainer: Trainer,
    /// The epoch that runs next.
    pub next_epoch: usize,
    pub global_step: usize,
    pub schedule: LrSchedule,
}

impl Session {
    pub fn new(config: RunConfig, train: &Dataset) -> Result<Self> {
        if train.len() < 2 {
            return Err(HexaError::contract(format!("pre-training needs at least 2 images, got {}", train.len())));
        }
        let trainer = Trainer::new(&config, train.channels)?;
        let schedule = LrSchedule {
            base: config.sgd.lr,
            total_steps: config.epochs * steps_per_epoch(train.len(), config.batch_size),
        };
        Ok(Session {
            config,
            trainer,
            next_epoch: 0,
            global_step: 0,
            schedule,
        })
    }

    /// Rebuilds a session from a checkpoint written by the same configuration.
    pub fn resume(config: RunConfig, train: &Dataset, ckpt: &Checkpoint) -> Result<Self> {
        let stored = RunConfig::parse_text(&ckpt.config).context("checkpoint configuration")?;
        if !same_training_setup(&stored, &config) {
            return Err(HexaError::config("checkpoint was written by a different configuration"));
        }
        let mut s = Session::new(config, train)?;
        s.trainer.restore(ckpt)?;
        s.next_epoch = ckpt.epoch;
        s.global_step = ckpt.global_step;
        Ok(s)
    }

    pub fn finished(&self) -> bool {
        self.next_epoch >= self.config.epochs
    }

    pub fn run_epoch(&mut self, images: &Tensor) -> Result<EpochMetrics> {
        let epoch = self.next_epoch;
        let m = self
            .trainer
            .epoch(images, epoch, self.config.batch_size, &self.schedule, &mut self.global_step)
            .context(format!("{} {} epoch {epoch}", self.config.pretext, self.config.scheme))?;
        self.next_epoch += 1;
        Ok(m)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            epoch: self.next_epoch,
            global_step: self.global_step,
            config: self.config.to_text(),
            tensors: self.trainer.state_tensors(),
        }
    }
}

/// Configurations agree on everything except where files live.
fn same_training_setup(a: &RunConfig, b: &RunConfig) -> bool {
    let strip = |c: &RunConfig| {
        let mut c = c.clone();
        c.train_data = None;
        c.test_data = None;
        c.output_dir = PathBuf::new();
        c
    };
    strip(a) == strip(b)
}

/// Trains to completion in memory and returns the per-epoch metrics.
pub fn pretrain_in_memory(config: RunConfig, train: &Dataset) -> Result<(Session, Vec<EpochMetrics>)> {
    let images = train.images();
    let mut s = Session::new(config, train)?;
    let mut metrics = Vec::new();
    while !s.finished() {
        metrics.push(s.run_epoch(&images)?);
    }
    Ok((s, metrics))
}

pub fn load_split(path: &Option<PathBuf>, what: &str) -> Result<Dataset> {
    let p = path
        .as_ref()
        .ok_or_else(|| HexaError::config(format!("{what} is not set")))?;
    Dataset::load(p)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct PretrainOptions {
    /// Continue from `last.hxck` in the output directory.
    pub resume: bool,
    /// Stop after this many epochs have completed in total.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub output_dir: PathBuf,
    pub best_probe: Option<f64>,
    pub completed_epochs: usize,
}

pub const LAST_CHECKPOINT: &str = "last.hxck";
pub const BEST_CHECKPOINT: &str = "best.hxck";

/// Pre-trains from the configured dataset, writing `config.txt`,
/// `metrics.csv`, `last.hxck` every epoch and, with `probe_every > 0`,
/// `best.hxck` plus probe rows in `eval.csv`.
pub fn run_pretrain(config: &RunConfig, opts: PretrainOptions) -> Result<PretrainOutcome> {
    let train = load_split(&config.train_data, "train_data")?;
    let test = if config.probe_every > 0 {
        Some(load_split(&config.test_data, "test_data")?.to_labeled())
    } else {
        None
    };
    let dir = config.output_dir.clone();
    std::fs::create_dir_all(&dir)
        .map_err(HexaError::from)
        .context(format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("config.txt"), config.to_text())?;
    let last = dir.join(LAST_CHECKPOINT);
    let metrics_path = dir.join("metrics.csv");
    let (mut session, log) = if opts.resume && last.exists() {
        let ckpt = Checkpoint::load(&last)?;
        let s = Session::resume(config.clone(), &train, &ckpt)?;
        let log = MetricsLog::resume(&metrics_path, s.next_epoch)?;
        (s, log)
    } else {
        (Session::new(config.clone(), &train)?, MetricsLog::create(&metrics_path)?)
    };
    let images = train.images();
    let labeled = test.as_ref().map(|_| train.to_labeled());
    let probe_cfg = config.probe_config(train.channels);
    let mut best = None;
    let mut metrics = Vec::new();
    while !session.finished() && opts.stop_after.is_none_or(|n| session.next_epoch < n) {
        let m = session.run_epoch(&images)?;
        log.append(&m)?;
        session.checkpoint().save(&last)?;
        if let (Some(test), Some(train)) = (&test, &labeled) {
            if (m.epoch + 1) % config.probe_every == 0 {
                let acc = linear_probe(session.trainer.encoder(), train, test, &probe_cfg)?.top1();
                append_rows(
                    &dir.join("eval.csv"),
                    &EVAL_HEADER,
                    &[vec![m.epoch.to_string(), "probe".into(), String::new(), acc.to_string(), "0".into(), "1".into()]],
                )?;
                if best.is_none_or(|b| acc > b) {
                    best = Some(acc);
                    session.checkpoint().save(&dir.join(BEST_CHECKPOINT))?;
                }
            }
        }
        metrics.push(m);
    }
    Ok(PretrainOutcome {
        metrics,
        output_dir: dir,
        best_probe: best,
        completed_epochs: session.next_epoch,
    })
}

/// Rebuilds the evaluated encoder stored in a checkpoint.
pub fn encoder_from_checkpoint(ckpt: &Checkpoint, channels: usize) -> Result<(RunConfig, EncoderParams)> {
    let cfg = RunConfig::parse_text(&ckpt.config).context("checkpoint configuration")?;
    let mut trainer = Trainer::new(&cfg, channels)?;
    trainer.restore(ckpt)?;
    Ok((cfg, trainer.encoder().clone()))
}

#[derive(Clone, Debug)]
pub struct EvalSummary {
    pub linear: EvalReport,
    pub low_shot: Vec<(usize, EvalReport)>,
    pub finetune: Vec<(f64, EvalReport)>,
}

/// Linear, low-shot and fine-tuning evaluation of an encoder.
pub fn evaluate_encoder(
    encoder: &EncoderParams,
    train: &LabeledSet,
    test: &LabeledSet,
    config: &RunConfig,
    channels: usize,
) -> Result<EvalSummary> {
    let probe = config.probe_config(channels);
    let linear = linear_probe(encoder, train, test, &probe).context("linear probe")?;
    let mut low_shot = Vec::new();
    for &k in &config.low_shot_k {
        low_shot.push((k, low_shot_probe(encoder, train, test, k, &probe).context(format!("low-shot k={k}"))?));
    }
    let tune = ProbeConfig {
        epochs: config.finetune_epochs,
        ..probe.clone()
    };
    let streams = RngStreams::new(config.seed);
    let mut tuned = Vec::new();
    for &f in &config.finetune_fractions {
        let idx = sample_fraction(train, f, &streams, 0)?;
        let (report, _) = finetune(encoder, &train.subset(&idx), test, &tune).context(format!("fine-tune {f}"))?;
        tuned.push((f, report));
    }
    Ok(EvalSummary {
        linear,
        low_shot,
        finetune: tuned,
    })
}

/// Evaluates a checkpoint and appends the results to `eval.csv` in the
/// output directory.
pub fn run_eval(config: &RunConfig, checkpoint: &Path) -> Result<EvalSummary> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let train = load_split(&config.train_data, "train_data")?;
    let test = load_split(&config.test_data, "test_data")?;
    let (_, encoder) = encoder_from_checkpoint(&ckpt, train.channels)?;
    let summary = evaluate_encoder(&encoder, &train.to_labeled(), &test.to_labeled(), config, train.channels)?;
    let epoch = ckpt.epoch.to_string();
    let row = |kind: &str, param: String, r: &EvalReport| {
        vec![
            epoch.clone(),
            kind.to_string(),
            param,
            r.mean.to_string(),
            r.std.to_string(),
            r.per_run.len().to_string(),
        ]
    };
    let mut rows = vec![row("linear", String::new(), &summary.linear)];
    rows.extend(summary.low_shot.iter().map(|(k, r)| row("low_shot", k.to_string(), r)));
    rows.extend(summary.finetune.iter().map(|(f, r)| row("finetune", f.to_string(), r)));
    std::fs::create_dir_all(&config.output_dir)?;
    append_rows(&config.output_dir.join("eval.csv"), &EVAL_HEADER, &rows)?;
    Ok(summary)
}

/// Which comparison a grid run performs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridKind {
    /// The six hard-example schemes.
    Schemes,
    /// Perturbation radius and step size over `{1, 3}²`, prototype pretext.
    EpsEta,
    /// CutMix Beta parameters, prototype pretext with six crops.
    Beta,
}

impl fmt::Display for GridKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GridKind::Schemes => "schemes",
            GridKind::EpsEta => "eps-eta",
            GridKind::Beta => "beta",
        })
    }
}

impl FromStr for GridKind {
    type Err = HexaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "schemes" => Ok(GridKind::Schemes),
            "eps-eta" => Ok(GridKind::EpsEta),
            "beta" => Ok(GridKind::Beta),
            _ => Err(HexaError::config(format!("unknown grid {s:?} (schemes, eps-eta, beta)"))),
        }
    }
}

pub const EPS_ETA_CELLS: [(f32, f32); 4] = [(1.0, 1.0), (1.0, 3.0), (3.0, 1.0), (3.0, 3.0)];
pub const BETA_CELLS: [(f32, f32); 4] = [(0.5, 0.5), (1.0, 1.0), (2.0, 2.0), (5.0, 3.0)];

#[derive(Clone, Debug)]
pub struct GridCell {
    pub label: String,
    pub config: RunConfig,
}

/// The configurations a grid trains, derived from `base`.
pub fn grid_cells(kind: GridKind, base: &RunConfig) -> Vec<GridCell> {
    match kind {
        GridKind::Schemes => Scheme::ABLATION
            .iter()
            .map(|&scheme| GridCell {
                label: scheme.to_string(),
                config: RunConfig { scheme, ..base.clone() },
            })
            .collect(),
        GridKind::EpsEta => EPS_ETA_CELLS
            .iter()
            .map(|&(epsilon, eta)| {
                let mut c = base.clone();
                c.pretext = Pretext::Dcluster;
                c.scheme = Scheme::ADV;
                c.adv.epsilon = epsilon;
                c.adv.eta = eta;
                GridCell {
                    label: format!("eps={epsilon},eta={eta}"),
                    config: c,
                }
            })
            .collect(),
        GridKind::Beta => BETA_CELLS
            .iter()
            .map(|&(a, b)| {
                let mut c = base.clone();
                c.pretext = Pretext::Dcluster;
                c.scheme = Scheme::CMX;
                c.crops = CropSpec::six_crop();
                c.cutmix.beta_alpha = a;
                c.cutmix.beta_beta = b;
                GridCell {
                    label: format!("beta=({a},{b})"),
                    config: c,
                }
            })
            .collect(),
    }
}

#[derive(Clone, Debug)]
pub struct GridRow {
    pub label: String,
    pub config: RunConfig,
    /// Linear-probe top-1 on the test split.
    pub accuracy: f64,
    pub metrics: Vec<EpochMetrics>,
}

pub const GRID_HEADER: [&str; 9] = [
    "cell", "pretext", "scheme", "epsilon", "eta", "beta_alpha", "beta_beta", "final_loss_total", "accuracy",
];

impl GridRow {
    pub fn record(&self) -> Vec<String> {
        let c = &self.config;
        vec![
            self.label.clone(),
            c.pretext.to_string(),
            c.scheme.to_string(),
            c.adv.epsilon.to_string(),
            c.adv.eta.to_string(),
            c.cutmix.beta_alpha.to_string(),
            c.cutmix.beta_beta.to_string(),
            self.metrics.last().map(|m| m.loss_total.to_string()).unwrap_or_default(),
            format!("{:.4}", self.accuracy),
        ]
    }
}

/// Pre-trains every cell in memory with the shared seed and probes it.
pub fn run_grid_on(
    kind: GridKind,
    base: &RunConfig,
    train: &Dataset,
    test: &Dataset,
    mut progress: impl FnMut(&GridRow),
) -> Result<Vec<GridRow>> {
    let train_l = train.to_labeled();
    let test_l = test.to_labeled();
    let mut rows = Vec::new();
    for cell in grid_cells(kind, base) {
        let (session, metrics) = pretrain_in_memory(cell.config.clone(), train).context(format!("grid cell {}", cell.label))?;
        let probe = cell.config.probe_config(train.channels);
        let accuracy = linear_probe(session.trainer.encoder(), &train_l, &test_l, &probe)?.top1();
        let row = GridRow {
            label: cell.label,
            config: cell.config,
            accuracy,
            metrics,
        };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Runs a grid from the configured datasets and writes `grid-<kind>.csv`.
pub fn run_ablation_grid(kind: GridKind, config: &RunConfig, progress: impl FnMut(&GridRow)) -> Result<Vec<GridRow>> {
    let train = load_split(&config.train_data, "train_data")?;
    let test = load_split(&config.test_data, "test_data")?;
    let rows = run_grid_on(kind, config, &train, &test, progress)?;
    std::fs::create_dir_all(&config.output_dir)?;
    let table: Vec<Vec<String>> = rows.iter().map(GridRow::record).collect();
    write_table(&config.output_dir.join(format!("grid-{kind}.csv")), &GRID_HEADER, &table)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_blobs;

    fn tiny(pretext: Pretext, scheme: Scheme) -> RunConfig {
        let mut c = RunConfig::default();
        for kv in [
            "widths=4,8",
            "head_hidden=8",
            "proj_dim=6",
            "image_size=8",
            "crops=2x8",
            "queue_capacity=16",
            "k=3",
            "kmeans_iters=3",
            "kmeans_restarts=1",
            "epochs=3",
            "batch_size=6",
            "probe_epochs=2",
            "probe_runs=1",
        ] {
            c.apply_override(kv).unwrap();
        }
        c.pretext = pretext;
        c.scheme = scheme;
        c
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = generate_blobs(20, 3, 8, 3, 0.1, 0);
        let images = data.images();
        for pretext in [Pretext::Moco, Pretext::Dcluster] {
            let cfg = tiny(pretext, Scheme::ADV_CMX);
            let (full, full_metrics) = pretrain_in_memory(cfg.clone(), &data).unwrap();

            let mut first = Session::new(cfg.clone(), &data).unwrap();
            let m0 = first.run_epoch(&images).unwrap();
            let mut buf = Vec::new();
            first.checkpoint().write_to(&mut buf).unwrap();
            let ckpt = Checkpoint::read_from(buf.as_slice()).unwrap();
            let mut resumed = Session::resume(cfg, &data, &ckpt).unwrap();
            let mut tail = vec![m0];
            while !resumed.finished() {
                tail.push(resumed.run_epoch(&images).unwrap());
            }
            let strip = |m: &[EpochMetrics]| m.iter().map(|m| (m.loss_total, m.loss_std, m.kmeans_objective)).collect::<Vec<_>>();
            assert_eq!(strip(&full_metrics), strip(&tail), "{pretext}");
            assert_eq!(full.trainer.encoder().fingerprint(), resumed.trainer.encoder().fingerprint());
        }
    }

    #[test]
    fn resume_rejects_other_configuration() {
        let data = generate_blobs(12, 3, 8, 3, 0.1, 0);
        let cfg = tiny(Pretext::Moco, Scheme::STD);
        let ckpt = Session::new(cfg.clone(), &data).unwrap().checkpoint();
        let other = RunConfig { seed: 9, ..cfg };
        assert_eq!(Session::resume(other, &data, &ckpt).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn grids_have_expected_cells() {
        let base = RunConfig::default();
        assert_eq!(grid_cells(GridKind::Schemes, &base).len(), 6);
        let e = grid_cells(GridKind::EpsEta, &base);
        assert_eq!(e.len(), 4);
        assert!(e.iter().all(|c| c.config.pretext == Pretext::Dcluster));
        assert_eq!(grid_cells(GridKind::Beta, &base)[3].config.crops.total(), 6);
    }
}
