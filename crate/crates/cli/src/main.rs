use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hexa_core::data::{generate_blobs, generate_shapes};
use hexa_core::experiment::{run_ablation_grid, run_eval, run_pretrain, GridRow};
use hexa_core::{Checkpoint, GridKind, PretrainOptions, Result, RunConfig};

/// Hard-example self-supervised pre-training at desk scale.
#[derive(Parser, Debug)]
#[command(name = "hexa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset in HXDS format.
    GenData(GenDataArgs),
    /// Pre-train an encoder, writing metrics and checkpoints.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from last.hxck in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Linear, low-shot and fine-tuning evaluation of a checkpoint.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and probe every cell of a comparison grid.
    Grid {
        #[command(flatten)]
        run: RunArgs,
        /// schemes, eps-eta or beta.
        #[arg(long, default_value = "schemes")]
        kind: String,
    },
    /// Print a checkpoint's header and tensor table.
    InspectCheckpoint { path: PathBuf },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DataKind {
    Shapes,
    Blobs,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, value_enum, default_value = "shapes")]
    kind: DataKind,
    #[arg(long, default_value_t = 5000)]
    count: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Blob classes.
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Blob channels.
    #[arg(long, default_value_t = 3)]
    channels: usize,
    /// Blob pixel noise.
    #[arg(long, default_value_t = 0.1)]
    noise: f32,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// key = value configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; beats the config file and HEXA_OUTPUT_DIR.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl RunArgs {
    /// Config file, then the environment, then command-line flags.
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(dir) = std::env::var_os("HEXA_OUTPUT_DIR") {
            cfg.output_dir = dir.into();
        }
        for kv in &self.overrides {
            cfg.apply_override(kv)?;
        }
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_grid_row(r: &GridRow) {
    let loss = r.metrics.last().map_or(f32::NAN, |m| m.loss_total);
    println!("{:<24} loss {:>8.4}  top1 {:.4}", r.label, loss, r.accuracy);
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let d = match a.kind {
                DataKind::Shapes => generate_shapes(a.count, a.size, a.seed),
                DataKind::Blobs => generate_blobs(a.count, a.classes, a.size, a.channels, a.noise, a.seed),
            };
            d.save(&a.out)?;
            println!("wrote {} images ({}x{}x{}) to {}", d.len(), d.height, d.width, d.channels, a.out.display());
        }
        Command::Pretrain { run, resume } => {
            let cfg = run.resolve()?;
            let out = run_pretrain(&cfg, PretrainOptions { resume, stop_after: None })?;
            for m in &out.metrics {
                println!("epoch {:>3}  loss {:.4}  {:.1}s", m.epoch, m.loss_total, m.wall_time_s);
            }
            if let Some(b) = out.best_probe {
                println!("best probe top1 {b:.4}");
            }
            println!("outputs in {}", out.output_dir.display());
        }
        Command::Eval { run, checkpoint } => {
            let cfg = run.resolve()?;
            let s = run_eval(&cfg, &checkpoint)?;
            println!("linear      top1 {:.4}", s.linear.mean);
            for (k, r) in &s.low_shot {
                println!("low-shot {k:>3} top1 {:.4} ± {:.4}", r.mean, r.std);
            }
            for (f, r) in &s.finetune {
                println!("finetune {f:<5} top1 {:.4}", r.mean);
            }
        }
        Command::Grid { run, kind } => {
            let cfg = run.resolve()?;
            let kind: GridKind = kind.parse()?;
            let rows = run_ablation_grid(kind, &cfg, print_grid_row)?;
            if let Some(best) = rows.iter().max_by(|a, b| a.accuracy.total_cmp(&b.accuracy)) {
                println!("best cell: {}", best.label);
            }
        }
        Command::InspectCheckpoint { path } => {
            let c = Checkpoint::load(&path)?;
            println!("next epoch {}  global step {}", c.epoch, c.global_step);
            println!("{}", c.config.trim_end());
            for (name, t) in &c.tensors {
                println!("{name:<32} {:?}", t.shape());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
