mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use stackpool::data::SplitName;
use stackpool::networks::Architecture;
use stackpool::tensor::DType;
use stackpool::PoolSpec;

use crate::config::RunConfig;

/// Stacked and multi-kernel pooling experiments.
#[derive(Parser, Debug)]
#[command(name = "stackpool", version)]
struct Cli {
    /// Root seed; every random stream is derived from it by name.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: runs/<command>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// TOML config file or a previous run's manifest.toml.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic crowd dataset.
    GenData(GenDataArgs),
    /// Train a network and keep the best-validation checkpoint.
    Train(TrainArgs),
    /// Count people with a checkpoint and report MAE/MSE.
    Eval(EvalArgs),
    /// Check stacked/multi-kernel equivalence and network gradients.
    Verify(VerifyArgs),
    /// Time pooling layers and networks under each pooling variant.
    Bench(BenchArgs),
    /// Variation ratio of two checkpoints under input rescaling.
    Invariance(InvarianceArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    scenes: Option<usize>,
    /// Scenes held out for testing.
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    count_min: Option<usize>,
    #[arg(long)]
    count_max: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    net: Option<Architecture>,
    /// e.g. vanilla:2:s2, stacked:2,2,3:s2, multi:2,4,8:s2
    #[arg(long)]
    pool: Option<PoolSpec>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    validate_every: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Half-size patches per training image (0: whole images).
    #[arg(long)]
    patches: Option<usize>,
    /// Fail unless the final training loss is below the first epoch's.
    #[arg(long)]
    check: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    split: Option<SplitName>,
    /// Density groups for the per-group MAE breakdown.
    #[arg(long)]
    buckets: Option<usize>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Multi-kernel (or stacked) spec to verify; repeatable.
    #[arg(long = "pool")]
    pools: Vec<PoolSpec>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    max_extent: Option<usize>,
    /// Also finite-difference check end-to-end network gradients.
    #[arg(long)]
    grad_check: bool,
    #[arg(long)]
    grad_net: Option<Architecture>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    warmups: Option<usize>,
    #[arg(long)]
    layer_extent: Option<usize>,
    #[arg(long)]
    net: Option<Architecture>,
    #[arg(long)]
    net_extent: Option<usize>,
    #[arg(long)]
    dtype: Option<DType>,
    /// Prior bench.json to compare orderings against.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Fail unless every cost ordering holds.
    #[arg(long)]
    check: bool,
}

#[derive(Args, Debug)]
struct InvarianceArgs {
    /// Checkpoint for the first (vanilla) slot.
    #[arg(long)]
    vanilla: Option<PathBuf>,
    /// Checkpoint for the second (stacked) slot.
    #[arg(long)]
    stacked: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    split: Option<SplitName>,
    #[arg(long)]
    beta: Option<f64>,
    /// γ above this is left out of the means.
    #[arg(long)]
    threshold: Option<f64>,
    /// Fail unless the stacked slot has the lower mean γ at every layer.
    #[arg(long)]
    check: bool,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => config::load(path)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, cli.seed);
    if cli.out.is_some() {
        cfg.out = cli.out.clone();
    }
    match &cli.command {
        Command::GenData(a) => {
            let d = &mut cfg.data;
            set(&mut d.scenes, a.scenes);
            set(&mut d.test, a.test);
            set(&mut d.scene.height, a.height);
            set(&mut d.scene.width, a.width);
            set(&mut d.scene.count_min, a.count_min);
            set(&mut d.scene.count_max, a.count_max);
        }
        Command::Train(a) => {
            let t = &mut cfg.train;
            if a.dataset.is_some() {
                t.dataset = a.dataset.clone();
            }
            set(&mut t.net, a.net);
            set(&mut t.pool, a.pool.clone());
            set(&mut t.epochs, a.epochs);
            set(&mut t.batch_size, a.batch_size);
            set(&mut t.validate_every, a.validate_every);
            set(&mut t.adam.lr, a.lr);
            set(&mut t.patches, a.patches);
        }
        Command::Eval(a) => {
            let e = &mut cfg.eval;
            if a.checkpoint.is_some() {
                e.checkpoint = a.checkpoint.clone();
            }
            if a.dataset.is_some() {
                e.dataset = a.dataset.clone();
            }
            set(&mut e.split, a.split);
            set(&mut e.buckets, a.buckets);
        }
        Command::Verify(a) => {
            let v = &mut cfg.verify;
            if !a.pools.is_empty() {
                v.pools = a.pools.clone();
            }
            set(&mut v.trials, a.trials);
            set(&mut v.max_extent, a.max_extent);
            v.grad_check |= a.grad_check;
            set(&mut v.grad_net, a.grad_net);
        }
        Command::Bench(a) => {
            let b = &mut cfg.bench;
            set(&mut b.reps, a.reps);
            set(&mut b.warmups, a.warmups);
            set(&mut b.layer_extent, a.layer_extent);
            set(&mut b.net, a.net);
            set(&mut b.net_extent, a.net_extent);
            set(&mut b.dtype, a.dtype);
            if a.baseline.is_some() {
                b.baseline = a.baseline.clone();
            }
        }
        Command::Invariance(a) => {
            let i = &mut cfg.invariance;
            if a.vanilla.is_some() {
                i.vanilla = a.vanilla.clone();
            }
            if a.stacked.is_some() {
                i.stacked = a.stacked.clone();
            }
            if a.dataset.is_some() {
                i.dataset = a.dataset.clone();
            }
            set(&mut i.split, a.split);
            set(&mut i.beta, a.beta);
            set(&mut i.threshold, a.threshold);
        }
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<bool> {
    let cfg = resolve(&cli)?;
    match &cli.command {
        Command::GenData(_) => commands::gen_data(cfg, cli.force),
        Command::Train(a) => commands::train(cfg, cli.force, a.check),
        Command::Eval(_) => commands::eval(cfg, cli.force),
        Command::Verify(_) => commands::verify(cfg, cli.force),
        Command::Bench(a) => commands::bench(cfg, cli.force, a.check),
        Command::Invariance(a) => commands::invariance(cfg, cli.force, a.check),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: one or more checks failed");
            ExitCode::FAILURE
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
