//! `gmmlab`: Gaussian mixture mask tools.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 a check
//! failed. Every diagnostic goes to stderr; every output file is written
//! atomically.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "gmmlab", version, about = "Gaussian mixture attention masks: generate, render, check, fit, train")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PgmModeArg {
    P2,
    P5,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MaskArg {
    Gmm,
    Elm,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetArg {
    Synth,
    Cifar10,
}

#[derive(Subcommand)]
enum Command {
    /// Write an unfolded N×N mixture mask (or its weight matrix) as CSV.
    #[command(group(ArgGroup::new("source").required(true).args(["kernels", "random"])))]
    MaskGen {
        /// Grid side g; the mask is g²×g².
        #[arg(long)]
        grid: usize,
        /// Kernels as "alpha:sigma[,alpha:sigma...]"; an empty list gives an all-zero mask.
        #[arg(long, allow_hyphen_values = true)]
        kernels: Option<String>,
        /// Draw this many kernels from the default initialization instead.
        #[arg(long)]
        random: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = gmmlab_core::mask::DEFAULT_EPSILON)]
        eps: f64,
        #[arg(long)]
        out: PathBuf,
        /// Write the (2g−1)×(2g−1) offset table instead of the unfolded mask.
        #[arg(long)]
        weight_matrix: bool,
    },
    /// Render a CSV matrix as a min–max normalized grayscale PGM.
    Render {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = PgmModeArg::P5)]
        mode: PgmModeArg,
    },
    /// Compare analytic gradients with central finite differences at toy size.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Grid side; N = grid² must be at most 16.
        #[arg(long, default_value_t = 2)]
        grid: usize,
        /// Embedding dim, at most 16.
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        /// Kernels per mixture mask.
        #[arg(long, default_value_t = 2)]
        kernels: usize,
        #[arg(long, value_enum, default_value_t = MaskArg::Gmm)]
        mask: MaskArg,
        /// Check a whole two-block model under cross-entropy instead of one attention layer.
        #[arg(long)]
        full_model: bool,
        /// Scale analytic gradients by 1 + this factor (negative control).
        #[arg(long, hide = true, default_value_t = 0.0)]
        corrupt_grad: f64,
    },
    /// Fit K Gaussian kernels to a target mask CSV.
    Fit {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        kernels: usize,
        #[arg(long, default_value_t = 5000)]
        steps: usize,
        #[arg(long, default_value_t = 1.0)]
        lr: f64,
        #[arg(long, default_value_t = 3)]
        restarts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = gmmlab_core::mask::DEFAULT_EPSILON)]
        eps: f64,
        /// Fitted kernels, one "alpha,sigma" line each.
        #[arg(long)]
        out: PathBuf,
        /// Loss trace CSV (step,loss).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Train a tiny ViT; writes metrics.jsonl, checkpoint.bin and params.json.
    ///
    /// mask=none keeps plain attention. A mixture mask with kernels=0 is an
    /// all-zero multiplicative mask, which makes attention uniform; it is not
    /// the same as no mask.
    Train(TrainArgs),
    /// Train once per (K, seed) and write final test accuracies as CSV.
    ///
    /// K=0 emits two rows per seed: the unmasked baseline ("none") and the
    /// all-zero mixture mask ("gmm", k=0), which are different models.
    SweepKernels(SweepArgs),
}

/// Settings shared by `train` and `sweep-kernels`.
#[derive(clap::Args, Clone)]
pub struct RunArgs {
    /// Flat "key = value" config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    dataset: Option<DatasetArg>,
    /// Dataset root (default: $GMMLAB_DATA_DIR). CIFAR-10 batches may sit
    /// directly in it or in a cifar-10-batches-bin subdirectory.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra config overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(clap::Args)]
pub struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_enum)]
    mask: Option<MaskArg>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Continue from a checkpoint written by an earlier run; its embedded
    /// config is used as is.
    #[arg(long, conflicts_with_all = ["config", "dataset", "epochs", "seed", "set", "mask"])]
    resume: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Kernel counts, e.g. "1,2,3"; duplicates are dropped.
    #[arg(long)]
    k_list: String,
    /// Seeds per K, counting up from the configured seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::MaskGen {
            grid,
            kernels,
            random,
            seed,
            eps,
            out,
            weight_matrix,
        } => commands::mask_gen(grid, kernels.as_deref(), random, seed, eps, &out, weight_matrix),
        Command::Render { input, out, mode } => commands::render(&input, &out, mode),
        Command::Gradcheck {
            seed,
            grid,
            dim,
            heads,
            kernels,
            mask,
            full_model,
            corrupt_grad,
        } => commands::gradcheck(&commands::GradcheckArgs {
            seed,
            grid,
            dim,
            heads,
            kernels,
            mask,
            full_model,
            corrupt: corrupt_grad,
        }),
        Command::Fit {
            target,
            kernels,
            steps,
            lr,
            restarts,
            seed,
            eps,
            out,
            trace,
        } => commands::fit(&commands::FitArgs {
            target,
            kernels,
            steps,
            lr,
            restarts,
            seed,
            eps,
            out,
            trace,
        }),
        Command::Train(args) => commands::train(&args),
        Command::SweepKernels(args) => commands::sweep_kernels(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("gmmlab: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
