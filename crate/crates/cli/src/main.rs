//! `flowsr`: data generation, pretraining, fine-tuning, evaluation,
//! inference and gradient self-checks.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flowsr_core::Error;

#[derive(Parser, Debug)]
#[command(name = "flowsr", version, about = "Fine-grained urban flow inference")]
struct Cli {
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value = "32")]
    precision: PrecisionArg,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PrecisionArg {
    #[value(name = "32")]
    F32,
    #[value(name = "64")]
    F64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    B,
    C,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Directory holding coarse.uflw and fine.uflw; defaults to --out.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes a synthetic coarse/fine grid pair.
    GenData,
    /// Contrastive pretraining of one encoder.
    Pretrain {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Supervised training; keeps the best validation model.
    Train {
        #[arg(long, num_args = 2, value_names = ["CKPT_B", "CKPT_C"], conflicts_with = "end_to_end")]
        from_pretrained: Option<Vec<PathBuf>>,
        #[arg(long)]
        end_to_end: bool,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Test-split metrics of a model next to the MEAN and HA baselines.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Fine maps for every frame of a coarse grid file.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to <out>/inferred.uflw.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Finite-difference gradient suite and degeneracy checks.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

/// 2 for rejected inputs (arguments, config, file formats, checkpoints),
/// 1 for anything that fails while running.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::Format { .. } | Error::Checkpoint { .. } | Error::Csv(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(commands::Outcome::Success) => ExitCode::SUCCESS,
        Ok(commands::Outcome::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
