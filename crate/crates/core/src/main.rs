use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dfgan::commands::{self, EvaluateOptions, InferOptions};
use dfgan::data::Split;

#[derive(Parser)]
#[command(name = "dfgan", version, about = "Attenuation to dark-field translation with uncertainty")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Write a deterministic phantom dataset.
    GeneratePhantoms {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the progressive generator.
    Train {
        /// Run configuration (TOML); defaults to the full protocol.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train only this stage.
        #[arg(long)]
        stage: Option<usize>,
        /// Checkpoint providing the earlier (frozen) stages.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Monte Carlo dropout inference with uncertainty maps.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        passes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        stage: Option<usize>,
        /// Resample inputs to HEIGHT WIDTH.
        #[arg(long, num_args = 2, value_names = ["HEIGHT", "WIDTH"])]
        resize: Option<Vec<usize>>,
    },
    /// Per-stage MSE / PSNR / SSIM on paired data.
    Evaluate {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        passes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Evaluate one split of the dataset instead of every pair.
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
    },
}

fn run(cli: Cli) -> dfgan::Result<()> {
    match cli.command {
        Command::GeneratePhantoms { config, out } => {
            commands::cmd_generate_phantoms(&config, &out)?;
        }
        Command::Train {
            config,
            data,
            out,
            stage,
            resume,
        } => {
            commands::cmd_train(config.as_deref(), &data, &out, stage, resume.as_deref())?;
        }
        Command::Infer {
            checkpoint,
            input,
            out,
            passes,
            seed,
            stage,
            resize,
        } => {
            let opts = InferOptions {
                passes,
                seed,
                stage,
                resize: resize.map(|v| (v[0], v[1])),
            };
            commands::cmd_infer(&checkpoint, &input, &out, &opts)?;
        }
        Command::Evaluate {
            checkpoints,
            data,
            out,
            passes,
            seed,
            split,
            split_seed,
        } => {
            let opts = EvaluateOptions {
                passes,
                seed,
                split: split.map(|s| match s {
                    SplitArg::Train => Split::Train,
                    SplitArg::Val => Split::Val,
                    SplitArg::Test => Split::Test,
                }),
                split_seed,
            };
            commands::cmd_evaluate(&checkpoints, &data, &out, &opts)?;
            print!("{}", std::fs::read_to_string(out.join("metrics.txt"))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e) as u8)
        }
    }
}
