use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use patchvid_core::error::Error;
use patchvid_core::metrics::SVFID_DIMS;

use patchvid_cli::commands::{self, EvalOptions, Extractor};

#[derive(Parser)]
#[command(name = "patchvid", version, about = "Train, sample and evaluate single-video patch VAE-GAN models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or resume) a model on one video.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Frame directory, raw container (.pvraw) or single PNG.
        #[arg(long)]
        input: PathBuf,
        /// Checkpoint directory; rewritten after every scale.
        #[arg(long)]
        out: PathBuf,
        /// Continue the checkpoint already in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Draw random samples from a trained model.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scale-0 size T,H,W; finer scales follow proportionally.
        #[arg(long, value_parser = parse_shape)]
        shape: Option<[usize; 3]>,
        #[arg(long)]
        out: PathBuf,
        /// Write raw float containers instead of PNG frames.
        #[arg(long)]
        raw: bool,
    },
    /// Report diversity and single-video FID of generated samples.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// The real video (its first slice is the reference).
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 50)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Extractor::Pixels)]
        extractor: Extractor,
        /// Clip size T,H,W both videos are resized to before feature extraction.
        #[arg(long, value_parser = parse_shape)]
        svfid_shape: Option<[usize; 3]>,
        /// Evaluate posterior-mean reconstructions instead of random samples.
        #[arg(long)]
        reconstruct: bool,
    },
    /// Refine a guide video from a given scale upwards.
    Inject {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        start_scale: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s.split(',').map(|p| p.trim().parse::<usize>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    match parts[..] {
        [t, h, w] if t > 0 && h > 0 && w > 0 => Ok([t, h, w]),
        _ => Err(format!("expected three positive integers T,H,W, got {s:?}")),
    }
}

/// 2 config, 3 data, 4 state, 5 numerical divergence, 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::Schedule(_)) => 2,
        Some(Error::Data(_) | Error::Resample(_) | Error::Shape(_) | Error::Metric(_) | Error::Io { .. }) => 3,
        Some(Error::State(_)) => 4,
        Some(Error::Divergence { .. } | Error::Loss(_) | Error::Penalty(_)) => 5,
        None => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { config, input, out, resume } => commands::train(&config, &input, &out, resume),
        Command::Sample { checkpoint, count, seed, shape, out, raw } => commands::sample(&checkpoint, count, seed, shape, &out, raw),
        Command::Evaluate { checkpoint, input, count, seed, extractor, svfid_shape, reconstruct } => {
            let opts = EvalOptions { count, seed, extractor, svfid_dims: svfid_shape.unwrap_or(SVFID_DIMS), reconstruct };
            for record in commands::evaluate(&checkpoint, &input, &opts)? {
                println!("{record}");
            }
            Ok(())
        }
        Command::Inject { checkpoint, input, start_scale, out } => commands::inject(&checkpoint, &input, start_scale, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
