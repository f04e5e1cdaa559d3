use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sparse_tuning::commands;

/// Token-sparsified adapter fine-tuning for Vision Transformers.
///
/// Log verbosity follows SPTN_LOG (error, warn, info, debug, trace;
/// default info).
#[derive(Parser, Debug)]
#[command(name = "sptn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the configured model and write metrics and checkpoints.
    Train { config: PathBuf },
    /// Report top-1 accuracy of a checkpoint on the evaluation split.
    Eval { config: PathBuf, ckpt: PathBuf },
    /// Print the analytic FLOPs and parameter report.
    Flops { config: PathBuf },
    /// Write per-layer CLS attention as CSV and PGM images.
    AttnDump {
        config: PathBuf,
        ckpt: PathBuf,
        index: usize,
        /// Layers to render as PGM (comma separated); all when omitted.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
        /// Output directory; defaults to <output.dir>/attn_<index>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset as labels.csv plus raw f32 files.
    GenData {
        classes: usize,
        samples: usize,
        seed: u64,
        dir: PathBuf,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
    },
}

fn run(cli: Cli) -> sparse_tuning::Result<()> {
    match cli.command {
        Command::Train { config } => {
            let out = commands::train(&config)?;
            println!("wrote {}", out.display());
        }
        Command::Eval { config, ckpt } => {
            let acc = commands::eval(&config, &ckpt)?;
            println!("accuracy={acc:.4}");
        }
        Command::Flops { config } => print!("{}", commands::flops(&config)?),
        Command::AttnDump {
            config,
            ckpt,
            index,
            layers,
            out,
        } => {
            let dir = commands::attn_dump(&config, &ckpt, index, &layers, out.as_deref())?;
            println!("wrote {}", dir.display());
        }
        Command::GenData {
            classes,
            samples,
            seed,
            dir,
            image_size,
            channels,
        } => {
            commands::gen_data(classes, samples, seed, &dir, image_size, channels)?;
            println!("wrote {samples} samples to {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SPTN_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
