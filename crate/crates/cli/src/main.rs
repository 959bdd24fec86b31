use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

use commands::CliError;

#[derive(Parser)]
#[command(name = "ncn", version, about = "Learned image codec with detection-aware training and latent masking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress a PNG/PPM image into a bitstream.
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Apply the model's masking head (needs --analysis).
        #[arg(long)]
        mask: bool,
        #[arg(long)]
        analysis: Option<PathBuf>,
    },
    /// Reconstruct an image from a bitstream.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a training plan.
    Train {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        analysis: Option<PathBuf>,
        /// Start from existing checkpoints, one per lambda.
        #[arg(long, num_args = 1..)]
        init: Vec<PathBuf>,
        /// Continue from checkpoints already in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Train one model per lambda and write RD curves plus a plot.
    Sweep {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        analysis: Option<PathBuf>,
        /// Dataset whose `val` split is evaluated (defaults to the last phase's dataset).
        #[arg(long)]
        val: Option<String>,
    },
    /// Print RD curves and, with --bd, BD-rate / BD-quality against an anchor.
    Eval {
        #[arg(long, num_args = 1.., required = true)]
        curves: Vec<PathBuf>,
        #[arg(long)]
        bd: bool,
        /// Label of the anchor curve (defaults to the first curve read).
        #[arg(long)]
        anchor: Option<String>,
    },
    /// Generate a synthetic shapes dataset with box annotations.
    GenSynthetic {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Images held out as the `val` split.
        #[arg(long)]
        val: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the bundled toy detector used as the analysis network.
    TrainAnalysis {
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 12)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Encode {
            model,
            input,
            out,
            mask,
            analysis,
        } => commands::encode(&model, &input, &out, mask, analysis.as_deref()),
        Command::Decode { model, input, out } => commands::decode(&model, &input, &out),
        Command::Train {
            plan,
            out,
            analysis,
            init,
            resume,
        } => commands::train(&plan, &out, analysis.as_deref(), &init, resume),
        Command::Sweep {
            plan,
            lambdas,
            out,
            analysis,
            val,
        } => commands::sweep(&plan, &lambdas, &out, analysis.as_deref(), val.as_deref()),
        Command::Eval { curves, bd, anchor } => commands::eval(&curves, bd, anchor.as_deref()),
        Command::GenSynthetic {
            n,
            classes,
            seed,
            val,
            out,
        } => commands::gen_synthetic(n, classes, seed, val, out.as_deref()),
        Command::TrainAnalysis { data, out, epochs, seed } => commands::train_analysis(&data, &out, epochs, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub(crate) fn cache_dir() -> Option<PathBuf> {
    std::env::var_os("NCN_CACHE_DIR").map(PathBuf::from)
}

/// A dataset reference is a directory path, or a name under `NCN_CACHE_DIR`.
pub(crate) fn resolve_dataset(id: &str, base: Option<&Path>) -> Result<PathBuf, CliError> {
    let direct = Path::new(id);
    let mut tried = Vec::new();
    let candidates = [
        Some(direct.to_path_buf()),
        base.map(|b| b.join(id)),
        cache_dir().map(|c| c.join(id)),
    ];
    for c in candidates.into_iter().flatten() {
        if c.join(ncn_core::dataset::MANIFEST_FILE).exists() {
            return Ok(c);
        }
        tried.push(c);
    }
    Err(CliError::DatasetNotFound(id.to_string(), tried))
}
