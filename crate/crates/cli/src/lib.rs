//! The `dendrite` command line: dataset generation, cascade training, detection,
//! evaluation, parameter sweeps and the stage ablation.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dendrite_core::Error;

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_TRAINING: i32 = 4;
pub const EXIT_CHECKPOINT: i32 = 5;
pub const EXIT_DATA: i32 = 6;
pub const EXIT_CHECK: i32 = 7;

/// A failed command: the message for stderr and the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    /// Any core error raised while loading models counts as a checkpoint failure,
    /// except a missing or unreadable file.
    pub fn checkpoint(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } => EXIT_IO,
            _ => EXIT_CHECKPOINT,
        };
        Self::new(code, e.to_string())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Usage(_) => EXIT_CONFIG,
            Error::Io { .. } | Error::Image { .. } => EXIT_IO,
            Error::Training { .. } => EXIT_TRAINING,
            Error::Checkpoint(_) => EXIT_CHECKPOINT,
            Error::Data(_) => EXIT_DATA,
        };
        Self::new(code, e.to_string())
    }
}

pub type CmdResult<T = ()> = std::result::Result<T, Failure>;

#[derive(Parser, Debug)]
#[command(name = "dendrite", version, about = "Cascaded dendrite-core detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a single key, e.g. `--set alpha=0.5`. Applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    Crop,
    Intensity,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train both detectors and the refinement classifier.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Use 100/100/50 epochs instead of the configured counts.
        #[arg(long)]
        paper_epochs: bool,
        /// Continue from the training state left in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs in this invocation (the state is kept for `--resume`).
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Run the cascade on images and write points, heatmaps and overlays.
    Detect {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        models: PathBuf,
        /// Image files to process.
        #[arg(long = "image")]
        images: Vec<PathBuf>,
        /// Dataset directory; its annotations are drawn as ground truth.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the cascade on a dataset split, or recompute metrics from count rows.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// CSV with `total,tp,fp` columns (and optionally `method`).
        #[arg(long)]
        fixture: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Crop-size or fill-intensity sweep of the two-stage cascade.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        kind: SweepKind,
        #[arg(long)]
        data: PathBuf,
        /// Reuse the first-stage detector from this directory instead of training one.
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics of the ESD, +HSD and +HSR cascade prefixes.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        /// Exit with code 7 unless +HSD recall is at least ESD recall.
        #[arg(long)]
        check: bool,
    },
}

pub fn load_config(args: &ConfigArgs) -> CmdResult<RunConfig> {
    let mut pairs = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::new(EXIT_IO, format!("cannot read {}: {e}", path.display())))?;
            config::parse_pairs(&text)?
        }
        None => Vec::new(),
    };
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure::new(EXIT_CONFIG, format!("--set expects KEY=VALUE, got `{o}`")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(RunConfig::from_pairs(&pairs)?)
}

pub fn execute(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Synth {
            cfg,
            count,
            seed,
            out,
        } => {
            let mut c = load_config(&cfg)?;
            if let Some(s) = seed {
                c.set("seed", &s.to_string())?;
            }
            commands::cmd_synth(&c, count, &out)
        }
        Command::Train {
            cfg,
            data,
            out,
            seed,
            paper_epochs,
            resume,
            max_epochs,
        } => {
            let mut c = load_config(&cfg)?;
            if let Some(s) = seed {
                c.set("seed", &s.to_string())?;
            }
            if paper_epochs {
                for (k, v) in config::PAPER_EPOCHS {
                    c.set(k, v)?;
                }
            }
            commands::cmd_train(&c, &data, &out, &commands::TrainControl { resume, max_epochs })
        }
        Command::Detect {
            cfg,
            models,
            images,
            data,
            split,
            out,
        } => commands::cmd_detect(&load_config(&cfg)?, &models, &images, data.as_deref(), &split, &out),
        Command::Eval {
            cfg,
            models,
            data,
            split,
            fixture,
            out,
        } => {
            let c = load_config(&cfg)?;
            match (fixture, models, data) {
                (Some(f), _, _) => commands::cmd_eval_fixture(&c, &f, &out),
                (None, Some(m), Some(d)) => commands::cmd_eval(&c, &m, &d, &split, &out),
                _ => Err(Failure::new(EXIT_CONFIG, "eval needs --fixture, or both --models and --data")),
            }
        }
        Command::Sweep {
            cfg,
            kind,
            data,
            models,
            split,
            out,
        } => commands::cmd_sweep(&load_config(&cfg)?, kind, &data, models.as_deref(), &split, &out),
        Command::Ablate {
            cfg,
            models,
            data,
            split,
            out,
            check,
        } => commands::cmd_ablate(&load_config(&cfg)?, &models, &data, &split, &out, check),
    }
}

/// Parses `args` (including the program name) and runs the command, returning the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
