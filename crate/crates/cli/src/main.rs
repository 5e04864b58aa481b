mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ocrm_core::{Arm, Error};

use run_config::RunConfig;

const EXIT_CONFIG: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;

#[derive(Parser)]
#[command(name = "ocrm", version, about = "One-class recognition experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

/// Flags override values from `--config`.
#[derive(Args)]
struct Overrides {
    /// Flat `key = value` run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// In-class label.
    #[arg(long, global = true)]
    class: Option<u8>,
    #[arg(long, global = true)]
    arm: Option<Arm>,
    #[arg(long, global = true)]
    trials: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Latent width.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// SVDD trade-off, a number in (0, 1] or `auto`.
    #[arg(long, global = true)]
    c: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the networks; writes the model file and the loss history.
    Train,
    /// Fit the hypersphere on the training split and store it in the model.
    FitSvdd {
        #[arg(long)]
        model: PathBuf,
    },
    /// Score an image file or a directory of images.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Repeated train, fit and score trials for one arm.
    Eval,
    /// All five arms with shared seeds.
    Ablate,
}

fn resolve(o: &Overrides) -> Result<RunConfig, Error> {
    let mut cfg = match &o.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    let flags: [(&str, Option<String>); 8] = [
        ("class", o.class.map(|v| v.to_string())),
        ("arm", o.arm.map(|v| v.to_string())),
        ("trials", o.trials.map(|v| v.to_string())),
        ("seed", o.seed.map(|v| v.to_string())),
        ("epochs", o.epochs.map(|v| v.to_string())),
        ("k", o.k.map(|v| v.to_string())),
        ("c", o.c.clone()),
        ("out", o.out.as_ref().map(|v| v.display().to_string())),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.apply(key, &v)?;
        }
    }
    Ok(cfg)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } | Error::NonFinite(_) => EXIT_DIVERGENCE,
        Error::Data(_)
        | Error::Format { .. }
        | Error::Io { .. }
        | Error::EmptyDataset
        | Error::ClassAbsent(_)
        | Error::UndefinedAuc
        | Error::Dimension(_) => EXIT_DATA,
        _ => EXIT_CONFIG,
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = resolve(&cli.overrides)?;
    match &cli.command {
        Command::Train => {
            let path = commands::train(&cfg)?;
            println!("model written to {}", path.display());
        }
        Command::FitSvdd { model } => {
            commands::fit_svdd(&cfg, model)?;
            println!("sphere stored in {}", model.display());
        }
        Command::Score { model, input } => {
            let path = commands::score(&cfg, model, input)?;
            println!("scores written to {}", path.display());
        }
        Command::Eval => {
            let r = commands::eval(&cfg)?;
            println!(
                "class {} arm {}: AUC {:.4} (std {:.4}), {} failed",
                r.class,
                r.arm,
                r.mean,
                r.std,
                r.failed()
            );
        }
        Command::Ablate => {
            for r in commands::ablate(&cfg)? {
                println!(
                    "class {} arm {}: AUC {:.4} (std {:.4})",
                    r.class, r.arm, r.mean, r.std
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
