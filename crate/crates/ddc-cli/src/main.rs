use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ddc_cli::config::ExperimentConfig;
use ddc_cli::runner::{self, RunError};

#[derive(Parser)]
#[command(
    name = "ddc",
    version,
    about = "Disentangled dynamics/content latent models for the planar system: \
             dataset generation, training, evaluation, planning, and plots"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training and evaluation datasets.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the model on the generated datasets.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint instead of initializing.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compute the reconstruction/prediction/planning metrics for both sets.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to evaluate (default: the final training checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run one corner-to-corner planning episode per set and write the plans.
    Plan {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Emit latent maps for both sets and their alignment score.
    Map {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Emit true-vs-predicted observation strips for both sets.
    Filmstrip {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print the metrics table from a completed evaluation.
    Report {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig, RunError> {
    Ok(ExperimentConfig::load(path)?)
}

fn run(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::GenData { config } => {
            let cfg = load_config(&config)?;
            let summary = runner::gen_data(&cfg)?;
            for (path, count, sha) in summary.files {
                println!("{}  records={}  sha256={}", path.display(), count, sha);
            }
        }
        Command::Train { config, resume } => {
            let cfg = load_config(&config)?;
            let report = runner::train(&cfg, resume.as_deref())?;
            println!(
                "trained {} epochs ({} steps) in {:.1}s; final checkpoint: {}",
                report.epochs.len(),
                report.final_step,
                report.wall_time_secs,
                report.final_checkpoint.as_deref().unwrap_or("none"),
            );
        }
        Command::Eval { config, checkpoint } => {
            let cfg = load_config(&config)?;
            let metrics = runner::eval(&cfg, checkpoint.as_deref())?;
            print!("{}", ddc_cli::report::format_table(&metrics));
        }
        Command::Plan { config, checkpoint } => {
            let cfg = load_config(&config)?;
            runner::plan(&cfg, checkpoint.as_deref())?;
            println!("plans written under {}", cfg.out_dir.display());
        }
        Command::Map { config, checkpoint } => {
            let cfg = load_config(&config)?;
            let relative = runner::map(&cfg, checkpoint.as_deref())?;
            println!("latent map alignment: relative residual {:.4}", relative);
        }
        Command::Filmstrip { config, checkpoint } => {
            let cfg = load_config(&config)?;
            runner::filmstrip(&cfg, checkpoint.as_deref())?;
            println!("filmstrips written under {}", cfg.out_dir.display());
        }
        Command::Report { config } => {
            let cfg = load_config(&config)?;
            print!("{}", runner::report(&cfg)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
