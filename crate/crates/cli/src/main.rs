use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use itlsca::nn::ModelKind;
use itlsca_cli::commands::{self, PlanOverrides};
use itlsca_cli::{report, CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "itlsca", version, about = "Leakage-map simulation and profiled side-channel attacks")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Lr,
    Mlp,
    Cnn,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Lr => ModelKind::Lr,
            ModelArg::Mlp => ModelKind::Mlp,
            ModelArg::Cnn => ModelKind::Cnn,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset directory from the config's sim section.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Filter, screen, rank and select pixels for all 16 bytes.
    SelectFeatures {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per byte.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Output of select-features; required unless the model takes full maps.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
        /// Chain bytes with iterative transfer learning.
        #[arg(long)]
        itl: bool,
        #[arg(long)]
        itl_iterations: Option<usize>,
        /// Comma-separated byte indices, e.g. 3,0,1.
        #[arg(long, value_delimiter = ',')]
        byte_order: Option<Vec<usize>>,
    },
    /// Key-rank evaluation of trained models on the test split.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Correlation power analysis baseline.
    Cpa {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Comparison and training-size sweep tables over evaluated runs.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            commands::simulate(&cfg, &out)?;
        }
        Command::SelectFeatures { config, dataset, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let fb = commands::select_features(&cfg, &dataset, &out)?;
            for b in &fb.bytes {
                let px: Vec<String> = b.selected10.pixels.iter().map(|p| format!("({},{})", p.row, p.col)).collect();
                println!("byte {:2}: {}", b.selected10.byte, px.join(" "));
            }
        }
        Command::Train {
            config,
            dataset,
            features,
            out,
            model,
            itl,
            itl_iterations,
            byte_order,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let overrides = PlanOverrides {
                model: model.map(Into::into),
                itl,
                itl_iterations,
                byte_order,
            };
            let set = commands::train(&cfg, &dataset, features.as_deref(), &out, &overrides)?;
            for m in &set.models {
                match (&m.history, &m.error) {
                    (Some(h), _) => println!(
                        "byte {:2}: {} epochs, best {} (val loss {:.4})",
                        m.byte,
                        h.epochs(),
                        h.best_epoch,
                        h.best_val_loss
                    ),
                    (None, e) => println!("byte {:2}: failed: {}", m.byte, e.as_deref().unwrap_or("unknown")),
                }
            }
        }
        Command::Evaluate {
            config,
            dataset,
            models,
            features,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            print_summary(commands::evaluate(&cfg, &dataset, &models, features.as_deref(), &out)?);
        }
        Command::Cpa { config, dataset, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            print_summary(commands::cpa(&cfg, &dataset, &out)?);
        }
        Command::Report { out, runs } => {
            let runs = report::load_runs(&runs)?;
            let t = report::write(&out, &runs)?;
            print!("{}\n{}", t.comparison_md, t.sweep_md);
        }
    }
    Ok(())
}

fn print_summary(r: itlsca::keyrank::RankReport) {
    println!(
        "{}: average MTD {}, worst MTD {}, average rank {:.2} ({} of {} bytes cracked)",
        r.method,
        report::fmt_mtd(r.result.average_mtd),
        report::fmt_mtd(r.result.worst_mtd),
        r.result.average_rank,
        r.result.cracked_bytes(),
        r.result.bytes.len()
    );
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if !itlsca::exec::init_threads(n) {
            log::warn!("thread pool already initialized; --threads {n} ignored");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
