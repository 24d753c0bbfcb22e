//! Experiment runner CLI: execute configured (strategy × stream × seed)
//! runs, grid searches over α and α/τ, linear probes of saved snapshots, and
//! loss-surface dumps for finished trajectory runs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ocar_core::config::{ExperimentConfig, GridSpec};
use ocar_core::runner::{self, RunError};

#[derive(Parser)]
#[command(name = "ocar", version, about = "Online continual learning optimization laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config (or shipped preset) over all its seeds.
    Run(RunArgs),
    /// Grid search over learning rate α and the ratio α/τ.
    Grid(GridArgs),
    /// Linear-probe a saved parameter snapshot on a dataset.
    Probe(ProbeArgs),
    /// Build the 2D loss surface and projected trajectory for a finished run.
    Surface(SurfaceArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Config file path or preset name (convex_appd, split_mnist5,
    /// rotation10, grid_fig2).
    #[arg(long)]
    config: String,
    /// Run only this seed, overriding the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: runs/<experiment name>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    config: String,
    /// Comma-separated learning rates; defaults to the config's [grid].
    #[arg(long, value_delimiter = ',')]
    alphas: Vec<f64>,
    /// Comma-separated α/τ ratios; defaults to the config's [grid].
    #[arg(long, value_delimiter = ',')]
    ratios: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    /// Parameter snapshot (.bin with its .json sidecar).
    #[arg(long)]
    snapshot: PathBuf,
    /// Dataset directory with MNIST IDX files; defaults to $OCAR_DATA.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SurfaceArgs {
    /// A run directory containing snapshots/ (trajectory-enabled run).
    #[arg(long)]
    run: PathBuf,
    /// Grid resolution per axis.
    #[arg(long, default_value_t = 41)]
    grid: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Run(args) => {
            let mut config = ExperimentConfig::load(&args.config)?;
            if let Some(seed) = args.seed {
                config.seeds = vec![seed];
            }
            let out = args.out.unwrap_or_else(|| PathBuf::from("runs").join(&config.name));
            let records = runner::run(&config, &out)?;
            for r in &records {
                println!(
                    "{}/seed_{}: {}",
                    r.strategy,
                    r.seed,
                    serde_json::to_string(&r.summary).unwrap()
                );
            }
            println!("wrote {} runs under {}", records.len(), out.display());
            Ok(())
        }
        Command::Grid(args) => {
            let config = ExperimentConfig::load(&args.config)?;
            let grid = if !args.alphas.is_empty() || !args.ratios.is_empty() {
                if args.alphas.is_empty() || args.ratios.is_empty() {
                    return Err(RunError::Unsupported(
                        "grid needs both --alphas and --ratios".into(),
                    ));
                }
                GridSpec {
                    alphas: args.alphas,
                    ratios: args.ratios,
                }
            } else {
                config.grid.clone().ok_or_else(|| {
                    RunError::Unsupported(
                        "no [grid] section in config; pass --alphas and --ratios".into(),
                    )
                })?
            };
            let out = args
                .out
                .unwrap_or_else(|| PathBuf::from("runs").join(format!("{}_grid", config.name)));
            let cells = runner::grid_search(&config, &grid, &out)?;
            println!("alpha,ratio,delta_tau,acc,forgetting_task1,final_task_acc");
            for c in &cells {
                println!(
                    "{},{},{},{},{},{}",
                    c.alpha, c.ratio, c.delta_tau, c.acc, c.forgetting_task1, c.final_task_acc
                );
            }
            println!("wrote grid table under {}", out.display());
            Ok(())
        }
        Command::Probe(args) => {
            let acc = runner::probe_snapshot(&args.snapshot, args.data.as_deref(), args.seed)?;
            println!("{}", serde_json::json!({ "probed_acc": acc }));
            Ok(())
        }
        Command::Surface(args) => {
            runner::surface_from_run(&args.run, args.grid)?;
            println!(
                "wrote {} and {}",
                args.run.join("surface.csv").display(),
                args.run.join("trajectory.csv").display()
            );
            Ok(())
        }
    }
}
