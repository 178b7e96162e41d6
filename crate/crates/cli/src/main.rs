use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ncv_cli::{run_fit, run_quantile, run_sim, CliError, QuantileConfig, RunConfig, SimRecipe};

#[derive(Parser)]
#[command(
    name = "ncv",
    about = "Neighbourhood cross validation for penalized regression",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Override the seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results are identical for
    /// any thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override the output directory in the config file.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one model from a TOML config and write its artifacts.
    Fit {
        /// Path to the run configuration.
        config: PathBuf,
    },
    /// Run a simulation study (coverage/MSE table over replicates).
    Sim {
        /// Path to the recipe configuration.
        config: PathBuf,
    },
    /// Smooth additive quantile regression pipeline.
    Quantile {
        /// Path to the quantile configuration.
        config: PathBuf,
        /// Quantile level in (0, 1).
        #[arg(long)]
        tau: Option<f64>,
        /// Number of smoothing candidates in the selection grid.
        #[arg(long)]
        grid: Option<usize>,
        /// Bootstrap resamples for the selection.
        #[arg(long)]
        n_boot: Option<usize>,
    },
}

fn dispatch(cli: Cli) -> Result<bool, CliError> {
    if let Some(threads) = cli.threads {
        // ignore the error when a pool already exists (e.g. in tests)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    match cli.command {
        Command::Fit { config } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            if let Some(dir) = cli.out_dir {
                cfg.out_dir = dir;
            }
            let run = run_fit(&cfg)?;
            eprintln!(
                "fit: V = {:.6e}, edf = {:.2}, artifacts in {}",
                run.summary.value,
                run.summary.edf,
                run.out_dir.display()
            );
            for w in &run.summary.warnings {
                eprintln!("warning: {w}");
            }
            Ok(run.warning)
        }
        Command::Sim { config } => {
            let mut cfg = SimRecipe::load(&config)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            if let Some(dir) = cli.out_dir {
                cfg.out_dir = dir;
            }
            let run = run_sim(&cfg)?;
            for row in &run.summary.rows {
                eprintln!(
                    "sim {}: coverage {:.3}, mse {:.4e} over {} replicates",
                    row.method, row.coverage, row.mse, row.replicates
                );
            }
            Ok(false)
        }
        Command::Quantile { config, tau, grid, n_boot } => {
            let mut cfg = QuantileConfig::load(&config)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            if let Some(dir) = cli.out_dir {
                cfg.out_dir = dir;
            }
            if let Some(tau) = tau {
                cfg.tau = tau;
            }
            if let Some(grid) = grid {
                cfg.grid = grid;
            }
            if let Some(n_boot) = n_boot {
                cfg.n_boot = n_boot;
            }
            let run = run_quantile(&cfg)?;
            eprintln!(
                "quantile tau={}: lambda* = {:.4e}, below = {:.3}, artifacts in {}",
                run.summary.tau,
                run.summary.lambda_star,
                run.summary.proportion_below,
                run.out_dir.display()
            );
            for w in &run.summary.warnings {
                eprintln!("warning: {w}");
            }
            Ok(run.warning)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(1)
        }
    }
}
