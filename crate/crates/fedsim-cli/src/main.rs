//! Command line driver: run one experiment, sweep a grid, or audit a run
//! against the independent checkers. Exits 0 on success, 2 on configuration
//! or parse problems, 1 on anything else (including a failed audit).

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedsim::{harness, oracle, FLConfig, FedError, SweepSpec};

#[derive(Parser)]
#[command(
    name = "fedsim",
    version,
    about = "Personalized federated learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its artifacts to the output directory.
    Run {
        /// Experiment description (TOML).
        config: PathBuf,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Override how often full snapshots are written (0 disables).
        #[arg(long)]
        snapshot_interval: Option<usize>,
    },
    /// Cross the sweep axes with the base config and write grid.csv.
    Grid {
        /// Base experiment description (TOML).
        config: PathBuf,
        /// Sweep axes (TOML with a [sweep] table).
        sweep: PathBuf,
        /// Override the base master seed the per-cell seeds derive from.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Audit a mask-growing config: replay its mask trajectory against the
    /// closed-form bound and compare rounds against the union-problem
    /// stepper. Writes verify.json and exits nonzero if either audit fails.
    Verify {
        /// Experiment description (TOML).
        config: PathBuf,
        /// Rounds of the lockstep comparison.
        #[arg(long, default_value_t = 5)]
        rounds: usize,
        /// Largest tolerated deviation in the lockstep comparison.
        #[arg(long, default_value_t = 1e-10)]
        tolerance: f64,
        /// Override the output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn load(
    path: &Path,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    snapshot_interval: Option<usize>,
) -> fedsim::Result<FLConfig> {
    let mut cfg = FLConfig::load(path)?;
    if let Some(s) = seed {
        cfg.federation.master_seed = s;
    }
    if let Some(dir) = out_dir {
        cfg.output.dir = dir;
    }
    if let Some(interval) = snapshot_interval {
        cfg.federation.snapshot_interval = interval;
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> fedsim::Result<ExitCode> {
    match cli.command {
        Command::Run {
            config,
            seed,
            out_dir,
            snapshot_interval,
        } => {
            let cfg = load(&config, seed, out_dir, snapshot_interval)?;
            let run = harness::run_experiment(&cfg)?;
            println!("algorithm: {}", cfg.algorithm.name());
            println!("client  accuracy  personalized");
            for (c, acc) in run.clients.iter().zip(&run.final_accuracy) {
                println!(
                    "{:>6}  {:>8.4}  {:>12.4}",
                    c.id,
                    acc,
                    c.mask.personalized_fraction()
                );
            }
            println!(
                "mean accuracy: {:.4}",
                fedsim::report::mean(&run.final_accuracy)
            );
            println!("artifacts in {}", cfg.output.dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Grid {
            config,
            sweep,
            seed,
            out_dir,
        } => {
            let base = load(&config, seed, out_dir, None)?;
            let spec = SweepSpec::load(&sweep)?;
            let rows = harness::run_grid(&base, &spec)?;
            println!("cell      p  alpha  train  accuracy  personalized");
            for r in &rows {
                println!(
                    "{:>4}  {:>5.3}  {:>5.3}  {:>5}  {:>8.4}  {:>12.4}",
                    r.cell_index, r.p, r.alpha, r.train_size, r.mean_accuracy, r.mean_sparsity
                );
            }
            println!("grid.csv in {}", base.output.dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify {
            config,
            rounds,
            tolerance,
            out_dir,
        } => {
            let cfg = load(&config, None, out_dir, None)?;
            let masks = oracle::verify_mask_convergence(&cfg)?;
            let lockstep = oracle::verify_block_sgd_equivalence(&cfg, rounds, tolerance, 0.0)?;

            std::fs::create_dir_all(&cfg.output.dir)?;
            let path = cfg.output.dir.join("verify.json");
            let file = BufWriter::new(File::create(&path)?);
            serde_json::to_writer_pretty(
                file,
                &serde_json::json!({
                    "mask_convergence": masks,
                    "block_sgd": lockstep,
                }),
            )
            .map_err(|e| FedError::Internal(format!("cannot write verify.json: {e}")))?;

            println!(
                "mask convergence: {} (settled at round {}, bound {})",
                if masks.passed { "pass" } else { "FAIL" },
                masks.converged_at,
                masks.bound
            );
            println!(
                "block sgd lockstep: {} (max deviation {:.3e}, tolerance {:.3e})",
                if lockstep.passed { "pass" } else { "FAIL" },
                lockstep.max_deviation,
                lockstep.tolerance
            );
            println!("report in {}", path.display());
            if masks.passed && lockstep.passed {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(1))
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                FedError::Config(_) | FedError::Parse { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
