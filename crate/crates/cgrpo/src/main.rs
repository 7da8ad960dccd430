//! Experiment runner for constrained GRPO on the lava/battery gridworld.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime failure,
//! 3 theorem-verification failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cgrpo::checkpoint;
use cgrpo::experiment::{self, ExperimentError, ExperimentSpec};
use cgrpo::gridworld::GridConfig;
use cgrpo::plot;
use cgrpo::theorem;

#[derive(Parser)]
#[command(name = "cgrpo", version, about = "Constrained GRPO gridworld toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SpecArgs {
    /// Experiment spec file (flat key = value text).
    #[arg(long)]
    spec: PathBuf,
    /// Output directory (overrides `out` in the spec).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Resume: skip finished cells, continue partial ones from checkpoints.
    #[arg(long)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run a spec that resolves to exactly one training cell.
    Train {
        #[command(flatten)]
        common: SpecArgs,
        /// Replace the spec's seed list with this single seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every cell of a spec (grid sweeps, multi-seed constrained runs).
    Sweep {
        #[command(flatten)]
        common: SpecArgs,
        /// Parallel cells (outputs identical to the sequential schedule).
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Evaluate a policy checkpoint over fresh episodes.
    Eval {
        /// Policy checkpoint (bare policy or full training state).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the effective-weight identity and scale-contrast properties.
    VerifyTheorem {
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render SVG charts for a run or experiment directory.
    Plot {
        /// Directory holding metrics.csv, cell subdirectories or summaries.
        run_dir: PathBuf,
        /// Where to put the charts (default: RUN_DIR/plots).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_THEOREM: u8 = 3;

fn experiment_exit(e: &ExperimentError) -> u8 {
    if e.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

fn resolve_out(spec: &ExperimentSpec, flag: Option<PathBuf>) -> Result<PathBuf, u8> {
    match flag.or_else(|| spec.out.clone()) {
        Some(dir) => Ok(dir),
        None => {
            eprintln!("error: no output directory (pass --out or set `out` in the spec)");
            Err(EXIT_VALIDATION)
        }
    }
}

fn run_spec(common: SpecArgs, seed: Option<u64>, single_cell: bool, workers: usize) -> u8 {
    let mut spec = match ExperimentSpec::load(&common.spec) {
        Ok(spec) => spec,
        Err(e) => {
            eprintln!("error: {e}");
            return experiment_exit(&e);
        }
    };
    if let Some(seed) = seed {
        spec.seeds = vec![seed];
    }
    if single_cell && spec.cells().len() != 1 {
        eprintln!(
            "error: `train` needs a spec with exactly one cell, found {} \
             (use `sweep`, or narrow the spec / pass --seed)",
            spec.cells().len()
        );
        return EXIT_VALIDATION;
    }
    let out = match resolve_out(&spec, common.out) {
        Ok(out) => out,
        Err(code) => return code,
    };
    match experiment::run_experiment(&spec, &out, workers, common.resume) {
        Ok(rows) => {
            for row in &rows {
                println!(
                    "{}: goal_rate {:.4}, lava_rate {:.5}, battery_rate {:.5}, mean_len {:.2}",
                    row.cell.name,
                    row.eval.goal_rate,
                    row.eval.lava_rate,
                    row.eval.battery_rate,
                    row.eval.mean_episode_len
                );
            }
            println!("done: {} cells in {}", rows.len(), out.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            experiment_exit(&e)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Train { common, seed } => run_spec(common, seed, true, 1),
        Command::Sweep { common, workers } => run_spec(common, None, false, workers.max(1)),
        Command::Eval {
            checkpoint: path,
            episodes,
            seed,
            out,
        } => match checkpoint::load_policy(&path) {
            Ok(params) => {
                match experiment::evaluate(&params, &GridConfig::default(), episodes, seed) {
                    Ok(report) => {
                        print!("{}", report.serialize());
                        if let Some(out) = out {
                            if let Err(e) = std::fs::write(&out, report.serialize()) {
                                eprintln!("error writing {}: {e}", out.display());
                                return ExitCode::from(EXIT_RUNTIME);
                            }
                        }
                        0
                    }
                    Err(e) => {
                        eprintln!("error: {e}");
                        EXIT_RUNTIME
                    }
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_VALIDATION
            }
        },
        Command::VerifyTheorem { samples, seed } => {
            let report = theorem::verify(samples, seed);
            print!("{}", report.render());
            if report.passed() {
                0
            } else {
                EXIT_THEOREM
            }
        }
        Command::Plot { run_dir, out } => match plot::plot_run_dir(&run_dir, out.as_deref()) {
            Ok(written) => {
                for path in written {
                    println!("wrote {}", path.display());
                }
                0
            }
            Err(e) => {
                eprintln!("error: {e}");
                if e.is_validation() {
                    EXIT_VALIDATION
                } else {
                    EXIT_RUNTIME
                }
            }
        },
    };
    ExitCode::from(code)
}
