use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qmetro::experiment::{
    checkpoint_json, compare, history_csv, read_results, results_csv, write_atomic, CompareError, Experiment,
};
use qmetro::training::TrainError;

/// Environment variable holding the number of worker threads.
const WORKERS_VAR: &str = "QMETRO_WORKERS";

#[derive(Parser)]
#[command(name = "qmetro", version, about = "Train, evaluate and compare adaptive measurement agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured agent; writes checkpoint.json and loss_history.csv.
    Train { config: PathBuf },
    /// Evaluate a checkpoint or a heuristic baseline over the budget grid.
    Evaluate {
        config: PathBuf,
        #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = ["pgh", "sigma", "static", "random"])]
        baseline: Option<String>,
        /// Results path; defaults to results_<agent>.csv in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare result files against the first one.
    Compare {
        #[arg(required = true, num_args = 1..)]
        results: Vec<String>,
        /// Also write the summary as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

fn fail(code: u8, message: impl ToString) -> Failure {
    Failure {
        code,
        message: message.to_string(),
    }
}

fn train_failure(e: TrainError) -> Failure {
    match e {
        TrainError::Config { .. } | TrainError::BatchTooSmall(_) | TrainError::LossNeedsDiscretePrior => fail(2, e),
        _ => fail(5, e),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    write_atomic(path, bytes).map_err(|e| fail(1, format!("cannot write {}: {e}", path.display())))
}

/// Relative output directories are taken relative to the config file.
fn output_dir(exp: &Experiment, config: &Path) -> PathBuf {
    let dir = &exp.config.output_dir;
    if dir.is_absolute() {
        dir.clone()
    } else {
        config.parent().unwrap_or(Path::new(".")).join(dir)
    }
}

fn load(config: &Path) -> Result<Experiment, Failure> {
    Experiment::load(config).map_err(|e| fail(2, e))
}

fn set_workers() -> Result<(), Failure> {
    let Ok(value) = std::env::var(WORKERS_VAR) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| fail(2, format!("{WORKERS_VAR} must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| fail(1, e))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { config } => {
            let exp = load(&config)?;
            set_workers()?;
            let total = exp.config.training.iterations;
            let every = (total / 20).max(1);
            let (agent, history) = exp
                .train(|row| {
                    if row.iteration % every == 0 || row.iteration + 1 == total {
                        eprintln!(
                            "iteration {:>6}  loss {:.6e}  grad norm {:.3e}  lr {:.3e}",
                            row.iteration, row.loss_mean, row.grad_norm, row.learning_rate
                        );
                    }
                })
                .map_err(train_failure)?;
            let dir = output_dir(&exp, &config);
            write(&dir.join("checkpoint.json"), &checkpoint_json(&agent))?;
            write(&dir.join("loss_history.csv"), &history_csv(&history))?;
            println!("wrote {}", dir.display());
        }
        Command::Evaluate {
            config,
            checkpoint,
            baseline,
            out,
        } => {
            let exp = load(&config)?;
            let policy = match (checkpoint, baseline) {
                (Some(path), _) => qmetro::agents::Policy::Trainable(exp.load_checkpoint(&path).map_err(|e| fail(3, e))?),
                (None, Some(name)) => exp.baseline(&name).map_err(|e| fail(2, e))?,
                (None, None) => unreachable!("clap requires one of them"),
            };
            set_workers()?;
            let rows = exp.evaluate(&policy).map_err(train_failure)?;
            let path = out.unwrap_or_else(|| output_dir(&exp, &config).join(format!("results_{}.csv", policy.name())));
            write(&path, &results_csv(&rows))?;
            println!("wrote {}", path.display());
        }
        Command::Compare { results, json } => {
            let files = results
                .iter()
                .map(|p| read_results(p).map(|rows| (p.clone(), rows)))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| fail(2, e))?;
            let summary = compare(&files).map_err(|e| match e {
                CompareError::GridMismatch { .. } => fail(4, e),
                _ => fail(2, e),
            })?;
            print!("{}", summary.table());
            if let Some(path) = json {
                let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
                text.push('\n');
                write(&path, text.as_bytes())?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
