use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use percfield_cli::store::{write_atomic, ORACLE};
use percfield_cli::{report, resume, run, CliError, CliResult, ExperimentConfig, RunOptions, RunOutcome};
use percfield_core::oracle::run_corpus;

#[derive(Parser)]
#[command(name = "percfield", version, about = "Monte Carlo for critical percolation fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment file.
    Run {
        config: PathBuf,
        /// Overrides the config and PERCFIELD_OUTPUT_DIR.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Overrides the config and PERCFIELD_WORKERS.
        #[arg(long)]
        workers: Option<usize>,
        /// Stop after this many checkpoints, as if killed.
        #[arg(long, hide = true)]
        stop_after: Option<u64>,
    },
    /// Continue an interrupted run.
    Resume {
        dir: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, hide = true)]
        stop_after: Option<u64>,
    },
    /// Summarize a finished run and write report.json.
    Report { dir: PathBuf },
    /// Compare Monte Carlo with exhaustive enumeration on the tiny-patch corpus.
    OracleTest {
        #[arg(long, default_value_t = 100_000)]
        samples: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Also write oracle.json into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn finish(outcome: RunOutcome) -> ExitCode {
    match outcome {
        RunOutcome::Complete { dir } => {
            println!("complete: {}", dir.display());
            ExitCode::SUCCESS
        }
        RunOutcome::Interrupted { dir, checkpoints } => {
            eprintln!("stopped after {checkpoints} checkpoints; continue with `percfield resume {}`", dir.display());
            ExitCode::from(1)
        }
    }
}

fn oracle_test(samples: u64, seed: u64, out: Option<PathBuf>) -> CliResult<bool> {
    let outcomes = run_corpus(samples, seed)?;
    for o in &outcomes {
        println!(
            "{} {:<40} sites {:>2}  exact {:.6}  mc {:.6} ± {:.6}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.sites,
            o.exact,
            o.estimate,
            o.std_error
        );
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let text = serde_json::to_string_pretty(&outcomes).expect("outcomes serialize");
        write_atomic(&dir.join(ORACLE), text.as_bytes())?;
    }
    Ok(outcomes.iter().all(|o| o.passed))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, output_dir, workers, stop_after } => ExperimentConfig::load(&config).and_then(|c| {
            let opts = RunOptions { workers, output_dir, stop_after_checkpoints: stop_after }.with_env()?;
            run(&c, &opts).map(finish)
        }),
        Command::Resume { dir, workers, stop_after } => {
            RunOptions { workers, output_dir: None, stop_after_checkpoints: stop_after }
                .with_env()
                .and_then(|opts| resume(&dir, &opts).map(finish))
        }
        Command::Report { dir } => report(&dir).map(|(_, text)| {
            print!("{text}");
            ExitCode::SUCCESS
        }),
        Command::OracleTest { samples, seed, out } => {
            oracle_test(samples, seed, out).map(|ok| if ok { ExitCode::SUCCESS } else { ExitCode::from(3) })
        }
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        ExitCode::from(e.exit_code() as u8)
    })
}
