use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use regime_kit::experiment::{
    format_summary, read_results, run_fit, run_simulation, summarize, write_summary_csv, ExperimentConfig, RunOptions,
};

#[derive(Parser)]
#[command(
    name = "regime-kit",
    version,
    about = "Estimate treatment regimes and run simulation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit every configured method on one dataset and write the fitted rules.
    Fit(RunArgs),
    /// Run a replicated simulation experiment.
    Simulate(RunArgs),
    /// Summarize a results file per method.
    Summarize {
        /// A results.csv file, or a directory containing one.
        path: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Worker threads for replications.
    #[arg(long, env = "REGIME_KIT_JOBS")]
    jobs: Option<usize>,
    /// Base seed, overriding scenario.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding output.dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load(args: &RunArgs) -> Result<(ExperimentConfig, String, RunOptions), String> {
    let text = fs::read_to_string(&args.config).map_err(|e| format!("{}: {e}", args.config.display()))?;
    let config = ExperimentConfig::from_toml_str(&text).map_err(|e| format!("{}: {e}", args.config.display()))?;
    let jobs = args
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let opts = RunOptions {
        jobs,
        seed: args.seed,
        out_dir: args.out.clone(),
    };
    Ok((config, text, opts))
}

fn simulate(args: &RunArgs) -> ExitCode {
    let (config, text, opts) = match load(args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match run_simulation(&config, &text, &opts) {
        Ok(report) => {
            println!("wrote {}", report.results_path.display());
            print!("{}", format_summary(&summarize(&report.rows)));
            if report.failed > 0 {
                eprintln!("{} replication rows failed; see the error column", report.failed);
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn fit(args: &RunArgs) -> ExitCode {
    let (config, _, opts) = match load(args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match run_fit(&config, &opts) {
        Ok(results) => {
            let mut failed = false;
            for (method, res) in results {
                match res {
                    Ok(path) => println!("{method}: wrote {}", path.display()),
                    Err(e) => {
                        failed = true;
                        eprintln!("{method}: {e}");
                    }
                }
            }
            if failed {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn summarize_cmd(path: &Path, out: Option<&Path>) -> ExitCode {
    let file = if path.is_dir() {
        path.join("results.csv")
    } else {
        path.to_path_buf()
    };
    let rows = match read_results(&file) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {}: {e}", file.display());
            return ExitCode::from(1);
        }
    };
    if rows.is_empty() {
        eprintln!("warning: {} has no result rows", file.display());
    }
    let summary = summarize(&rows);
    let target = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| file.with_file_name("summary.csv"));
    if let Err(e) = write_summary_csv(&target, &summary) {
        eprintln!("error: {}: {e}", target.display());
        return ExitCode::from(1);
    }
    print!("{}", format_summary(&summary));
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Command::Fit(args) => fit(args),
        Command::Simulate(args) => simulate(args),
        Command::Summarize { path, out } => summarize_cmd(path, out.as_deref()),
    }
}
