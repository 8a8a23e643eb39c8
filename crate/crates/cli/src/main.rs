use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use snomdp::experiment::{plot_data, run_experiment, ExperimentSpec};

#[derive(Parser)]
#[command(name = "snomdp", version, about = "Safe exploration experiments in grid MDPs")]
struct Cli {
    /// Number of (method, seed) cells to run concurrently.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Output directory, overriding the spec's `output_dir` (or the default
    /// `<dir>/plotdata` for `plotdata`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = LogLevel::Error)]
    log_level: LogLevel,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum LogLevel {
    Error,
    Info,
    Debug,
}

#[derive(Subcommand)]
enum Command {
    /// Execute every (method, seed) cell of a spec.
    Run { spec: PathBuf },
    /// Convert a directory of run logs into plot-ready CSV series.
    Plotdata { dir: PathBuf },
    /// Check a spec and print the resolved configuration.
    Validate { spec: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.log_level {
        LogLevel::Error => log::LevelFilter::Error,
        LogLevel::Info => log::LevelFilter::Info,
        LogLevel::Debug => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();

    let code = match cli.command {
        Command::Validate { spec } => match ExperimentSpec::load(&spec) {
            Ok(loaded) => {
                print!("{}", loaded.resolved_toml());
                0
            }
            Err(e) => {
                eprintln!("error: {e}");
                2
            }
        },
        Command::Run { spec } => match ExperimentSpec::load(&spec) {
            Err(e) => {
                eprintln!("error: {e}");
                2
            }
            Ok(loaded) => {
                let out = cli.out.unwrap_or_else(|| loaded.spec.output_dir.clone());
                match run_experiment(&loaded, &out, cli.jobs) {
                    Ok(table) => {
                        print!("{table}");
                        0
                    }
                    Err(e) => {
                        eprintln!("error: {e}");
                        e.exit_code()
                    }
                }
            }
        },
        Command::Plotdata { dir } => {
            let out = cli.out.unwrap_or_else(|| dir.join("plotdata"));
            match plot_data(&dir, &out) {
                Ok(written) => {
                    println!(
                        "wrote {} series, {} snapshots and {}",
                        written.series.len(),
                        written.snapshots.len(),
                        written.transitions.display()
                    );
                    0
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    1
                }
            }
        }
    };
    ExitCode::from(code as u8)
}
