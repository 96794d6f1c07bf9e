use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dkmpc_core::tasks::Task;
use koopctl::pipeline::{self, Controller};
use koopctl::{CliResult, RunConfig};

/// Deep Koopman MPC experiments on a simulated soft arm.
#[derive(Parser)]
#[command(name = "koopctl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect the random-actuation dataset.
    Collect(Common),
    /// Train one or both model families from the dataset.
    Train(Common),
    /// Track the circle and letter paths (or the task given with --task).
    Track(Common),
    /// Track the five square targets.
    Targets(Common),
    /// Aggregate all reports of the run into a comparison table.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Overrides the configured global seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// dk or rbf; both when omitted.
    #[arg(long, value_parser = clap::value_parser!(Controller))]
    controller: Option<Controller>,
    /// O, T, H, U or square.
    #[arg(long, value_parser = clap::value_parser!(Task))]
    task: Option<Task>,
}

impl Common {
    fn load(&self) -> CliResult<RunConfig> {
        let mut config = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        Ok(config)
    }

    fn controllers(&self) -> Vec<Controller> {
        self.controller.map_or_else(|| Controller::ALL.to_vec(), |c| vec![c])
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Collect(a) => {
            let config = a.load()?;
            println!("{}", pipeline::cmd_collect(&config)?.display());
        }
        Command::Train(a) => {
            let config = a.load()?;
            for p in pipeline::cmd_train(&config, &a.controllers())? {
                println!("{}", p.display());
            }
        }
        Command::Track(a) => {
            let config = a.load()?;
            let tasks = a.task.map_or_else(|| vec![Task::O, Task::T, Task::H, Task::U], |t| vec![t]);
            print_reports(&pipeline::cmd_track(&config, &a.controllers(), &tasks)?);
        }
        Command::Targets(a) => {
            let config = a.load()?;
            print_reports(&pipeline::cmd_track(&config, &a.controllers(), &[Task::Square])?);
        }
        Command::Report(a) => {
            let config = a.load()?;
            print!("{}", pipeline::cmd_report(&config)?.to_table());
        }
    }
    Ok(())
}

fn print_reports(reports: &[dkmpc_core::tasks::TrackingReport]) {
    for r in reports {
        print!("{:<4} {:<6} avg {:>8.3} mm  max {:>8.3} mm", r.controller, r.task.label(), r.avg_error, r.max_error);
        if !r.dwell_end_errors.is_empty() {
            let d: Vec<String> = r.dwell_end_errors.iter().map(|e| format!("{e:.2}")).collect();
            print!("  dwell ends [{}] mm", d.join(", "));
        }
        println!();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("koopctl: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
