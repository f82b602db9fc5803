use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kdml::experiment::{emit_plots, run_experiment, tables, ExperimentError, ExperimentSpec, RunOptions};

/// Teacher/student distillation and mutual-learning experiments.
#[derive(Debug, Parser)]
#[command(name = "kdml", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every (mode, seed) cell of an experiment file and write the tables.
    Run {
        spec: PathBuf,
        /// Cells trained concurrently.
        #[arg(long, short, default_value_t = 1)]
        jobs: usize,
        /// Output directory.
        #[arg(long, env = "KDML_OUT", default_value = "runs")]
        out: PathBuf,
        /// Retrain cells even if a report already exists.
        #[arg(long)]
        fresh: bool,
    },
    /// Print the aggregate table(s) of the reports under a directory.
    Table {
        runs_dir: PathBuf,
        /// Print CSV instead of the aligned table.
        #[arg(long)]
        csv: bool,
    },
    /// Write parameter-count and accuracy SVGs for the reports under a directory.
    Plot { runs_dir: PathBuf },
}

fn run(cli: Cli) -> Result<String, ExperimentError> {
    let mut text = String::new();
    match cli.command {
        Command::Run { spec, jobs, out, fresh } => {
            let spec = ExperimentSpec::from_file(&spec)?;
            let outcome = run_experiment(&spec, &RunOptions { out, jobs, fresh })?;
            text = outcome.table;
            eprintln!(
                "{} runs ({} cached), results in {}",
                outcome.reports.len(),
                outcome.cached,
                outcome.dir.display()
            );
        }
        Command::Table { runs_dir, csv } => {
            let rendered = tables(&runs_dir)?;
            let parts: Vec<&str> = rendered.iter().map(|(t, c)| if csv { c.as_str() } else { t.as_str() }).collect();
            text = parts.join("\n");
        }
        Command::Plot { runs_dir } => {
            for path in emit_plots(&runs_dir)? {
                text.push_str(&format!("{}\n", relative(&path, &runs_dir).display()));
            }
        }
    }
    Ok(text)
}

fn relative<'a>(path: &'a Path, base: &Path) -> &'a Path {
    path.strip_prefix(base).unwrap_or(path)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(text) => {
            // a closed pipe (e.g. `| head`) is not an error
            let _ = std::io::stdout().write_all(text.as_bytes());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
