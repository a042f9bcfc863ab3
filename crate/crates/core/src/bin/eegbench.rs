use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use eegbench::cli::{self, ExperimentConfig};

#[derive(Parser)]
#[command(version, about = "EEGNet-family benchmark on artifact-filtered motor-imagery EEG")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic recordings of a config as EDF files.
    Generate { config: PathBuf },
    /// Filter, run FASTER and cache epochs.
    Preprocess { config: PathBuf },
    /// Run the configured experiments and write the fold table.
    Train { config: PathBuf },
    /// Significance matrices and rankings for a finished run.
    Compare { dir: PathBuf },
    /// Report tables for every run under a directory.
    Report { dir: PathBuf },
    /// The whole pipeline followed by the report.
    All { config: PathBuf },
}

fn run(command: Command) -> eegbench::Result<()> {
    match command {
        Command::Generate { config } => {
            for p in cli::generate(&ExperimentConfig::load(config)?)? {
                println!("{}", p.display());
            }
        }
        Command::Preprocess { config } => {
            let subjects = cli::preprocess_stage(&ExperimentConfig::load(config)?)?;
            for s in subjects {
                println!("{}: {} epochs x {} channels", s.name, s.epochs.len(), s.epochs.channels());
            }
        }
        Command::Train { config } => {
            let config = ExperimentConfig::load(config)?;
            let rows = cli::train_stage(&config)?;
            println!("{} fold rows in {}", rows.len(), config.output.join(cli::FOLDS_FILE).display());
        }
        Command::Compare { dir } => {
            for m in cli::compare_stage(&dir)? {
                for p in &m.pairs {
                    println!(
                        "{} {} {} vs {}: p = {:.3e} (level {})",
                        m.database, m.mode, m.networks[p.a], m.networks[p.b], p.adjusted_p, p.level
                    );
                }
            }
        }
        Command::Report { dir } => print!("{}", cli::emit_report(&dir)?.text()),
        Command::All { config } => {
            let out = cli::run_pipeline(&ExperimentConfig::load(config)?)?;
            print!("{}", cli::emit_report(&out.dir)?.text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Args::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
