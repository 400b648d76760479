use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pareidolia_core::fixture::{self, FixtureSpec};
use pareidolia_core::pipeline::{self, Experiment, PipelineError, RunOptions, Stage};

#[derive(Parser)]
#[command(name = "pareidolia", version, about = "Face/object probe experiments on frozen CNN backbones")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one stage, or every stage in order.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        stage: Stage,
        /// Rebuild feature caches even when they look valid.
        #[arg(long)]
        force: bool,
        /// Worker threads (defaults to the number of CPUs).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Write the desk-scale synthetic fixture.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Run { manifest, stage, force, jobs } => {
            if let Some(n) = jobs {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n.max(1))
                    .build_global()
                    .map_err(|e| PipelineError::Other(e.to_string()))?;
            }
            let exp = Experiment::load(&manifest)?;
            pipeline::run(&exp, stage, RunOptions { force })?;
            eprintln!("{}: done, artifacts in {}", stage.as_str(), exp.output_dir.display());
            Ok(())
        }
        Command::Fixture { out, seed } => {
            let mut spec = FixtureSpec::default();
            if let Some(s) = seed {
                spec.seed = s;
            }
            let f =
                fixture::generate(&out, &spec).map_err(|e| PipelineError::Other(format!("{}: {e}", out.display())))?;
            eprintln!("fixture written; run with --manifest {}", f.experiment_manifest.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
