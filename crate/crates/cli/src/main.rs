//! `dcsim`: run scenarios, analyze their artifacts and list bundled presets.
//!
//! Exit codes: 0 success, 2 configuration error, 3 engine error,
//! 4 analysis error. Failures print `error[<Code>]: <message>` on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dcsim_core::error::ModelError;
use dcsim_core::pipeline::{analyze, read_config, run_scenario, PipelineError, RunOptions, MANIFEST_FILE};
use dcsim_core::presets::PRESETS;

#[derive(Debug, Parser)]
#[command(name = "dcsim", version, about = "Defect charge-state simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario file or bundled preset and write its artifacts.
    Run {
        /// Scenario TOML path, or a preset name.
        config: String,
        /// Output directory; defaults to `runs/<scenario name>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// `dotted.path=value` assignment; repeatable.
        #[arg(long = "override", value_name = "K=V")]
        overrides: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Variants to run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Evaluate an analysis document against a run manifest.
    Analyze { manifest: PathBuf, spec: PathBuf },
    /// List bundled presets.
    Presets,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Run {
            config,
            out,
            overrides,
            seed,
            jobs,
        } => {
            let text = read_config(&config)?;
            let out = match out {
                Some(o) => o,
                None => {
                    let name = dcsim_core::scenario::load_scenario(&text, &[])?.scenario.name;
                    PathBuf::from("runs").join(name)
                }
            };
            let opts = RunOptions { overrides, seed, jobs };
            for r in run_scenario(&text, &out, &opts)? {
                let name = if r.variant.is_empty() {
                    r.manifest.scenario.clone()
                } else {
                    r.variant
                };
                println!(
                    "{name}: {} artifacts, t = {} s, {:.1} s wall -> {}",
                    r.manifest.artifacts.len(),
                    r.manifest.final_time,
                    r.manifest.finished - r.manifest.started,
                    r.dir.join(MANIFEST_FILE).display()
                );
            }
            Ok(())
        }
        Command::Analyze { manifest, spec } => {
            let text = std::fs::read_to_string(&spec)
                .map_err(|e| ModelError::config("analysis", format!("cannot read '{}': {e}", spec.display())))?;
            for (_, path) in analyze(&manifest, &text)? {
                println!("{}", path.display());
            }
            Ok(())
        }
        Command::Presets => {
            let width = PRESETS.iter().map(|p| p.name.len()).max().unwrap_or(0);
            for p in PRESETS {
                println!("{:width$}  {}", p.name, p.description);
            }
            Ok(())
        }
    }
}
