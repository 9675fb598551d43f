use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use occplan_cli::{
    cmd_eval, cmd_gen, cmd_rollout, cmd_rollout_manifest, cmd_serve, load_config, load_scenario, ActionSource,
    CliError, CliResult, RolloutArgs, RunManifest,
};
use occplan_core::synthworld::Difficulty;
use occplan_core::world::WorldKind;

#[derive(Parser)]
#[command(name = "occplan", version, about = "Occupancy forecasting and planning engine")]
struct Cli {
    /// JSON config overriding module defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate seeded scenario files.
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value = "dense")]
        difficulty: Difficulty,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll a world forward and dump frames, traces and a manifest.
    Rollout {
        #[arg(long, required_unless_present = "manifest")]
        scenario: Option<PathBuf>,
        #[arg(long, default_value = "oracle")]
        world: WorldKind,
        /// planner | file:PATH | command:NAME
        #[arg(long, default_value = "planner")]
        actions: ActionSource,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Weight checkpoint for the neural world.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Re-run a previous manifest.json instead of the flags above.
        #[arg(long, conflicts_with = "scenario")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare predicted and ground-truth frame dumps; prints a JSON report.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Serve the session API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        scenarios: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.cmd {
        Cmd::Gen {
            seed,
            count,
            difficulty,
            out,
        } => {
            let files = cmd_gen(seed, count, difficulty, &out)?;
            let names: Vec<String> = files.iter().map(|p| p.display().to_string()).collect();
            emit(&serde_json::json!({ "files": names }).to_string());
        }
        Cmd::Rollout {
            scenario,
            world,
            actions,
            horizon,
            seed,
            checkpoint,
            manifest,
            out,
        } => {
            let m = match manifest {
                Some(path) => {
                    if cli.config.is_some() {
                        return Err(CliError::Usage("--config cannot override a manifest".into()));
                    }
                    cmd_rollout_manifest(&RunManifest::load(&path)?, &out)?
                }
                None => {
                    let path = scenario.ok_or_else(|| CliError::Usage("--scenario is required".into()))?;
                    let args = RolloutArgs {
                        scenario: load_scenario(&path)?,
                        scenario_path: Some(path),
                        world,
                        actions,
                        horizon,
                        seed,
                        config: load_config(cli.config.as_deref())?,
                        checkpoint,
                    };
                    cmd_rollout(&args, &out)?
                }
            };
            emit(
                &serde_json::json!({"manifest": out.join("manifest.json").display().to_string(), "horizon": m.horizon})
                    .to_string(),
            );
        }
        Cmd::Eval { pred, gt } => {
            let cfg = load_config(cli.config.as_deref())?;
            let report = cmd_eval(&pred, &gt, &cfg)?;
            emit(&serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Cmd::Serve { port, scenarios } => {
            cmd_serve(port, scenarios, load_config(cli.config.as_deref())?)?;
        }
    }
    Ok(())
}

/// Prints a line to stdout; a closed pipe is not an error.
fn emit(line: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("occplan: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
