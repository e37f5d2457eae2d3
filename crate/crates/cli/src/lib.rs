//! Command-line front end: scenario files, output layout and the
//! `simulate`, `meanfield`, `compare`, `graph` and `validate` commands.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use socnet_core::parallel::{with_threads, Execution};

use config::{Overrides, ScenarioConfig};
use error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "socnet", version, about = "Spatial social-network particle simulator")]
pub struct Cli {
    /// Scenario file (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub replicas: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; rayon's default when omitted.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the particle system for every replica.
    Simulate,
    /// Solve the deterministic density equation.
    Meanfield,
    /// Distance between rescaled replicas and the density, per initial size.
    Compare,
    /// Graph exports of a saved state.
    Graph {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        radius: Option<f64>,
    },
    /// Check a scenario file and print a summary.
    Validate,
}

fn load(cli: &Cli) -> CliResult<ScenarioConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| error::CliError::Config("--config is required".into()))?;
    let (mut cfg, _) = ScenarioConfig::load(path)?;
    cfg.apply(&Overrides {
        seed: cli.seed,
        replicas: cli.replicas,
        out: cli.out.clone(),
    });
    cfg.validate()?;
    Ok(cfg)
}

/// Execute a parsed command line; returns the text printed on success.
pub fn run(cli: &Cli) -> CliResult<String> {
    if cli.threads == Some(0) {
        return Err(error::CliError::Config("--threads must be >= 1".into()));
    }
    let exec = Execution::default();
    with_threads(cli.threads, || match &cli.command {
        Command::Simulate => {
            let cfg = load(cli)?;
            let reports = commands::simulate(&cfg, exec)?;
            let extinct = reports.iter().filter(|r| r.extinct_at.is_some()).count();
            Ok(format!(
                "simulated {} replica(s), {extinct} extinct; output in {}",
                reports.len(),
                cfg.out_dir().display()
            ))
        }
        Command::Meanfield => {
            let cfg = load(cli)?;
            let sol = commands::meanfield(&cfg, exec)?;
            let (t, m) = sol.mass.last().copied().unwrap_or_default();
            Ok(format!("mass {m:.6} at t = {t}; output in {}", cfg.out_dir().display()))
        }
        Command::Compare => {
            let cfg = load(cli)?;
            let report = commands::compare(&cfg, exec)?;
            let mut text = String::from("n\tmedian L1\n");
            for row in &report.rows {
                text.push_str(&format!("{}\t{:.6}\n", row.n, row.median));
            }
            text.push_str(&format!("output in {}", cfg.out_dir().display()));
            Ok(text)
        }
        Command::Graph { state, radius } => {
            let cfg = match &cli.config {
                Some(_) => Some(load(cli)?),
                None => None,
            };
            let dir = commands::graph_of_state(state, *radius, cfg.as_ref(), cli.out.clone())?;
            Ok(format!("graph written to {}", dir.display()))
        }
        Command::Validate => {
            let cfg = load(cli)?;
            let lines: Vec<String> = commands::describe(&cfg)
                .into_iter()
                .map(|(k, v)| format!("{k}: {v}"))
                .collect();
            Ok(format!("ok\n{}", lines.join("\n")))
        }
    })
}

/// Parse `args`, run, and map the outcome to a process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(text) => {
            let _ = writeln!(std::io::stdout(), "{text}");
            0
        }
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            e.exit_code()
        }
    }
}
