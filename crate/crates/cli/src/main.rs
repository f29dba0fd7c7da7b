use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use wqms_cli::commands::{self, AnalyzeFlags, ControlFlags, PlanFlags, SimulateFlags};
use wqms_cli::config::{ScenarioConfig, CONFIG_ENV};
use wqms_cli::golden::{self, GoldenMode};
use wqms_cli::output::OutputDir;
use wqms_cli::CliError;

/// Water-quality modelling and booster control for distribution networks.
#[derive(Parser)]
#[command(name = "wqms", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// scenario config file
    #[arg(long, short, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// output directory (overrides the config)
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// record outputs as the regression reference, or compare against it
    #[arg(long, value_enum)]
    golden: Option<GoldenMode>,
    #[command(flatten)]
    plan: PlanFlags,
}

#[derive(Subcommand)]
enum Command {
    /// Choose the water-quality step and pipe grids
    Plan {
        #[command(flatten)]
        common: Common,
    },
    /// Run the water-quality model over the hydraulic trace
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: SimulateFlags,
    },
    /// Controllability analysis and booster weights
    Analyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: AnalyzeFlags,
    },
    /// Closed-loop booster control
    Control {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: ControlFlags,
    },
    /// Write a built-in scenario and its config
    Fixture {
        /// fixture name; `--list` shows them
        #[arg(required_unless_present = "list")]
        name: Option<String>,
        /// target directory
        #[arg(default_value = ".")]
        dir: PathBuf,
        #[arg(long)]
        list: bool,
    },
}

fn run_with(
    common: &Common,
    name: &str,
    body: impl FnOnce(&ScenarioConfig, &mut OutputDir) -> Result<String, wqms_core::Error>,
) -> Result<(), CliError> {
    let path = common.config.as_ref().ok_or(CliError::NoConfig)?;
    let mut cfg = ScenarioConfig::load(path)?;
    if let Some(o) = &common.output {
        cfg.output = o.clone();
    }
    common.plan.apply(&mut cfg.discretization);
    if let Some(t) = common.plan.transport {
        cfg.control.transport = t;
    }
    cfg.validate()?;
    let mut out = OutputDir::open(&cfg.output)?;
    let summary = body(&cfg, &mut out)?;
    println!("{name}: {summary}");
    match common.golden {
        Some(GoldenMode::Record) => {
            let dir = cfg.golden_dir(name);
            golden::record(&out, &dir)?;
            println!(
                "recorded {} file(s) in {}",
                out.files().len(),
                dir.display()
            );
        }
        Some(GoldenMode::Compare) => {
            let diffs = golden::compare(&out, &cfg.golden_dir(name), &cfg.golden)?;
            if !diffs.is_empty() {
                return Err(CliError::Golden(diffs));
            }
            println!("matches the recording");
        }
        None => {}
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Plan { common } => run_with(&common, "plan", commands::plan),
        Command::Simulate { common, flags } => run_with(&common, "simulate", |c, o| {
            commands::simulate_cmd(c, &flags, o)
        }),
        Command::Analyze { common, flags } => {
            run_with(&common, "analyze", |c, o| commands::analyze(c, &flags, o))
        }
        Command::Control { common, flags } => {
            run_with(&common, "control", |c, o| commands::control(c, &flags, o))
        }
        Command::Fixture { list: true, .. } => {
            for n in wqms_core::fixtures::NAMES {
                println!("{n}");
            }
            Ok(())
        }
        Command::Fixture { name, dir, .. } => {
            let name = name.expect("required unless --list");
            println!("{}", commands::fixture(&name, &dir)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
