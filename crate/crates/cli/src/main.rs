use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use storm_core::experiment::{
    aggregate, analyze, output_dir, parse_pairs, preset_names, run_experiment, ExperimentSpec,
};

/// Noise-robust training experiments with a meta-learned loss rescaler.
#[derive(Parser)]
#[command(name = "storm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every seed, then write the aggregate report.
    Run(SpecArgs),
    /// Parse and validate a config, printing the resolved spec.
    Validate(SpecArgs),
    /// Rebuild the aggregate report of an existing experiment directory.
    Aggregate {
        dir: PathBuf,
    },
    /// Write ROC, weight-progression and filter-timing tables from run logs.
    Analyze {
        dir: PathBuf,
    },
    /// List the built-in presets.
    Presets,
}

#[derive(Args)]
struct SpecArgs {
    /// Flat `key = value` config file.
    config: Option<PathBuf>,
    /// Preset name, applied before all other keys.
    #[arg(long)]
    preset: Option<String>,
    /// Extra `key=value` pairs; they override the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Directory that relative data paths resolve against.
    #[arg(long, env = "STORM_DATA_DIR", default_value = ".")]
    data_dir: PathBuf,
}

impl SpecArgs {
    fn spec(&self) -> Result<ExperimentSpec> {
        let text = match &self.config {
            Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        let mut overrides = Vec::new();
        if let Some(p) = &self.preset {
            overrides.push(("preset".to_string(), p.clone()));
        }
        for s in &self.set {
            let pairs = parse_pairs(s)?;
            if pairs.len() != 1 {
                bail!("--set expects one key=value pair, got {s:?}");
            }
            overrides.extend(pairs);
        }
        Ok(ExperimentSpec::parse(&text, &overrides)?)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let report = match cli.command {
        Command::Validate(a) => {
            print!("{}", a.spec()?.to_config_string());
            return Ok(ExitCode::SUCCESS);
        }
        Command::Presets => {
            for p in preset_names() {
                println!("{p}");
            }
            return Ok(ExitCode::SUCCESS);
        }
        Command::Analyze { dir } => {
            let a = analyze(&dir)?;
            for m in &a.modes {
                log::info!("{}: {} runs analysed", m.mode, m.runs);
            }
            return Ok(ExitCode::SUCCESS);
        }
        Command::Run(a) => {
            let spec = a.spec()?;
            let dir = output_dir(&spec);
            log::info!("writing {}", dir.display());
            run_experiment(&spec, &dir, &a.data_dir)?
        }
        Command::Aggregate { dir } => aggregate(&dir)?,
    };
    print!("{}", report.to_text());
    Ok(if report.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
