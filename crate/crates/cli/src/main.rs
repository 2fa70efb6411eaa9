use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use overlay_rl::data::{synthesize, write_csv, RegimeSpec};
use overlay_rl::experiment::{run_experiment, write_reports, ExperimentSpec};
use overlay_rl::scenarios::ScenarioSpec;

#[derive(Parser)]
#[command(name = "overlay-rl", version, about = "Train and evaluate hedging-overlay allocation models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its reports.
    Run(Common),
    /// Check an experiment config without running it.
    Validate(Common),
    /// Write a synthetic price series as CSV.
    Synthesize(Common),
}

#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(short, long)]
    workers: Option<usize>,
    /// Seed override.
    #[arg(short, long)]
    seed: Option<u64>,
}

enum Failure {
    Validation(Vec<String>),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Validation(vec![format!("cannot read {}: {e}", path.display())]))?;
    toml::from_str(&text).map_err(|e| Failure::Validation(vec![format!("{}: {e}", path.display())]))
}

fn load_spec(c: &Common) -> Result<ExperimentSpec, Failure> {
    let path = c
        .config
        .as_ref()
        .ok_or_else(|| Failure::Validation(vec!["--config is required".into()]))?;
    let mut spec: ExperimentSpec = read_toml(path)?;
    // relative data paths are taken from the config's directory
    if let (Some(csv), Some(dir)) = (&spec.data.csv, path.parent()) {
        if csv.is_relative() {
            spec.data.csv = Some(dir.join(csv));
        }
    }
    if c.seed.is_some() {
        spec.seed = c.seed;
    }
    Ok(spec)
}

fn set_workers(workers: Option<usize>) -> Result<(), Failure> {
    if let Some(n) = workers {
        if n == 0 {
            return Err(Failure::Validation(vec!["--workers must be positive".into()]));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("building the worker pool")?;
    }
    Ok(())
}

fn run(c: &Common) -> Result<(), Failure> {
    let spec = load_spec(c)?;
    let problems = spec.validate();
    if !problems.is_empty() {
        return Err(Failure::Validation(problems));
    }
    set_workers(c.workers)?;
    let out = c
        .out
        .clone()
        .or_else(|| spec.output.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let report = run_experiment(&spec).context("running the experiment")?;
    write_reports(&report, &spec, &out).with_context(|| format!("writing reports to {}", out.display()))?;
    println!("{:<40} {:>10} {:>10} {:>10} {:>10}", "model", "return", "sortino", "sharpe", "max_dd");
    for r in &report.runs {
        let m = &r.result.overall;
        println!(
            "{:<40} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            r.label, m.annualized_return, m.sortino, m.sharpe, m.max_drawdown
        );
    }
    println!("reports written to {}", out.display());
    Ok(())
}

fn validate(c: &Common) -> Result<(), Failure> {
    let spec = load_spec(c)?;
    let problems = spec.validate();
    if !problems.is_empty() {
        return Err(Failure::Validation(problems));
    }
    println!("ok");
    Ok(())
}

/// Either generator; the default is the standard two-regime scenario.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthesizeConfig {
    scenario: Option<ScenarioSpec>,
    regime: Option<RegimeSpec>,
}

fn synthesize_cmd(c: &Common) -> Result<(), Failure> {
    let cfg: SynthesizeConfig = match &c.config {
        Some(p) => read_toml(p)?,
        None => SynthesizeConfig::default(),
    };
    let series = match (cfg.scenario, cfg.regime) {
        (Some(_), Some(_)) => {
            return Err(Failure::Validation(vec!["give either [scenario] or [regime], not both".into()]));
        }
        (None, Some(mut r)) => {
            if let Some(s) = c.seed {
                r.seed = s;
            }
            r.validate().map_err(|e| Failure::Validation(vec![e.to_string()]))?;
            synthesize(&r).context("generating the series")?
        }
        (scenario, None) => {
            let mut s = scenario.unwrap_or_default();
            if let Some(seed) = c.seed {
                s.seed = seed;
            }
            s.generate().map_err(|e| Failure::Validation(vec![e.to_string()]))?
        }
    };
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join("data.csv");
    write_csv(&series, &path).with_context(|| format!("writing {}", path.display()))?;
    println!("{} rows written to {}", series.len(), path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(c) => run(c),
        Command::Validate(c) => validate(c),
        Command::Synthesize(c) => synthesize_cmd(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(problems)) => {
            for p in problems {
                eprintln!("invalid: {p}");
            }
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
