//! `agmonlab` command-line front end.

mod config;
mod output;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use agmonlab::Point;
use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigError, ExperimentConfig};
use crate::output::OutputDir;

#[derive(Parser)]
#[command(name = "agmonlab", version, about = "Decay experiments for magnetic Schrödinger operators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `sampling.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, env = "AGMONLAB_THREADS")]
    threads: Option<usize>,
    /// Overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Maximal function of V + |B| as an AGF1 field plus a summary.
    ComputeM {
        #[command(flatten)]
        common: Common,
    },
    /// Agmon distance from a source set, with a CSV table of target rows.
    Distance {
        #[command(flatten)]
        common: Common,
        /// Source point `x,y,z`; repeat for a set.
        #[arg(long = "source", value_parser = parse_point, allow_hyphen_values = true)]
        sources: Vec<Point>,
        /// Target point `x,y,z`; repeatable.
        #[arg(long = "target", value_parser = parse_point, allow_hyphen_values = true)]
        targets: Vec<Point>,
    },
    /// Fundamental-solution columns, and resolvent columns for each t in `operator.t_list`.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long = "source", value_parser = parse_point, allow_hyphen_values = true)]
        sources: Vec<Point>,
    },
    /// Runs the configured checks; exit code 0 iff no check fails.
    Verify {
        #[command(flatten)]
        common: Common,
    },
    /// Summarises a verify output directory.
    Report {
        /// Config whose `output.dir` holds the reports (or pass --out).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_point(s: &str) -> Result<Point, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("bad coordinate `{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    <[f64; 3]>::try_from(parts).map_err(|_| "expected three comma-separated coordinates".to_string())
}

/// Config plus CLI overrides, echoed to stderr.
fn resolve(common: &Common) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.sampling.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output.dir = out.clone();
    }
    eprintln!("# resolved config, hash {}\n{}", cfg.hash(), cfg.to_toml());
    Ok(cfg)
}

const EXIT_FAIL: u8 = 1;
const EXIT_PRECONDITION: u8 = 2;

enum Outcome {
    Pass,
    Fail,
}

fn with_output<F>(common: &Common, name: &'static str, f: F) -> anyhow::Result<Outcome>
where
    F: FnOnce(&ExperimentConfig, &mut OutputDir) -> anyhow::Result<Outcome> + Send,
{
    let cfg = resolve(common)?;
    let mut out = OutputDir::create(&cfg.output.dir, &cfg, name)?;
    let run = || -> anyhow::Result<Outcome> {
        let outcome = f(&cfg, &mut out)?;
        out.finish(&cfg)?;
        Ok(outcome)
    };
    match common.threads {
        Some(n) => agmonlab::par::with_threads(n, run),
        None => run(),
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<Outcome> {
    match cli.command {
        Command::ComputeM { common } => with_output(&common, "compute-m", |cfg, out| {
            pipeline::compute_m(cfg, out)?;
            Ok(Outcome::Pass)
        }),
        Command::Distance { common, sources, targets } => with_output(&common, "distance", |cfg, out| {
            pipeline::distance(cfg, out, &sources, &targets)?;
            Ok(Outcome::Pass)
        }),
        Command::Solve { common, sources } => with_output(&common, "solve", |cfg, out| {
            pipeline::solve_columns(cfg, out, &sources)?;
            Ok(Outcome::Pass)
        }),
        Command::Verify { common } => with_output(&common, "verify", |cfg, out| {
            let pass = pipeline::verify(cfg, out)?;
            Ok(if pass { Outcome::Pass } else { Outcome::Fail })
        }),
        Command::Report { config, out } => {
            let dir = match (out, config) {
                (Some(d), _) => d,
                (None, Some(c)) => ExperimentConfig::load(&c)?.output.dir,
                (None, None) => return Err(ConfigError("report needs --out or --config".into()).into()),
            };
            let (text, pass) = pipeline::report(&dir)?;
            print!("{text}");
            std::fs::write(dir.join("report.txt"), &text)?;
            Ok(if pass { Outcome::Pass } else { Outcome::Fail })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Fail) => ExitCode::from(EXIT_FAIL),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_PRECONDITION)
        }
    }
}
