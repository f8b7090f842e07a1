//! `parametrix`: transition densities by the backward parametrix and
//! perturbation stability reports, written as CSV.
//!
//! Exit codes: 0 success, 1 a bound or assumption check failed, 2 invalid
//! configuration, 3 numerical failure.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use parametrix_core::Error;

use config::{canonical_name, ModelSection, PairSection, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Evaluation(_)
            | Error::NonFiniteState { .. }
            | Error::UnsortedNodes
            | Error::NonSpd(_)
            | Error::QuadratureBudgetExceeded { .. }
            | Error::NonFiniteIntegrand { .. }
            | Error::NonPositiveArgument(_)
            | Error::NonFinitePath { .. }
            | Error::MaxDepthExceeded { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(name = "parametrix", version, about = "Parametrix transition densities and perturbation stability bounds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Audit ellipticity, Hölder, Lipschitz and growth constants of a model or pair.
    Check(Common),
    /// Sample the backward flow u ↦ θ_{u,s}(y).
    Flow(Common),
    /// Truncated parametrix series on a y-grid.
    Density(Common),
    /// L1 distance between the densities of a pair.
    Diff(Common),
    /// L1 and L∞ stability reports, optionally with lemma verifiers.
    Bounds(Common),
    /// Δ_{ε,b} surfaces of the oscillating-drift example, one CSV per ε.
    Experiment(Common),
}

#[derive(Args, Default)]
struct Common {
    /// TOML or JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file (a directory for `experiment`); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for grid evaluation.
    #[arg(long)]
    threads: Option<usize>,
    /// Built-in single model.
    #[arg(long)]
    model: Option<String>,
    /// Built-in perturbation pair (`oscillating` is accepted).
    #[arg(long)]
    pair: Option<String>,
    /// Model or pair parameter, KEY=VALUE; repeatable.
    #[arg(long = "param", value_parser = parse_param)]
    params: Vec<(String, f64)>,
    /// ε of the pair; repeat for a sweep (bounds, experiment).
    #[arg(long = "eps")]
    eps: Vec<f64>,
    #[arg(long)]
    q: Option<f64>,
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    s: Option<f64>,
    /// Start point, comma separated.
    #[arg(long, value_delimiter = ',')]
    x: Option<Vec<f64>>,
    /// Terminal point of the flow, comma separated.
    #[arg(long, value_delimiter = ',')]
    y: Option<Vec<f64>>,
    /// Series order N.
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    /// Lemma to verify (bounds); repeatable.
    #[arg(long = "lemma")]
    lemmas: Vec<String>,
    /// Where lemma rows go; defaults to `<out>.lemmas.csv`.
    #[arg(long)]
    lemma_out: Option<PathBuf>,
    /// Skip the L∞ rows of `bounds`.
    #[arg(long)]
    no_linf: bool,
}

fn parse_param(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    let v: f64 = v.trim().parse().map_err(|e| format!("`{v}`: {e}"))?;
    Ok((k.trim().to_string(), v))
}

/// Applies flag overrides on top of the config file.
fn resolve(name: &str, c: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if c.seed.is_some() {
        cfg.seed = c.seed;
    }
    if c.threads.is_some() {
        cfg.threads = c.threads;
    }
    if let Some(m) = &c.model {
        cfg.model = Some(ModelSection {
            name: Some(canonical_name(m).to_string()),
            ..ModelSection::default()
        });
    }
    if let Some(p) = &c.pair {
        cfg.pair = Some(PairSection {
            name: Some(canonical_name(p).to_string()),
            ..PairSection::default()
        });
    }
    let mut extra: Vec<(String, f64)> = c.params.clone();
    if let Some(q) = c.q {
        extra.push(("q".into(), q));
    }
    let sweep = name == "bounds" || name == "experiment";
    if !sweep {
        if let Some(e) = c.eps.first() {
            extra.push(("eps".into(), *e));
        }
    }
    for (k, v) in &extra {
        if let Some(p) = cfg.pair.as_mut().filter(|p| p.name.is_some()) {
            p.params.insert(k.clone(), *v);
        } else if let Some(m) = cfg.model.as_mut().filter(|m| m.name.is_some()) {
            m.params.insert(k.clone(), *v);
        } else if name != "experiment" {
            return Err(CliError::Config(format!("parameter `{k}` given without a built-in --model or --pair")));
        }
    }
    match name {
        "flow" => {
            let f = &mut cfg.flow;
            f.t = c.t.unwrap_or(f.t);
            f.s = c.s.unwrap_or(f.s);
            if let Some(y) = &c.y {
                f.y = y.clone();
            }
        }
        "density" => {
            let d = &mut cfg.density;
            d.t = c.t.unwrap_or(d.t);
            d.s = c.s.unwrap_or(d.s);
            d.order = c.order.unwrap_or(d.order);
            if let Some(x) = &c.x {
                d.x = x.clone();
            }
        }
        "diff" => {
            let d = &mut cfg.diff;
            d.t = c.t.unwrap_or(d.t);
            d.s = c.s.unwrap_or(d.s);
            d.order = c.order.unwrap_or(d.order);
        }
        "bounds" => {
            let b = &mut cfg.bounds;
            b.t = c.t.unwrap_or(b.t);
            b.s = c.s.unwrap_or(b.s);
            b.order = c.order.unwrap_or(b.order);
            b.dt = c.dt.unwrap_or(b.dt);
            if !c.eps.is_empty() {
                b.eps = c.eps.clone();
            }
            if !c.lemmas.is_empty() {
                b.lemmas = c.lemmas.clone();
            }
            if c.no_linf {
                b.linf = false;
            }
        }
        "experiment" => {
            let e = &mut cfg.experiment;
            if !c.eps.is_empty() {
                e.eps = c.eps.clone();
            }
            e.q = c.q.unwrap_or(e.q);
            if c.dt.is_some() {
                e.dt = c.dt;
            }
            if let Some(x) = &c.x {
                e.mu = x.clone();
            }
        }
        _ => {}
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool, CliError> {
    let (name, common) = match &cli.command {
        Command::Check(c) => ("check", c),
        Command::Flow(c) => ("flow", c),
        Command::Density(c) => ("density", c),
        Command::Diff(c) => ("diff", c),
        Command::Bounds(c) => ("bounds", c),
        Command::Experiment(c) => ("experiment", c),
    };
    let cfg = resolve(name, common)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let hash = cfg.hash(name);
    let out = common.out.as_deref();
    match name {
        "check" => commands::check(&cfg, &hash, out),
        "flow" => commands::flow(&cfg, &hash, out),
        "density" => commands::density(&cfg, &hash, out),
        "diff" => commands::diff(&cfg, &hash, out),
        "bounds" => commands::bounds(&cfg, &hash, out, common.lemma_out.as_deref()),
        _ => commands::experiment(&cfg, &hash, out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("parametrix: {e}");
            ExitCode::from(e.code())
        }
    }
}
