//! `crl`: batch front end for simulation, Monte Carlo evaluation,
//! observability sweeps and result analysis. Outputs are CSV or JSON.

mod sweep;

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use crl_core::analysis::{
    bootstrap_compare, compute_metrics, export_report, load_trials, metric_samples, save_trials, split_step,
    trial_metrics, write_trial_csv, Metric, Normalization, ReportOptions,
};
use crl_core::filters::{flop_estimate, FilterKind};
use crl_core::models::SchemeKind;
use crl_core::simulation::{
    comparison_methods, run_monte_carlo_methods, run_trial, CovarianceMode, FilterSpec, RunConfig, UncertaintyLevel,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

#[derive(Parser)]
#[command(name = "crl", version, about = "Cooperative relative localization laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one trial and print its metrics as JSON.
    Simulate(SimulateArgs),
    /// Run trials over uncertainty levels and write trial CSVs and a report.
    Montecarlo(MonteCarloArgs),
    /// Rank of the observability matrix along the nominal trajectories.
    Observability(ObservabilityArgs),
    /// Pairwise bootstrap test between two methods of a saved run.
    Bootstrap(BootstrapArgs),
    /// Recompute metrics, tests and statistics of a saved run.
    Report(ReportArgs),
    /// Flop count of one estimation step.
    Flops(FlopsArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration, or `paper-default`.
    #[arg(long, default_value = "paper-default")]
    config: String,
    #[arg(long)]
    scheme: Option<SchemeKind>,
    /// ekf, mlvc, mvc, mgc, optionally with a -1it suffix.
    #[arg(long)]
    filter: Option<FilterSpec>,
    #[arg(long)]
    mode: Option<CovarianceMode>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config).with_context(|| format!("loading config '{}'", self.config))?;
        if let Some(s) = self.scheme {
            cfg.scheme = s;
        }
        if let Some(f) = self.filter {
            cfg.filter = f;
        }
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Uncertainty level q: heading bound q·10°, position bound q/2 m.
    #[arg(long)]
    q: Option<f64>,
    /// Per-step trial CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MonteCarloArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Number of levels, run at q = 1..=levels.
    #[arg(long, default_value_t = 6)]
    levels: usize,
    /// Explicit comma-separated q values; overrides --levels.
    #[arg(long, value_delimiter = ',')]
    q: Vec<f64>,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long)]
    out: PathBuf,
    /// Base seed; trial seeds are derived from it, the level and the trial.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run the standard method comparison instead of the configured method.
    #[arg(long)]
    compare: bool,
    #[command(flatten)]
    report: ReportFlags,
}

#[derive(Args)]
struct ReportFlags {
    #[arg(long, default_value = "paper-literal")]
    normalization: Normalization,
    #[arg(long, default_value_t = 10_000)]
    resamples: usize,
    /// Seed of the bootstrap resampling.
    #[arg(long = "bootstrap-seed", default_value_t = 0)]
    bootstrap_seed: u64,
}

impl ReportFlags {
    fn options(&self) -> ReportOptions {
        ReportOptions {
            normalization: self.normalization,
            n_resamples: self.resamples,
            seed: self.bootstrap_seed,
        }
    }
}

#[derive(Args)]
struct ObservabilityArgs {
    #[arg(long, default_value = "paper-default")]
    config: String,
    #[arg(long, default_value = "fcrl")]
    scheme: SchemeKind,
    /// Lie-derivative order of the stack (0, 1 or 2).
    #[arg(long, default_value_t = 2)]
    order: usize,
    /// Keep every n-th step.
    #[arg(long, default_value_t = 1)]
    every: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BootstrapArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    a: String,
    #[arg(long)]
    b: String,
    #[arg(long, default_value = "ss_er_p")]
    metric: Metric,
    #[arg(long, default_value = "smart")]
    mode: CovarianceMode,
    #[arg(long, default_value_t = 10_000)]
    resamples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "paper-literal")]
    normalization: Normalization,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    report: ReportFlags,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long)]
    scheme: SchemeKind,
    /// ekf, or mlvc (any kernel filter).
    #[arg(long)]
    filter: FilterKind,
    #[arg(long)]
    ni: u64,
    #[arg(long, default_value_t = 0)]
    tm: u64,
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    cfg.seed = args.seed;
    if let Some(q) = args.q {
        cfg.uncertainty = UncertaintyLevel::from_q(q);
        cfg.validate()?;
    }
    let record = run_trial(&cfg)?;
    if let Some(path) = &args.out {
        write_trial_csv(&record, path)?;
    }
    let k0 = split_step(cfg.ts);
    let metrics = |n| compute_metrics(&record, k0, n).ok();
    let out = json!({
        "method": record.method,
        "mode": record.mode,
        "seed": record.seed,
        "config_digest": record.config_digest,
        "steps": record.steps.len(),
        "failure": record.failure,
        "metrics": metrics(Normalization::PaperLiteral),
        "metrics_per_sample": metrics(Normalization::PerSample),
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn montecarlo(args: MonteCarloArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let qs: Vec<f64> = if args.q.is_empty() {
        (1..=args.levels).map(|q| q as f64).collect()
    } else {
        args.q.clone()
    };
    if qs.is_empty() || args.trials == 0 {
        bail!("need at least one level and one trial");
    }
    let levels: Vec<UncertaintyLevel> = qs.iter().map(|&q| UncertaintyLevel::from_q(q)).collect();
    let methods = if args.compare {
        comparison_methods()
    } else {
        vec![cfg.method()]
    };
    let records = run_monte_carlo_methods(&cfg, &methods, &levels, args.trials, args.seed)?;
    save_trials(&records, &args.out)?;
    let summary = export_report(&records, &args.report.options(), &args.out)?;
    println!("method,mode,trials,failures,ss_er_p,ss_er_psi");
    for g in &summary.groups {
        println!(
            "{},{},{},{},{:.4},{:.3}",
            g.method,
            g.mode.label(),
            g.trials,
            g.failures,
            g.mean.ss_er_p,
            g.mean.ss_er_psi
        );
    }
    Ok(())
}

fn bootstrap(args: BootstrapArgs) -> Result<()> {
    let records = load_trials(&args.input)?;
    let rows = trial_metrics(&records, args.normalization);
    let a = metric_samples(&rows, &args.a, args.mode, args.metric);
    let b = metric_samples(&rows, &args.b, args.mode, args.metric);
    if a.is_empty() || b.is_empty() {
        bail!(
            "no {} trials for '{}' ({} found) or '{}' ({} found)",
            args.mode.label(),
            args.a,
            a.len(),
            args.b,
            b.len()
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let res = bootstrap_compare(&a, &b, args.resamples, &mut rng)?;
    let out = json!({
        "a": args.a,
        "b": args.b,
        "mode": args.mode,
        "metric": args.metric.name(),
        "n_a": a.len(),
        "n_b": b.len(),
        "result": res,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let records = load_trials(&args.input)?;
    let summary = export_report(&records, &args.report.options(), &args.out)?;
    println!(
        "{} trials ({} failed), {} groups written to {}",
        summary.trials,
        summary.failures,
        summary.groups.len(),
        args.out.display()
    );
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate(a) => simulate(a),
        Command::Montecarlo(a) => montecarlo(a),
        Command::Observability(a) => {
            let cfg = RunConfig::load(&a.config)?;
            let rows = sweep::observability_sweep(&cfg, a.scheme, a.order, a.every)?;
            match &a.out {
                Some(path) => sweep::write_rows(&rows, std::fs::File::create(path)?),
                None => sweep::write_rows(&rows, std::io::stdout().lock()),
            }
        }
        Command::Bootstrap(a) => bootstrap(a),
        Command::Report(a) => report(a),
        Command::Flops(a) => {
            println!("{}", flop_estimate(a.scheme, a.filter, a.ni, a.tm));
            Ok(())
        }
    }
}
