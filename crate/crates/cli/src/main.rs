use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use uqbench::commands::{
    compare, diagnose, mdd_curve, render_compare, render_diagnose, render_mdd,
};
use uqbench::{ExperimentConfig, Run};
use uqbench_core::analysis::VarianceMode;
use uqbench_core::{MethodId, MetricId};

/// Benchmark the reliability of uncertainty metrics under data scarcity.
#[derive(Parser)]
#[command(name = "uqbench", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON experiment config; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Ten realizations at n = 30 and 100.
    #[arg(long, global = true)]
    quick: bool,
    /// Global random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Root directory holding run directories.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Existing run directory; otherwise derived from the config.
    #[arg(long, global = true)]
    run: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Execute all stages, resuming from existing artifacts.
    Run,
    /// Posterior probability that A has a lower metric mean than B, per n.
    Compare {
        a: MethodId,
        b: MethodId,
        #[arg(long, default_value = "CRPS")]
        metric: MetricId,
    },
    /// Predictive minimum detectable difference between A and B, per n.
    Mdd {
        a: MethodId,
        b: MethodId,
        #[arg(long, default_value = "CRPS")]
        metric: MetricId,
        /// Power level; defaults to the config value.
        #[arg(long)]
        gamma: Option<f64>,
        /// Use per-draw method variances instead of their posterior means.
        #[arg(long)]
        per_draw: bool,
    },
    /// Convergence diagnostics and posterior predictive checks per fit.
    Diagnose,
    /// Regenerate the report figures and tables.
    Report,
}

fn config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if g.quick {
        cfg = cfg.quick();
    }
    if let Some(s) = g.seed {
        cfg.global_seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn existing_run(g: &Global) -> Result<Run> {
    let dir = match &g.run {
        Some(d) => d.clone(),
        None => g.out.join(config(g)?.hash()),
    };
    Run::open(&dir).with_context(|| format!("opening run {}", dir.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    let g = &cli.global;
    match cli.command {
        Command::Run => {
            let mut run = Run::create(&g.out, config(g)?)?.with_workers(g.workers);
            let s = run.execute()?;
            println!("run directory: {}", s.dir.display());
            println!(
                "{} cells trained, {} failed to converge",
                s.cells, s.unconverged_cells
            );
            if s.failed_fits.is_empty() {
                println!("all hierarchical fits passed diagnostics");
                Ok(ExitCode::SUCCESS)
            } else {
                for (metric, n) in &s.failed_fits {
                    eprintln!("fit {metric} n={n} failed diagnostics");
                }
                Ok(ExitCode::from(2))
            }
        }
        Command::Compare { a, b, metric } => {
            let run = existing_run(g)?;
            let rows = compare(&run, metric, a, b)?;
            print!("{}", render_compare(metric, a, b, &rows));
            Ok(ExitCode::SUCCESS)
        }
        Command::Mdd {
            a,
            b,
            metric,
            gamma,
            per_draw,
        } => {
            let run = existing_run(g)?;
            let gamma = gamma.unwrap_or(run.cfg.gamma);
            let mode = if per_draw {
                VarianceMode::PerDraw
            } else {
                VarianceMode::PosteriorMean
            };
            let curve = mdd_curve(&run, metric, a, b, gamma, mode)?;
            print!("{}", render_mdd(&curve));
            Ok(ExitCode::SUCCESS)
        }
        Command::Diagnose => {
            let run = existing_run(g)?;
            let rows = diagnose(&run)?;
            print!("{}", render_diagnose(&rows));
            if rows.iter().all(|r| r.passed()) {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(2))
            }
        }
        Command::Report => {
            let run = existing_run(g)?;
            let table = run.load_table()?;
            uqbench::report::write_analysis(&run, &table)?;
            uqbench::report::write_report(&run, &table)?;
            println!("report written to {}", run.path("report").display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
