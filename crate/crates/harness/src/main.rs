use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use mfsim_harness::experiments::{
    run_convergence_study, run_macro, run_metrics_check, run_micro, run_competition_experiment,
    run_scheme_comparison,
};
use mfsim_harness::{ExperimentConfig, Output};
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "mfsim", version, about = "Mean-field agent simulator with mass dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the agent system for every N in `n_list`.
    Micro(Common),
    /// Run the macroscopic grid scheme.
    Macro(Common),
    /// Distances between empirical and macroscopic measures as N grows.
    Converge(Common),
    /// Two-atom comparison of the splitting and the one-step schemes.
    SchemeCompare(Common),
    /// Metric identities and comparison inequalities on random pairs.
    MetricsCheck(Common),
    /// Micro runs, macroscopic density, overlays and cluster assertions.
    Competition(Common),
}

#[derive(Args)]
struct Common {
    /// TOML config; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self, fallback: ExperimentConfig) -> Result<(ExperimentConfig, Output)> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => fallback,
        };
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        let out = Output::new(Some(&cfg.output_dir))?;
        Ok((cfg, out))
    }
}

fn finish<R: Serialize>(
    name: &str,
    cfg: &ExperimentConfig,
    mut out: Output,
    report: &R,
    passed: bool,
    extra: Value,
) -> Result<bool> {
    out.json(&format!("{name}_report.json"), report)?;
    let mut metadata = json!({
        "report": format!("{name}_report.json"),
        "sample_times": cfg.sample_times(),
        "level": cfg.level().ok(),
        "stationary_speed": cfg.stationary_speed,
    });
    if let (Value::Object(m), Value::Object(e)) = (&mut metadata, extra) {
        m.extend(e);
    }
    out.finish(name, cfg, passed, metadata)?;
    println!("{name}: {}", if passed { "PASS" } else { "FAIL" });
    Ok(passed)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Micro(c) => {
            let (cfg, mut out) = c.load(ExperimentConfig::default())?;
            let r = run_micro(&cfg, &mut out)?;
            for (s, cl) in r.summaries.iter().zip(&r.clusters) {
                println!(
                    "N = {:4}  drift = {:.2e}  min weight = {:.3e}  clusters = {}",
                    s.n, s.mass_drift_max, s.min_weight, cl.count
                );
            }
            let stops: Vec<_> = r.clusters.iter().map(|c| c.stopped_early_at).collect();
            finish("micro", &cfg, out, &r, r.passed, json!({ "stopped_early_at": stops }))
        }
        Command::Macro(c) => {
            let (cfg, mut out) = c.load(ExperimentConfig::default())?;
            let r = run_macro(&cfg, &mut out)?;
            println!("level = {}  dt = {:.3e}  source bound = {:.3}", r.level, r.dt, r.source_bound);
            for d in &r.diagnostics {
                println!(
                    "t = {:6.3}  mass = {:.15}  min = {:.3e}  support = [{:.4}, {:.4}]",
                    d.t, d.mass, d.min_mass, d.support_left, d.support_right
                );
            }
            finish("macro", &cfg, out, &r, r.passed, Value::Null)
        }
        Command::Converge(c) => {
            let (cfg, mut out) = c.load(ExperimentConfig::default())?;
            let r = run_convergence_study(&cfg, &mut out)?;
            for f in &r.fits {
                println!("t = {:6.3}  {:3}  slope = {:+.3}  decreasing = {}", f.t, f.metric, f.slope, f.decreasing);
            }
            println!("stability constant = {:.4}", r.stability_constant);
            finish("converge", &cfg, out, &r, r.passed, Value::Null)
        }
        Command::SchemeCompare(c) => {
            let (cfg, mut out) = c.load(ExperimentConfig::appendix_b())?;
            let r = run_scheme_comparison(&cfg, &mut out)?;
            for ch in r.checks.iter().filter(|c| !c.passed) {
                println!("failed: {} = {} (expected {})", ch.name, ch.value, ch.expected);
            }
            finish("scheme_compare", &cfg, out, &r, r.passed, Value::Null)
        }
        Command::MetricsCheck(c) => {
            let (cfg, mut out) = c.load(ExperimentConfig::default())?;
            let r = run_metrics_check(&cfg, &mut out)?;
            println!(
                "{} pairs, {} violations, max violation {:.3e}",
                r.inequalities.pairs, r.inequalities.violations, r.inequalities.max_violation
            );
            finish("metrics_check", &cfg, out, &r, r.passed, Value::Null)
        }
        Command::Competition(c) => {
            let (cfg, mut out) = c.load(ExperimentConfig::default())?;
            let r = run_competition_experiment(&cfg, &mut out)?;
            for cl in &r.clusters {
                println!("N = {:4}  clusters = {}  centers = {:.3?}", cl.n, cl.count, cl.centers);
            }
            let stops: Vec<_> = r.clusters.iter().map(|c| c.stopped_early_at).collect();
            finish("competition", &cfg, out, &r, r.passed, json!({ "stopped_early_at": stops }))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
