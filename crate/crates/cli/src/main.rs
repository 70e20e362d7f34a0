use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ttsa_core::engine::{Init, StepSchedule};
use ttsa_core::harness::{
    cmd_demo_pr, cmd_mixing, cmd_rate_certify, cmd_run, cmd_verify_lemmas, AnalysisSection, ExperimentConfig,
    MixingReport, NegativeControl, Overrides, RunSection,
};

/// Two-time-scale stochastic approximation experiments.
#[derive(Debug, Parser)]
#[command(name = "ttsa", version, about)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// experiment config (TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// problem config (TOML); replaces the one named in --config
    #[arg(long, global = true)]
    problem: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// worker threads; all cores when omitted
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    alpha0: Option<f64>,
    #[arg(long, global = true)]
    beta0: Option<f64>,
    #[arg(long, global = true)]
    kmax: Option<u64>,
    #[arg(long, global = true)]
    trials: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// simulate an ensemble and write series.csv, trajectories.csv, summary.json, constants.json
    Run,
    /// check the almost-sure and expectation lemmas; exit 1 on any failure
    VerifyLemmas {
        /// negative control: divide B by this factor in the almost-sure checks
        #[arg(long)]
        corrupt_b: Option<f64>,
        /// negative control: multiply μ_F by this factor in the expectation checks
        #[arg(long)]
        corrupt_mu_f: Option<f64>,
    },
    /// fit the convergence rate and check the bound; exit 1 unless certified
    RateCertify,
    /// Polyak-Ruppert averaging demo on a robust_pr problem
    DemoPr,
    /// mixing diagnostics of the noise source
    Mixing,
}

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_ERROR: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_CHECK_FAILED),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

/// Config from `--config`, or assembled from flags when only `--problem` is given.
fn load_config(g: &Global, needs_run: bool) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => {
            let Some(problem) = &g.problem else {
                bail!("give --config or --problem");
            };
            let need = |name: &str, v: Option<f64>| match (v, needs_run) {
                (Some(v), _) => Ok(v),
                (None, false) => Ok(1.0),
                (None, true) => Err(anyhow::anyhow!("--{name} is required without --config")),
            };
            ExperimentConfig {
                problem: None,
                problem_path: Some(problem.clone()),
                schedule: StepSchedule::new(need("alpha0", g.alpha0)?, need("beta0", g.beta0)?),
                run: RunSection {
                    k_max: need("kmax", g.kmax.map(|k| k as f64))? as u64,
                    trials: need("trials", g.trials.map(|t| t as f64))? as usize,
                    seed: 0,
                    checkpoints: 200,
                    init: Init::default(),
                    threads: None,
                },
                analysis: AnalysisSection::default(),
                negative_control: NegativeControl::default(),
                out_dir: None,
            }
        }
    };
    cfg.apply(&Overrides {
        problem_path: g.problem.clone(),
        alpha0: g.alpha0,
        beta0: g.beta0,
        k_max: g.kmax,
        trials: g.trials,
        seed: g.seed,
        threads: g.threads,
        out_dir: g.out.clone(),
        negative_control: NegativeControl::default(),
    });
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    let g = &cli.global;
    match cli.command {
        Command::Run => {
            let cfg = load_config(g, true)?;
            let s = cmd_run(&cfg)?;
            println!("problem {} trials {} k_max {}", s.problem, s.trials, s.k_max);
            if let Some(c) = &s.constants {
                println!("B {} C {} K* {} log10 D {}", c.b, c.c, c.kstar, c.log10_d);
            }
            if let Some(f) = &s.rate_fit {
                println!(
                    "slope {:.4} r2 {:.4} on [{}, {}]",
                    f.slope, f.r2, f.k_window.0, f.k_window.1
                );
            }
            println!("wrote {}", cfg.out_dir().display());
            for a in &s.aborted {
                eprintln!("trial {} aborted at k = {}", a.trial, a.k);
            }
            Ok(s.aborted.is_empty())
        }
        Command::VerifyLemmas {
            corrupt_b,
            corrupt_mu_f,
        } => {
            let mut cfg = load_config(g, true)?;
            if corrupt_b.is_some() {
                cfg.negative_control.b_divisor = corrupt_b;
            }
            if corrupt_mu_f.is_some() {
                cfg.negative_control.mu_f_factor = corrupt_mu_f;
            }
            let r = cmd_verify_lemmas(&cfg)?;
            for s in &r.as_summary {
                println!(
                    "{:<20} {:>7} evaluated {:>5} failed  min margin {:.3e}",
                    s.lemma, s.evaluated, s.failed, s.min_relative_margin
                );
            }
            match (&r.expectation, &r.expectation_skipped) {
                (Some(e), _) => {
                    let (uniform, steps): (Vec<_>, Vec<_>) =
                        e.checks.iter().partition(|c| c.lemma == "zhat_uniform_bound");
                    if let Some(worst) = uniform
                        .iter()
                        .max_by(|a, b| (a.lhs - a.rhs).total_cmp(&(b.lhs - b.rhs)))
                    {
                        println!(
                            "zhat_uniform_bound   {} checkpoints, {} failed; worst k {}: log lhs {:.4} vs log D {:.4e}",
                            uniform.len(),
                            uniform.iter().filter(|c| !c.passed).count(),
                            worst.k,
                            worst.lhs,
                            worst.rhs
                        );
                    }
                    for c in steps {
                        println!(
                            "{:<20} k {:>8}  lhs {:.4e} ± {:.1e}  rhs {:.4e}  {}",
                            c.lemma,
                            c.k,
                            c.lhs,
                            c.lhs_se,
                            c.rhs,
                            if c.passed { "ok" } else { "FAIL" }
                        );
                    }
                }
                (None, Some(why)) => println!("expectation checks skipped: {why}"),
                (None, None) => {}
            }
            println!("{}", if r.passed { "all checks passed" } else { "checks FAILED" });
            Ok(r.passed)
        }
        Command::RateCertify => {
            let cfg = load_config(g, true)?;
            let c = cmd_rate_certify(&cfg)?;
            if let Some(f) = &c.rate_fit {
                println!("slope {:.4} r2 {:.4}", f.slope, f.r2);
            }
            if c.certified {
                println!("certified");
            } else {
                for r in &c.reasons {
                    println!("not certified: {r}");
                }
            }
            Ok(c.certified)
        }
        Command::DemoPr => {
            let cfg = load_config(g, true)?;
            let r = cmd_demo_pr(&cfg)?;
            for t in &r.trials {
                println!(
                    "trial {:>4}  averaged {:.6e}  last {:.6e}",
                    t.trial, t.averaged_error, t.last_error
                );
            }
            println!("mse averaged {:.6e}  last {:.6e}", r.mse_averaged, r.mse_last);
            Ok(r.aborted.is_empty())
        }
        Command::Mixing => {
            let cfg = load_config(g, false)?;
            match cmd_mixing(&cfg)? {
                MixingReport::Finite {
                    states,
                    profile,
                    tau_001,
                    ..
                } => {
                    println!("{states} states, tau(0.01) = {tau_001}");
                    println!("C = {} (r2 {:.4})", profile.c, profile.fit_r2);
                }
                MixingReport::Ar { surrogate } => {
                    println!(
                        "spectral radius {} memory {} surrogate C {}",
                        surrogate.spectral_radius, surrogate.memory_length, surrogate.c_surrogate
                    );
                    println!("note: {}", surrogate.caveat);
                }
            }
            Ok(true)
        }
    }
}
