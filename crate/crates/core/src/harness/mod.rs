//! Experiment configuration, multi-trial ensembles, and the command
//! implementations behind the CLI.

mod commands;
mod output;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use commands::{
    cmd_demo_pr, cmd_mixing, cmd_rate_certify, cmd_run, cmd_verify_lemmas, verify_lemmas, AbortRecord, ConstantsBlock,
    DemoReport, DominationBlock, EnsembleSummary, LemmaCommandReport, LemmaOverview, MarginRow, MixingBlock,
    MixingReport, RateCertificate, TrialErrors,
};
pub use output::{fmt_f64, series_csv, trajectories_csv, SeriesRow};

use crate::analysis::{ensemble_moments, lyapunov_weight, CheckpointMoments, MeanSe};
use crate::engine::{
    checkpoint_grid, compute_kstar, merge_grid, run_trajectory, seed_for_trial, validate_schedule, Init, RunOptions,
    ScheduleReport, StepSchedule, Trajectory, DEFAULT_KSTAR_CAP,
};
use crate::error::{Error, Result};
use crate::markov_noise::{default_alpha_grid, fit_mixing_constant, NoiseModel};
use crate::problems::{estimate_b, BoundEstimate, ProblemConfig, ProblemSpec};

fn default_checkpoints() -> usize {
    200
}
fn default_region() -> f64 {
    1.0
}
fn default_lemma_points() -> usize {
    5
}
fn default_as_trials() -> usize {
    10
}
fn default_band() -> (f64, f64) {
    (-1.05, -0.5)
}
fn default_min_r2() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub k_max: u64,
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_checkpoints")]
    pub checkpoints: usize,
    #[serde(default)]
    pub init: Init,
    #[serde(default)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    /// override the fitted or surrogate mixing constant
    #[serde(default)]
    pub mixing_constant: Option<f64>,
    /// radius of the region on which sampled Lipschitz moduli are taken
    #[serde(default = "default_region")]
    pub region_radius: f64,
    /// number of log-spaced k values for the expectation checks
    #[serde(default = "default_lemma_points")]
    pub lemma_points: usize,
    /// trajectories on which almost-sure checks are evaluated
    #[serde(default = "default_as_trials")]
    pub as_trials: usize,
    /// first k of the rate-fit window; default `max(K*, k_max/100)`
    #[serde(default)]
    pub fit_from: Option<u64>,
    /// accepted slope interval for rate certification
    #[serde(default = "default_band")]
    pub slope_band: (f64, f64),
    #[serde(default = "default_min_r2")]
    pub min_r2: f64,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            mixing_constant: None,
            region_radius: default_region(),
            lemma_points: default_lemma_points(),
            as_trials: default_as_trials(),
            fit_from: None,
            slope_band: default_band(),
            min_r2: default_min_r2(),
        }
    }
}

/// Deliberately wrong constants for falsifiability runs.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NegativeControl {
    /// divide B by this factor in the almost-sure checks
    #[serde(default)]
    pub b_divisor: Option<f64>,
    /// multiply μ_F by this factor in the expectation checks
    #[serde(default)]
    pub mu_f_factor: Option<f64>,
}

impl NegativeControl {
    pub fn is_active(&self) -> bool {
        self.b_divisor.is_some() || self.mu_f_factor.is_some()
    }
}

/// A full experiment: problem, schedule, run parameters, analysis options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// inline problem description
    #[serde(default)]
    pub problem: Option<ProblemConfig>,
    /// problem file, relative to the experiment file
    #[serde(default)]
    pub problem_path: Option<PathBuf>,
    pub schedule: StepSchedule,
    pub run: RunSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub negative_control: NegativeControl,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub problem_path: Option<PathBuf>,
    pub alpha0: Option<f64>,
    pub beta0: Option<f64>,
    pub k_max: Option<u64>,
    pub trials: Option<usize>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub negative_control: NegativeControl,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    /// Reads a config file; a relative `problem_path` is resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let (Some(p), Some(dir)) = (cfg.problem_path.as_mut(), path.parent()) {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(p) = &o.problem_path {
            self.problem_path = Some(p.clone());
            self.problem = None;
        }
        if let Some(v) = o.alpha0 {
            self.schedule.alpha0 = v;
        }
        if let Some(v) = o.beta0 {
            self.schedule.beta0 = v;
        }
        if let Some(v) = o.k_max {
            self.run.k_max = v;
        }
        if let Some(v) = o.trials {
            self.run.trials = v;
        }
        if let Some(v) = o.seed {
            self.run.seed = v;
        }
        if o.threads.is_some() {
            self.run.threads = o.threads;
        }
        if o.out_dir.is_some() {
            self.out_dir = o.out_dir.clone();
        }
        if let Some(v) = o.negative_control.b_divisor {
            self.negative_control.b_divisor = Some(v);
        }
        if let Some(v) = o.negative_control.mu_f_factor {
            self.negative_control.mu_f_factor = Some(v);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.trials == 0 {
            return Err(Error::config("run.trials", "must be at least 1"));
        }
        if self.run.checkpoints < 2 {
            return Err(Error::config("run.checkpoints", "must be at least 2"));
        }
        if self.run.threads == Some(0) {
            return Err(Error::config("run.threads", "must be at least 1"));
        }
        let s = &self.schedule;
        for (field, v) in [("schedule.alpha0", s.alpha0), ("schedule.beta0", s.beta0)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, format!("must be finite and nonnegative, got {v}")));
            }
        }
        match (&self.problem, &self.problem_path) {
            (None, None) => Err(Error::config(
                "problem",
                "give an inline [problem] table or problem_path",
            )),
            (Some(_), Some(_)) => Err(Error::config(
                "problem",
                "give either [problem] or problem_path, not both",
            )),
            _ => Ok(()),
        }
    }

    pub fn problem_config(&self) -> Result<ProblemConfig> {
        match (&self.problem, &self.problem_path) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(path)) => ProblemConfig::load(path),
            (None, None) => Err(Error::config("problem", "missing")),
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

/// Where the mixing constant came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingSource {
    Fitted,
    ArSurrogate,
    Configured,
}

/// Problem and schedule with everything derived from them before simulation.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub spec: ProblemSpec,
    pub schedule: StepSchedule,
    pub bound: BoundEstimate,
    pub mixing_constant: f64,
    pub mixing_source: MixingSource,
    pub mixing_fit_r2: Option<f64>,
    pub kstar: Option<u64>,
    pub kstar_error: Option<String>,
    pub schedule_report: ScheduleReport,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let spec = cfg.problem_config()?.build()?;
    prepare_spec(spec, cfg)
}

/// Like [`prepare`], for an already-built problem.
pub fn prepare_spec(spec: ProblemSpec, cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let bound = estimate_b(&spec, cfg.analysis.region_radius);
    let (mixing_constant, mixing_source, mixing_fit_r2) = match (cfg.analysis.mixing_constant, &spec.noise) {
        (Some(c), _) => (c, MixingSource::Configured, None),
        (None, NoiseModel::Finite(chain)) => {
            let prof = fit_mixing_constant(chain, &default_alpha_grid())?;
            (prof.c, MixingSource::Fitted, Some(prof.fit_r2))
        }
        (None, NoiseModel::Ar(p)) => (p.mixing_surrogate().c_surrogate, MixingSource::ArSurrogate, None),
    };
    let schedule = cfg.schedule;
    let (kstar, kstar_error) = match compute_kstar(&schedule, bound.b, mixing_constant, DEFAULT_KSTAR_CAP) {
        Ok(k) => (Some(k), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let schedule_report = validate_schedule(&schedule, spec.constants.mu_f, spec.constants.mu_g, bound.b);
    Ok(Prepared {
        spec,
        schedule,
        bound,
        mixing_constant,
        mixing_source,
        mixing_fit_r2,
        kstar,
        kstar_error,
        schedule_report,
    })
}

/// Trajectories of an ensemble in trial order, plus the trials that aborted.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub trajectories: Vec<Trajectory>,
    /// `(trial, k)` of each aborted trial; its partial record is in `trajectories`
    pub aborted: Vec<(usize, u64)>,
    pub wall_clock_seconds: f64,
}

impl Ensemble {
    pub fn completed(&self) -> Vec<Trajectory> {
        self.trajectories
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.aborted.iter().any(|(a, _)| a == i))
            .map(|(_, t)| t.clone())
            .collect()
    }
}

/// Runs `trials` trajectories with per-trial seeds on `threads` workers
/// (all available cores when `None`). Results do not depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn run_ensemble(
    spec: &ProblemSpec,
    schedule: &StepSchedule,
    k_max: u64,
    trials: usize,
    master_seed: u64,
    grid: &[u64],
    options: &RunOptions,
    threads: Option<usize>,
) -> Result<Ensemble> {
    let start = Instant::now();
    let job = || -> Vec<Result<Trajectory>> {
        (0..trials)
            .into_par_iter()
            .map(|i| {
                run_trajectory(
                    spec,
                    schedule,
                    k_max,
                    seed_for_trial(master_seed, i as u64),
                    grid,
                    options,
                )
            })
            .collect()
    };
    let results = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(job),
        None => job(),
    };
    let mut trajectories = Vec::with_capacity(trials);
    let mut aborted = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(t) => trajectories.push(t),
            Err(Error::SimulationAborted { k, partial }) => {
                aborted.push((i, k));
                trajectories.push(*partial);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(Ensemble {
        trajectories,
        aborted,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Log-grid plus `K*` and any extra points.
pub fn experiment_grid(cfg: &ExperimentConfig, kstar: Option<u64>, extra: &[u64]) -> Vec<u64> {
    let mut pts: Vec<u64> = extra.to_vec();
    pts.extend(kstar);
    merge_grid(
        &checkpoint_grid(cfg.run.k_max, cfg.run.checkpoints),
        &pts,
        cfg.run.k_max,
    )
}

/// One row of the ensemble summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub k: u64,
    pub mean_xhat_sq: f64,
    pub se_xhat_sq: f64,
    pub mean_yhat_sq: f64,
    pub se_yhat_sq: f64,
    pub v: f64,
    pub se_v: f64,
    pub log10_bound: Option<f64>,
}

/// Per-checkpoint `V_k` rows built from ensemble moments.
pub(crate) fn checkpoint_rows(
    prepared: &Prepared,
    ensemble: &[Trajectory],
    moments: &[CheckpointMoments],
) -> Result<Vec<CheckpointSummary>> {
    let c = &prepared.spec.constants;
    let mut rows = Vec::with_capacity(moments.len());
    for (i, m) in moments.iter().enumerate() {
        let w = lyapunov_weight(m.k, &prepared.schedule, prepared.bound.b, c.mu_f, c.mu_g);
        let per_trial: Vec<f64> = ensemble
            .iter()
            .map(|t| {
                let cp = &t.checkpoints[i];
                crate::analysis::residuals(&prepared.spec, &cp.x, &cp.y)
                    .map(|r| r.y_hat_norm_sq() + w * r.x_hat_norm_sq())
            })
            .collect::<Result<_>>()?;
        rows.push(CheckpointSummary {
            k: m.k,
            mean_xhat_sq: m.xhat_sq.mean,
            se_xhat_sq: m.xhat_sq.se,
            mean_yhat_sq: m.yhat_sq.mean,
            se_yhat_sq: m.yhat_sq.se,
            v: m.yhat_sq.mean + w * m.xhat_sq.mean,
            se_v: MeanSe::of(&per_trial).se,
            log10_bound: None,
        });
    }
    Ok(rows)
}

pub(crate) fn moments_for(prepared: &Prepared, ensemble: &[Trajectory]) -> Result<Vec<CheckpointMoments>> {
    prepared.spec.fixed_point()?;
    prepared.spec.h_of(&vec![0.0; prepared.spec.dy])?;
    ensemble_moments(&prepared.spec, ensemble)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CFG: &str = r#"
[problem]
kind = "linear"
[problem.chain]
transition = [[0.7, 0.3], [0.3, 0.7]]
[problem.linear]
a11 = [[2.0]]
a12 = [[0.5]]
a21 = [[0.5]]
a22 = [[1.5]]
bias_f = [[0.5], [-0.5]]

[schedule]
alpha0 = 2.0
beta0 = 1.5

[run]
k_max = 2000
trials = 4
seed = 9
"#;

    #[test]
    fn config_round_trip_and_overrides() {
        let mut cfg = ExperimentConfig::from_toml_str(CFG).unwrap();
        assert_eq!(cfg.run.checkpoints, 200);
        assert_eq!(cfg.schedule.alpha_exponent, 2.0 / 3.0);
        cfg.apply(&Overrides {
            trials: Some(7),
            alpha0: Some(3.0),
            ..Overrides::default()
        });
        assert_eq!((cfg.run.trials, cfg.schedule.alpha0), (7, 3.0));
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let mut cfg = ExperimentConfig::from_toml_str(CFG).unwrap();
        cfg.run.trials = 0;
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "run.trials"),
            other => panic!("{other:?}"),
        }
        let bad = CFG.replace("a22 = [[1.5]]", "a22 = [[1.5]]\nfoo = 1");
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn ensemble_is_thread_count_independent() {
        let cfg = ExperimentConfig::from_toml_str(CFG).unwrap();
        let p = prepare(&cfg).unwrap();
        let grid = experiment_grid(&cfg, p.kstar, &[]);
        let run = |threads| {
            run_ensemble(&p.spec, &p.schedule, 2000, 6, 9, &grid, &RunOptions::default(), threads)
                .unwrap()
                .trajectories
        };
        assert_eq!(run(Some(1)), run(Some(3)));
    }

    #[test]
    fn verify_names_the_missing_capability() {
        let mut cfg = ExperimentConfig::from_toml_str(CFG).unwrap();
        cfg.out_dir = Some(tempfile::tempdir().unwrap().path().to_path_buf());
        let mut spec = cfg.problem_config().unwrap().build().unwrap();
        spec.h = None;
        let p = prepare_spec(spec, &cfg).unwrap();
        match verify_lemmas(p, &cfg) {
            Err(Error::MissingCapability(what)) => assert!(what.contains('H')),
            other => panic!("{other:?}"),
        }
    }
}
