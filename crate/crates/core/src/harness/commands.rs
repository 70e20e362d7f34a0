use serde::{Deserialize, Serialize};

use super::output::{series_csv, trajectories_csv, write_json, write_text, SeriesRow};
use super::{
    checkpoint_rows, experiment_grid, moments_for, prepare, run_ensemble, CheckpointSummary, Ensemble,
    ExperimentConfig, MixingSource, NegativeControl, Prepared,
};
use crate::analysis::{
    check_as_lemmas, check_domination, check_expectation_lemmas, compute_constants, default_fit_start, fit_rate,
    theorem_bound, BoundConstants, ExpectationReport, LemmaSummary, RateFit, MIN_EXPECTATION_TRIALS,
};
use crate::engine::{compute_kstar, RunOptions, ScheduleReport, StepSchedule, Trajectory, DEFAULT_KSTAR_CAP};
use crate::error::{Error, Result};
use crate::linalg::{dist, norm_sq};
use crate::markov_noise::{
    bias_profile, default_alpha_grid, fit_mixing_constant, mixing_time, profile_csv, MixingProfile, MixingSurrogate,
    NoiseModel, NoiseState,
};
use crate::problems::{BoundEstimate, Operator};

/// The constants block written to `constants.json` and `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantsBlock {
    #[serde(rename = "B")]
    pub b: f64,
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "Kstar")]
    pub kstar: u64,
    #[serde(rename = "D1")]
    pub d1: f64,
    #[serde(rename = "D1_tail")]
    pub d1_tail: f64,
    #[serde(rename = "log10_D2")]
    pub log10_d2: f64,
    #[serde(rename = "log10_D")]
    pub log10_d: f64,
    #[serde(rename = "mu_F")]
    pub mu_f: f64,
    #[serde(rename = "mu_G")]
    pub mu_g: f64,
    /// `‖y*‖ + ‖H(0)‖ + 1`
    pub offset: f64,
    pub mean_zhat0_sq: f64,
}

impl From<&BoundConstants> for ConstantsBlock {
    fn from(c: &BoundConstants) -> Self {
        Self {
            b: c.b,
            c: c.c,
            kstar: c.kstar,
            d1: c.d1,
            d1_tail: c.d1_tail,
            log10_d2: c.log10_d2(),
            log10_d: c.log10_d(),
            mu_f: c.mu_f,
            mu_g: c.mu_g,
            offset: c.offset,
            mean_zhat0_sq: c.ez0_sq,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingBlock {
    #[serde(rename = "C")]
    pub c: f64,
    pub source: MixingSource,
    pub fit_r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominationBlock {
    pub checked: usize,
    pub all_dominated: bool,
    /// smallest `log10(bound) − log10(V_k)` over the checked points
    pub min_log10_gap: Option<f64>,
}

/// Everything `summary.json` records about one ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub problem: String,
    pub trials: usize,
    pub k_max: u64,
    pub seed: u64,
    pub schedule: StepSchedule,
    pub schedule_report: ScheduleReport,
    pub bound_estimate: BoundEstimate,
    pub mixing: MixingBlock,
    pub constants: Option<ConstantsBlock>,
    pub constants_error: Option<String>,
    pub checkpoints: Vec<CheckpointSummary>,
    pub rate_fit: Option<RateFit>,
    pub rate_fit_error: Option<String>,
    pub domination: Option<DominationBlock>,
    /// filled by `verify-lemmas`; details are in `lemmas.json`
    pub lemma_report: Option<LemmaOverview>,
    pub aborted: Vec<AbortRecord>,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaOverview {
    pub as_summary: Vec<LemmaSummary>,
    pub expectation_checked: usize,
    pub expectation_failed: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortRecord {
    pub trial: usize,
    pub k: u64,
}

impl EnsembleSummary {
    pub fn series(&self) -> Vec<SeriesRow> {
        self.checkpoints.iter().map(SeriesRow::from).collect()
    }
}

/// Simulated ensemble with its summary.
struct Simulated {
    prepared: Prepared,
    ensemble: Ensemble,
    completed: Vec<Trajectory>,
    summary: EnsembleSummary,
    constants: Option<BoundConstants>,
}

fn simulate(cfg: &ExperimentConfig, extra: &[u64], lagged: bool) -> Result<Simulated> {
    simulate_prepared(prepare(cfg)?, cfg, extra, lagged)
}

fn simulate_prepared(prepared: Prepared, cfg: &ExperimentConfig, extra: &[u64], lagged: bool) -> Result<Simulated> {
    let grid = experiment_grid(cfg, prepared.kstar, extra);
    let options = RunOptions {
        init: cfg.run.init.clone(),
        lag_mixing_constant: lagged.then_some(prepared.mixing_constant),
    };
    let ensemble = run_ensemble(
        &prepared.spec,
        &prepared.schedule,
        cfg.run.k_max,
        cfg.run.trials,
        cfg.run.seed,
        &grid,
        &options,
        cfg.run.threads,
    )?;
    let completed = ensemble.completed();
    let (summary, constants) = summarize(cfg, &prepared, &ensemble, &completed)?;
    Ok(Simulated {
        prepared,
        ensemble,
        completed,
        summary,
        constants,
    })
}

fn summarize(
    cfg: &ExperimentConfig,
    p: &Prepared,
    ensemble: &Ensemble,
    completed: &[Trajectory],
) -> Result<(EnsembleSummary, Option<BoundConstants>)> {
    let mut checkpoints = Vec::new();
    let mut constants = None;
    let mut constants_error = p.kstar_error.clone();
    if !completed.is_empty() && p.spec.fixed_point().is_ok() && p.spec.h.is_some() {
        let moments = moments_for(p, completed)?;
        checkpoints = checkpoint_rows(p, completed, &moments)?;
        if p.kstar.is_some() {
            let ez0 = moments.first().map_or(0.0, |m| m.zhat_sq.mean);
            match compute_constants(&p.spec, &p.schedule, p.bound.b, p.mixing_constant, ez0) {
                Ok(c) => constants = Some(c),
                Err(e) => constants_error = Some(e.to_string()),
            }
        }
    } else if completed.is_empty() {
        constants_error = Some("no trial completed".into());
    } else {
        constants_error = Some("problem has no solution map or fixed point".into());
    }

    let mut domination = None;
    if let Some(c) = &constants {
        let v_kstar = checkpoints.iter().find(|r| r.k == c.kstar).map(|r| r.v);
        if let Some(vk) = v_kstar {
            for row in checkpoints.iter_mut().filter(|r| r.k > c.kstar) {
                row.log10_bound = theorem_bound(row.k - 1, c, vk, &p.schedule)
                    .ok()
                    .map(|l| l / std::f64::consts::LN_10);
            }
            let series: Vec<(u64, f64)> = checkpoints.iter().map(|r| (r.k, r.v)).collect();
            if let Ok(rep) = check_domination(&series, c, &p.schedule) {
                let gap = rep
                    .rows
                    .iter()
                    .map(|r| (r.log_bound - r.log_v) / std::f64::consts::LN_10)
                    .filter(|g| g.is_finite())
                    .reduce(f64::min);
                domination = Some(DominationBlock {
                    checked: rep.rows.len(),
                    all_dominated: rep.all_dominated(),
                    min_log10_gap: gap,
                });
            }
        }
    }

    let series: Vec<(u64, f64)> = checkpoints.iter().map(|r| (r.k, r.v)).collect();
    let fit_lo = cfg
        .analysis
        .fit_from
        .unwrap_or_else(|| default_fit_start(p.kstar.unwrap_or(0), cfg.run.k_max));
    let (rate_fit, rate_fit_error) = match fit_rate(&series, fit_lo) {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(e.to_string())),
    };

    let summary = EnsembleSummary {
        problem: p.spec.name.clone(),
        trials: cfg.run.trials,
        k_max: cfg.run.k_max,
        seed: cfg.run.seed,
        schedule: p.schedule,
        schedule_report: p.schedule_report.clone(),
        bound_estimate: p.bound,
        mixing: MixingBlock {
            c: p.mixing_constant,
            source: p.mixing_source,
            fit_r2: p.mixing_fit_r2,
        },
        constants: constants.as_ref().map(ConstantsBlock::from),
        constants_error,
        checkpoints,
        rate_fit,
        rate_fit_error,
        domination,
        lemma_report: None,
        aborted: ensemble
            .aborted
            .iter()
            .map(|&(trial, k)| AbortRecord { trial, k })
            .collect(),
        wall_clock_seconds: ensemble.wall_clock_seconds,
    };
    Ok((summary, constants))
}

fn write_run_outputs(cfg: &ExperimentConfig, sim: &Simulated) -> Result<()> {
    let dir = cfg.out_dir();
    write_text(&dir, "series.csv", &series_csv(&sim.summary.series()))?;
    write_text(
        &dir,
        "trajectories.csv",
        &trajectories_csv(&sim.prepared.spec, &sim.ensemble.trajectories),
    )?;
    write_json(&dir, "summary.json", &sim.summary)?;
    if let Some(c) = &sim.summary.constants {
        write_json(&dir, "constants.json", c)?;
    }
    Ok(())
}

/// Runs the ensemble and writes `series.csv`, `trajectories.csv`,
/// `summary.json` and (when available) `constants.json`.
///
/// Aborted trials are listed in the summary; their partial records are kept in
/// `trajectories.csv` and left out of the aggregates.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<EnsembleSummary> {
    let sim = simulate(cfg, &[], false)?;
    write_run_outputs(cfg, &sim)?;
    Ok(sim.summary)
}

/// Lemma verification outcome written to `lemmas.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaCommandReport {
    pub constants: ConstantsBlock,
    pub negative_control: NegativeControl,
    pub as_trials: usize,
    pub as_summary: Vec<LemmaSummary>,
    pub as_failures: usize,
    /// smallest `rhs − lhs` per lemma and checkpoint, over the checked trials
    pub as_margins: Vec<MarginRow>,
    pub k_list: Vec<u64>,
    pub expectation: Option<ExpectationReport>,
    pub expectation_skipped: Option<String>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginRow {
    pub lemma: String,
    pub k: u64,
    pub min_margin: f64,
}

/// `count` log-spaced indices in `[lo, hi]`.
fn log_spaced(lo: u64, hi: u64, count: usize) -> Vec<u64> {
    let lo = lo.max(1);
    if hi < lo || count == 0 {
        return Vec::new();
    }
    let (a, b) = ((lo as f64).ln(), (hi as f64).ln());
    let mut out: Vec<u64> = (0..count)
        .map(|i| {
            let t = if count == 1 { 0.0 } else { i as f64 / (count - 1) as f64 };
            ((a + (b - a) * t).exp().round() as u64).clamp(lo, hi)
        })
        .collect();
    out.dedup();
    out
}

/// Almost-sure checks on the first `as_trials` trajectories and Monte Carlo
/// expectation checks on the whole ensemble. Writes `lemmas.json`,
/// `constants.json`, `summary.json` and `series.csv`.
pub fn cmd_verify_lemmas(cfg: &ExperimentConfig) -> Result<LemmaCommandReport> {
    verify_lemmas(prepare(cfg)?, cfg)
}

/// [`cmd_verify_lemmas`] for an already-prepared problem.
pub fn verify_lemmas(pre: Prepared, cfg: &ExperimentConfig) -> Result<LemmaCommandReport> {
    pre.spec.fixed_point()?;
    pre.spec.h_of(&vec![0.0; pre.spec.dy])?;
    let kstar = compute_kstar(&pre.schedule, pre.bound.b, pre.mixing_constant, DEFAULT_KSTAR_CAP)?;
    let k_list = log_spaced(kstar, cfg.run.k_max.saturating_sub(1), cfg.analysis.lemma_points);
    let extra: Vec<u64> = k_list.iter().flat_map(|&k| [k, k + 1]).collect();

    let mut sim = simulate_prepared(pre, cfg, &extra, true)?;
    let mut constants = match sim.constants {
        Some(c) => c,
        None => {
            return Err(Error::InvalidArgument(format!(
                "constants unavailable: {}",
                sim.summary.constants_error.clone().unwrap_or_default()
            )))
        }
    };
    let block = ConstantsBlock::from(&constants);
    let nc = cfg.negative_control;

    let as_n = cfg.analysis.as_trials.min(sim.completed.len());
    let mut as_consts = constants;
    if let Some(d) = nc.b_divisor {
        as_consts.b /= d;
    }
    let as_rep = check_as_lemmas(
        &sim.prepared.spec,
        &sim.completed[..as_n],
        &as_consts,
        &sim.prepared.schedule,
    )?;
    let mut as_margins: Vec<MarginRow> = Vec::new();
    for c in &as_rep.checks {
        match as_margins.iter_mut().find(|m| m.lemma == c.lemma && m.k == c.k) {
            Some(m) => m.min_margin = m.min_margin.min(c.margin()),
            None => as_margins.push(MarginRow {
                lemma: c.lemma.clone(),
                k: c.k,
                min_margin: c.margin(),
            }),
        }
    }

    if let Some(f) = nc.mu_f_factor {
        constants.mu_f *= f;
    }
    let (expectation, expectation_skipped) = if sim.completed.len() >= MIN_EXPECTATION_TRIALS {
        let rep = check_expectation_lemmas(
            &sim.prepared.spec,
            &sim.completed,
            &constants,
            &sim.prepared.schedule,
            &k_list,
        )?;
        (Some(rep), None)
    } else {
        (
            None,
            Some(format!(
                "expectation checks need at least {MIN_EXPECTATION_TRIALS} completed trials, got {}",
                sim.completed.len()
            )),
        )
    };

    let passed = as_rep.all_passed()
        && expectation.as_ref().is_none_or(ExpectationReport::all_passed)
        && sim.ensemble.aborted.is_empty();
    let report = LemmaCommandReport {
        constants: block,
        negative_control: nc,
        as_trials: as_n,
        as_summary: as_rep.summary(),
        as_failures: as_rep.failures(),
        as_margins,
        k_list,
        expectation,
        expectation_skipped,
        passed,
    };
    let exp = report.expectation.as_ref();
    sim.summary.lemma_report = Some(LemmaOverview {
        as_summary: report.as_summary.clone(),
        expectation_checked: exp.map_or(0, |e| e.checks.len()),
        expectation_failed: exp.map_or(0, |e| e.checks.iter().filter(|c| !c.passed).count()),
        passed,
    });
    write_run_outputs(cfg, &sim)?;
    write_json(&cfg.out_dir(), "lemmas.json", &report)?;
    Ok(report)
}

/// Rate-certification verdict written to `rate.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCertificate {
    pub certified: bool,
    pub reasons: Vec<String>,
    pub rate_fit: Option<RateFit>,
    pub slope_band: (f64, f64),
    pub min_r2: f64,
    pub domination: Option<DominationBlock>,
    pub summary: EnsembleSummary,
}

/// Simulates regardless, and certifies only when the schedule is valid,
/// the constants are computable, the fitted slope lies in the configured
/// band with enough `r²`, and the bound dominates `V_k` everywhere.
pub fn cmd_rate_certify(cfg: &ExperimentConfig) -> Result<RateCertificate> {
    let sim = simulate(cfg, &[], false)?;
    write_run_outputs(cfg, &sim)?;
    let s = &sim.summary;
    let mut reasons = Vec::new();
    if !s.schedule_report.passed() {
        reasons.push(format!(
            "schedule conditions fail: {}",
            s.schedule_report.failures().join(", ")
        ));
    }
    if let Some(e) = &s.constants_error {
        reasons.push(format!("constants unavailable: {e}"));
    }
    if !s.aborted.is_empty() {
        reasons.push(format!("{} trial(s) aborted", s.aborted.len()));
    }
    let (lo, hi) = cfg.analysis.slope_band;
    match &s.rate_fit {
        Some(f) => {
            if !(f.slope >= lo && f.slope <= hi) {
                reasons.push(format!("slope {} outside [{lo}, {hi}]", f.slope));
            }
            if f.r2 < cfg.analysis.min_r2 {
                reasons.push(format!("r2 {} below {}", f.r2, cfg.analysis.min_r2));
            }
        }
        None => reasons.push(format!("no rate fit: {}", s.rate_fit_error.clone().unwrap_or_default())),
    }
    match &s.domination {
        Some(d) if d.all_dominated => {}
        Some(_) => reasons.push("bound does not dominate V_k at every checkpoint".into()),
        None => reasons.push("domination not evaluated".into()),
    }
    let cert = RateCertificate {
        certified: reasons.is_empty(),
        reasons,
        rate_fit: s.rate_fit,
        slope_band: cfg.analysis.slope_band,
        min_r2: cfg.analysis.min_r2,
        domination: s.domination.clone(),
        summary: sim.summary.clone(),
    };
    write_json(&cfg.out_dir(), "rate.json", &cert)?;
    Ok(cert)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialErrors {
    pub trial: usize,
    /// `‖x_k − x_true‖`, the averaged iterate
    pub averaged_error: f64,
    /// `‖y_k − x_true‖`, the last SGD iterate
    pub last_error: f64,
}

/// Polyak-Ruppert demo outcome written to `demo_pr.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub k_max: u64,
    pub trials: Vec<TrialErrors>,
    pub mean_averaged_error: f64,
    pub mean_last_error: f64,
    pub mse_averaged: f64,
    pub mse_last: f64,
    pub aborted: Vec<AbortRecord>,
}

/// Final errors of the averaged and last iterates per trial; no rate claims.
pub fn cmd_demo_pr(cfg: &ExperimentConfig) -> Result<DemoReport> {
    cfg.validate()?;
    let spec = cfg.problem_config()?.build()?;
    if spec.name != "robust_pr" {
        return Err(Error::config("problem.kind", "demo-pr needs a robust_pr problem"));
    }
    let (_, truth) = spec.fixed_point()?;
    let truth = truth.to_vec();
    let options = RunOptions {
        init: cfg.run.init.clone(),
        lag_mixing_constant: None,
    };
    let k_max = cfg.run.k_max;
    let ens = run_ensemble(
        &spec,
        &cfg.schedule,
        k_max,
        cfg.run.trials,
        cfg.run.seed,
        &[0, k_max],
        &options,
        cfg.run.threads,
    )?;
    let trials: Vec<TrialErrors> = ens
        .trajectories
        .iter()
        .enumerate()
        .filter(|(i, _)| !ens.aborted.iter().any(|(a, _)| a == i))
        .map(|(trial, t)| TrialErrors {
            trial,
            averaged_error: dist(&t.final_state.x, &truth),
            last_error: dist(&t.final_state.y, &truth),
        })
        .collect();
    let n = trials.len().max(1) as f64;
    let report = DemoReport {
        k_max,
        mean_averaged_error: trials.iter().map(|t| t.averaged_error).sum::<f64>() / n,
        mean_last_error: trials.iter().map(|t| t.last_error).sum::<f64>() / n,
        mse_averaged: trials.iter().map(|t| t.averaged_error.powi(2)).sum::<f64>() / n,
        mse_last: trials.iter().map(|t| t.last_error.powi(2)).sum::<f64>() / n,
        trials,
        aborted: ens.aborted.iter().map(|&(trial, k)| AbortRecord { trial, k }).collect(),
    };
    write_json(&cfg.out_dir(), "demo_pr.json", &report)?;
    Ok(report)
}

/// Chain diagnostics written to `mixing.json`, `tv_profile.csv` and `bias_profile.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MixingReport {
    Finite {
        states: usize,
        stationary: Vec<f64>,
        profile: MixingProfile,
        /// τ(0.01)
        tau_001: usize,
        tv_profile_len: usize,
    },
    Ar {
        surrogate: MixingSurrogate,
    },
}

pub fn cmd_mixing(cfg: &ExperimentConfig) -> Result<MixingReport> {
    cfg.validate()?;
    let spec = cfg.problem_config()?.build()?;
    let dir = cfg.out_dir();
    let report = match &spec.noise {
        NoiseModel::Finite(chain) => {
            chain.ergodicity()?;
            let profile = fit_mixing_constant(chain, &default_alpha_grid())?;
            let horizon = profile.tau_table.iter().map(|(_, t)| *t).max().unwrap_or(0) + 5;
            let tv = chain.tv_profile(horizon)?;
            write_text(&dir, "tv_profile.csv", &profile_csv(&tv))?;
            // bias of F at the root (or origin), one value per state
            let (x, y) = match spec.fixed_point() {
                Ok((x, y)) => (x.to_vec(), y.to_vec()),
                Err(_) => (vec![0.0; spec.dx], vec![0.0; spec.dy]),
            };
            let f: Vec<Vec<f64>> = (0..chain.n())
                .map(|i| spec.sample(Operator::F, &x, &y, &NoiseState::Finite(i)))
                .collect();
            if f.iter().any(|v| norm_sq(v) > 0.0) {
                write_text(
                    &dir,
                    "bias_profile.csv",
                    &profile_csv(&bias_profile(chain, &f, horizon)?),
                )?;
            }
            MixingReport::Finite {
                states: chain.n(),
                stationary: chain.stationary_distribution()?,
                tau_001: mixing_time(chain, 0.01)?,
                tv_profile_len: tv.len(),
                profile,
            }
        }
        NoiseModel::Ar(p) => MixingReport::Ar {
            surrogate: p.mixing_surrogate(),
        },
    };
    write_json(&dir, "mixing.json", &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_spacing() {
        assert_eq!(log_spaced(10, 1000, 3), vec![10, 100, 1000]);
        assert_eq!(log_spaced(0, 0, 3), Vec::<u64>::new());
        assert_eq!(log_spaced(5, 5, 4), vec![5]);
    }
}
