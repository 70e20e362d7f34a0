use serde::{Deserialize, Serialize};

use super::{ensemble_moments, residuals, BoundConstants};
use crate::engine::{StepSchedule, Trajectory};
use crate::error::{Error, Result};
use crate::linalg::{dist, norm};
use crate::problems::{Operator, ProblemSpec};

/// Fewest trials for which Monte Carlo expectation checks are attempted.
pub const MIN_EXPECTATION_TRIALS: usize = 100;

/// One almost-sure inequality `lhs ≤ rhs` evaluated on one realized path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsCheck {
    pub lemma: String,
    pub trial: usize,
    pub k: u64,
    pub lhs: f64,
    pub rhs: f64,
}

impl AsCheck {
    pub fn passed(&self) -> bool {
        self.lhs <= self.rhs
    }

    pub fn margin(&self) -> f64 {
        self.rhs - self.lhs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaSummary {
    pub lemma: String,
    pub evaluated: usize,
    pub failed: usize,
    /// smallest `(rhs − lhs)/rhs` seen
    pub min_relative_margin: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AsLemmaReport {
    pub checks: Vec<AsCheck>,
}

impl AsLemmaReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(AsCheck::passed)
    }

    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed()).count()
    }

    /// Per-lemma counts in first-seen order.
    pub fn summary(&self) -> Vec<LemmaSummary> {
        let mut out: Vec<LemmaSummary> = Vec::new();
        for c in &self.checks {
            let rel = if c.rhs > 0.0 { c.margin() / c.rhs } else { c.margin() };
            let entry = match out.iter_mut().find(|s| s.lemma == c.lemma) {
                Some(e) => e,
                None => {
                    out.push(LemmaSummary {
                        lemma: c.lemma.clone(),
                        evaluated: 0,
                        failed: 0,
                        min_relative_margin: f64::INFINITY,
                    });
                    out.last_mut().expect("just pushed")
                }
            };
            entry.evaluated += 1;
            entry.failed += usize::from(!c.passed());
            entry.min_relative_margin = entry.min_relative_margin.min(rel);
        }
        out
    }
}

fn stacked_norm(x: &[f64], y: &[f64]) -> f64 {
    (norm(x).powi(2) + norm(y).powi(2)).sqrt()
}

/// Evaluates the growth bound at every checkpoint, and the drift and noise
/// bounds at every checkpoint with `k ≥ K*`, on each trajectory.
///
/// Drift checks need the lagged state `z_{k−τ(α_k)}` stored by the runner.
pub fn check_as_lemmas(
    spec: &ProblemSpec,
    ensemble: &[Trajectory],
    constants: &BoundConstants,
    schedule: &StepSchedule,
) -> Result<AsLemmaReport> {
    let b = constants.b;
    let off = constants.offset;
    let mut checks = Vec::new();
    for (trial, t) in ensemble.iter().enumerate() {
        let mut push = |lemma: &str, k: u64, lhs: f64, rhs: f64| {
            checks.push(AsCheck {
                lemma: lemma.into(),
                trial,
                k,
                lhs,
                rhs,
            })
        };
        for cp in &t.checkpoints {
            let (x, y, k) = (&cp.x, &cp.y, cp.k);
            let growth = b * (norm(x) + norm(y) + 1.0);
            for (name, which) in [("growth_F", Operator::F), ("growth_G", Operator::G)] {
                let sampled = norm(&spec.sample(which, x, y, &cp.xi));
                let mean = spec.mean(which, x, y).map(|m| norm(&m)).unwrap_or(0.0);
                push(name, k, sampled.max(mean), growth);
            }
            if k < constants.kstar {
                continue;
            }
            let lag = cp.lagged.as_ref().ok_or(Error::MissingLaggedState(k))?;
            let window = schedule.tail_step_sum(k, lag.tau)?;
            let z_now = stacked_norm(x, y);
            let z_lag = stacked_norm(&lag.x, &lag.y);
            let dz = (dist(x, &lag.x).powi(2) + dist(y, &lag.y).powi(2)).sqrt();
            push("z_drift_lagged", k, dz, 4.0 * b * window * (z_lag + 1.0));
            push("z_drift_current", k, dz, 12.0 * b * window * (z_now + 1.0));

            let r_now = residuals(spec, x, y)?;
            let r_lag = residuals(spec, &lag.x, &lag.y)?;
            let zh_now = r_now.z_hat_norm_sq.sqrt();
            let zh_lag = r_lag.z_hat_norm_sq.sqrt();
            let dzh = (dist(&r_now.x_hat, &r_lag.x_hat).powi(2) + dist(&r_now.y_hat, &r_lag.y_hat).powi(2)).sqrt();
            let s = (1.0 + b).powi(2);
            push("zhat_drift_lagged", k, dzh, 4.0 * b * s * window * (zh_lag + off));
            push("zhat_drift_current", k, dzh, 12.0 * b * s * window * (zh_now + off));
            push(
                "zhat_drift_sq",
                k,
                dzh * dzh,
                288.0 * b * b * s * s * window * window * (r_now.z_hat_norm_sq + off * off),
            );
            let noise_rhs = 2.0 * b * (1.0 + b) * (zh_now + off);
            if let (Some(psi), Some(zeta)) = (&cp.psi, &cp.zeta) {
                push("psi_bound", k, norm(psi), noise_rhs);
                push("zeta_bound", k, norm(zeta), noise_rhs);
            }
        }
    }
    Ok(AsLemmaReport { checks })
}

/// A one-step expectation inequality at `k`, or the uniform bound at `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectationCheck {
    pub lemma: String,
    pub k: u64,
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    /// `lhs ≤ rhs + 3·se` (for the uniform bound both sides are natural logs and no slack is used)
    pub passed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpectationReport {
    pub trials: usize,
    pub checks: Vec<ExpectationCheck>,
}

impl ExpectationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Standard errors of slack in the Monte Carlo comparisons.
const SE_SLACK: f64 = 3.0;

/// Monte Carlo check of the one-step recursions for `E‖x̂‖²` and `E‖ŷ‖²` at each
/// `k` in `k_list` (needs checkpoints at `k` and `k+1`), and of
/// `log E‖ẑ_k‖² ≤ log D` at every checkpoint.
pub fn check_expectation_lemmas(
    spec: &ProblemSpec,
    ensemble: &[Trajectory],
    constants: &BoundConstants,
    schedule: &StepSchedule,
    k_list: &[u64],
) -> Result<ExpectationReport> {
    if ensemble.len() < MIN_EXPECTATION_TRIALS {
        return Err(Error::InsufficientTrials {
            got: ensemble.len(),
            need: MIN_EXPECTATION_TRIALS,
        });
    }
    let moments = ensemble_moments(spec, ensemble)?;
    let at = |k: u64| {
        moments
            .binary_search_by_key(&k, |m| m.k)
            .map(|i| moments[i])
            .map_err(|_| Error::InvalidArgument(format!("no checkpoint at k = {k}")))
    };
    let c = constants;
    let b = c.b;
    let off_sq = c.offset * c.offset;
    let mut checks = Vec::new();
    for &k in k_list {
        if k < c.kstar {
            return Err(Error::BelowKstar { k, kstar: c.kstar });
        }
        let now = at(k)?;
        let next = at(k + 1)?;
        let a = schedule.alpha(k);
        let bt = schedule.beta(k);
        let window = schedule.tail_step_sum(k, schedule.tau_at(k, c.c))?;

        let bracket = 5.0 * bt * bt / (c.mu_f * a) + bt * bt + window * a;
        let g6 = 32.0 * (1.0 + b).powi(6);
        let rhs_x = (1.0 - c.mu_f * a) * now.xhat_sq.mean + g6 * bracket * now.zhat_sq.mean + g6 * off_sq * bracket;
        checks.push(ExpectationCheck {
            lemma: "xhat_recursion".into(),
            k,
            lhs: next.xhat_sq.mean,
            lhs_se: next.xhat_sq.se,
            rhs: rhs_x,
            passed: next.xhat_sq.mean <= rhs_x + SE_SLACK * next.xhat_sq.se,
        });

        let g4 = (1.0 + b).powi(4);
        let rhs_y = (1.0 - c.mu_g * bt) * now.yhat_sq.mean
            + 18.0 * g4 * (a * bt + 10.0 * b * window * bt + 3.0 * bt * bt) * now.zhat_sq.mean
            + 24.0 * g4 * off_sq * (bt * bt + 7.0 * b * window * bt)
            + b * b / c.mu_g * bt * now.xhat_sq.mean;
        checks.push(ExpectationCheck {
            lemma: "yhat_recursion".into(),
            k,
            lhs: next.yhat_sq.mean,
            lhs_se: next.yhat_sq.se,
            rhs: rhs_y,
            passed: next.yhat_sq.mean <= rhs_y + SE_SLACK * next.yhat_sq.se,
        });
    }
    for m in &moments {
        let lhs = m.zhat_sq.mean.ln();
        checks.push(ExpectationCheck {
            lemma: "zhat_uniform_bound".into(),
            k: m.k,
            lhs,
            lhs_se: 0.0,
            rhs: c.log_d,
            passed: lhs <= c.log_d && c.log_d.is_finite(),
        });
    }
    Ok(ExpectationReport {
        trials: ensemble.len(),
        checks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominationRow {
    pub k: u64,
    pub log_v: f64,
    pub log_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominationReport {
    pub rows: Vec<DominationRow>,
    pub all_finite: bool,
}

impl DominationReport {
    pub fn all_dominated(&self) -> bool {
        self.all_finite && self.rows.iter().all(|r| r.log_v <= r.log_bound)
    }
}

/// Compares `log V_k` with the bound at every series point `k > K*` (the bound
/// indexed `k − 1` covers `V_k`). `V_{K*}` is read from the series.
pub fn check_domination(
    series: &[(u64, f64)],
    constants: &BoundConstants,
    schedule: &StepSchedule,
) -> Result<DominationReport> {
    let kstar = constants.kstar;
    let v_kstar = series
        .iter()
        .find(|(k, _)| *k == kstar)
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::InvalidArgument(format!("series has no value at K* = {kstar}")))?;
    let mut rows = Vec::new();
    let mut all_finite = true;
    for &(k, v) in series.iter().filter(|(k, _)| *k > kstar) {
        let log_bound = super::theorem_bound(k - 1, constants, v_kstar, schedule)?;
        all_finite &= log_bound.is_finite();
        rows.push(DominationRow {
            k,
            log_v: v.ln(),
            log_bound,
        });
    }
    Ok(DominationReport { rows, all_finite })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use nalgebra::DMatrix;

    use super::*;
    use crate::analysis::compute_constants;
    use crate::engine::{checkpoint_grid, run_trajectory, Init, RunOptions};
    use crate::markov_noise::FiniteChain;
    use crate::problems::{estimate_b, make_linear, LinearConfig};

    fn problem(bias: bool) -> ProblemSpec {
        let m = |v| DMatrix::from_row_slice(1, 1, &[v]);
        let mut cfg = LinearConfig::from_blocks(&m(2.0), &m(0.5), &m(0.5), &m(1.5));
        if bias {
            cfg.bias_f = vec![vec![0.5], vec![-0.5]];
            cfg.bias_g = vec![vec![-0.3], vec![0.3]];
        }
        let chain = FiniteChain::new(vec![vec![0.7, 0.3], vec![0.3, 0.7]]).unwrap();
        make_linear(&cfg, Arc::new(chain)).unwrap()
    }

    fn setup(bias: bool, init: Init, trials: usize) -> (ProblemSpec, StepSchedule, BoundConstants, Vec<Trajectory>) {
        let p = problem(bias);
        let s = StepSchedule::new(2.0, 1.5);
        let b = estimate_b(&p, 0.0).b;
        let c = 1.0 / 0.4f64.ln().abs();
        let consts = compute_constants(&p, &s, b, c, 1.0).unwrap();
        let k_max = 3000;
        let grid = crate::engine::merge_grid(&checkpoint_grid(k_max, 40), &[consts.kstar, consts.kstar + 1], k_max);
        let opts = RunOptions {
            init,
            lag_mixing_constant: Some(c),
        };
        let ens = (0..trials)
            .map(|i| run_trajectory(&p, &s, k_max, i as u64, &grid, &opts).unwrap())
            .collect();
        (p, s, consts, ens)
    }

    #[test]
    fn fixed_point_path_has_positive_margins() {
        let init = Init::Fixed {
            x: vec![0.0],
            y: vec![0.0],
        };
        let (p, s, c, ens) = setup(false, init, 2);
        let rep = check_as_lemmas(&p, &ens, &c, &s).unwrap();
        assert!(!rep.checks.is_empty());
        assert!(rep.checks.iter().all(|c| c.margin() > 0.0));
    }

    #[test]
    fn noisy_paths_pass_and_corrupted_b_fails() {
        let (p, s, c, ens) = setup(true, Init::default(), 5);
        let rep = check_as_lemmas(&p, &ens, &c, &s).unwrap();
        assert!(rep.all_passed(), "{:?}", rep.summary());
        let mut bad = c;
        bad.b /= 100.0;
        assert!(check_as_lemmas(&p, &ens, &bad, &s).unwrap().failures() > 0);
    }

    #[test]
    fn missing_lag_is_reported() {
        let (p, s, c, mut ens) = setup(true, Init::default(), 1);
        for cp in &mut ens[0].checkpoints {
            cp.lagged = None;
        }
        assert!(matches!(
            check_as_lemmas(&p, &ens, &c, &s),
            Err(Error::MissingLaggedState(_))
        ));
    }

    #[test]
    fn expectation_checks_refuse_small_ensembles_and_pass_on_large() {
        let (p, s, c, ens) = setup(true, Init::default(), 120);
        let k = c.kstar;
        assert!(matches!(
            check_expectation_lemmas(&p, &ens[..50], &c, &s, &[k]),
            Err(Error::InsufficientTrials { got: 50, need: 100 })
        ));
        let rep = check_expectation_lemmas(&p, &ens, &c, &s, &[k]).unwrap();
        assert!(rep.all_passed());
        assert_eq!(
            rep.checks.iter().filter(|c| c.lemma == "zhat_uniform_bound").count(),
            ens[0].checkpoints.len()
        );
    }

    #[test]
    fn domination_on_a_small_ensemble() {
        let (p, s, c, ens) = setup(true, Init::default(), 20);
        let moments = crate::analysis::ensemble_moments(&p, &ens).unwrap();
        let series: Vec<(u64, f64)> = moments
            .iter()
            .map(|m| {
                (
                    m.k,
                    crate::analysis::lyapunov(m.yhat_sq.mean, m.xhat_sq.mean, m.k, &s, &c),
                )
            })
            .collect();
        let rep = check_domination(&series, &c, &s).unwrap();
        assert!(rep.all_dominated());
        assert!(!rep.rows.is_empty());
    }
}
