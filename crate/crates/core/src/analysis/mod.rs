//! Residuals, the Lyapunov function, theorem constants and bound, lemma
//! checks, and rate fits over trajectory ensembles.

mod constants;
mod lemmas;

use serde::{Deserialize, Serialize};

pub use constants::{compute_constants, theorem_bound, BoundConstants, D1_TERMS};
pub use lemmas::{
    check_as_lemmas, check_domination, check_expectation_lemmas, AsCheck, AsLemmaReport, DominationReport,
    DominationRow, ExpectationCheck, ExpectationReport, LemmaSummary, MIN_EXPECTATION_TRIALS,
};

use crate::engine::{StepSchedule, Trajectory};
use crate::error::{Error, Result};
use crate::linalg::norm_sq;
use crate::markov_noise::NoiseState;
use crate::problems::ProblemSpec;

/// `x̂ = x − H(y)`, `ŷ = y − y*`.
#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    pub x_hat: Vec<f64>,
    pub y_hat: Vec<f64>,
    pub z_hat_norm_sq: f64,
}

impl Residuals {
    pub fn x_hat_norm_sq(&self) -> f64 {
        norm_sq(&self.x_hat)
    }

    pub fn y_hat_norm_sq(&self) -> f64 {
        norm_sq(&self.y_hat)
    }
}

pub fn residuals(spec: &ProblemSpec, x: &[f64], y: &[f64]) -> Result<Residuals> {
    let (_, ystar) = spec.fixed_point()?;
    let hy = spec.h_of(y)?;
    let x_hat: Vec<f64> = x.iter().zip(&hy).map(|(a, b)| a - b).collect();
    let y_hat: Vec<f64> = y.iter().zip(ystar).map(|(a, b)| a - b).collect();
    let z_hat_norm_sq = norm_sq(&x_hat) + norm_sq(&y_hat);
    Ok(Residuals {
        x_hat,
        y_hat,
        z_hat_norm_sq,
    })
}

/// `ψ = F(x, y; ξ) − F(x, y)`, `ζ = G(x, y; ξ) − G(x, y)`.
pub fn noise_residuals(spec: &ProblemSpec, x: &[f64], y: &[f64], xi: &NoiseState) -> Result<(Vec<f64>, Vec<f64>)> {
    crate::engine::noise_residuals_at(spec, x, y, xi)
}

/// `(2B²/(μ_F μ_G)) β_k/α_k`.
pub fn lyapunov_weight(k: u64, schedule: &StepSchedule, b: f64, mu_f: f64, mu_g: f64) -> f64 {
    2.0 * b * b / (mu_f * mu_g) * schedule.beta(k) / schedule.alpha(k)
}

/// `V_k = E‖ŷ_k‖² + (2B²/(μ_F μ_G)) (β_k/α_k) E‖x̂_k‖²` from Monte Carlo means.
pub fn lyapunov(
    mean_yhat_sq: f64,
    mean_xhat_sq: f64,
    k: u64,
    schedule: &StepSchedule,
    constants: &BoundConstants,
) -> f64 {
    mean_yhat_sq + lyapunov_weight(k, schedule, constants.b, constants.mu_f, constants.mu_g) * mean_xhat_sq
}

/// Sample mean and standard error `sd/√n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                se: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n;
        if values.len() < 2 {
            return Self { mean, se: 0.0 };
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self {
            mean,
            se: (var / n).sqrt(),
        }
    }
}

/// Ensemble moments of the squared residual norms at one checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMoments {
    pub k: u64,
    pub xhat_sq: MeanSe,
    pub yhat_sq: MeanSe,
    pub zhat_sq: MeanSe,
}

/// Per-checkpoint moments across trials, reduced in trial order.
///
/// Every trajectory must carry the same checkpoint set.
pub fn ensemble_moments(spec: &ProblemSpec, ensemble: &[Trajectory]) -> Result<Vec<CheckpointMoments>> {
    let first = ensemble.first().ok_or(Error::InsufficientTrials { got: 0, need: 1 })?;
    let ks: Vec<u64> = first.checkpoints.iter().map(|c| c.k).collect();
    for t in ensemble {
        if t.checkpoints.len() != ks.len() || t.checkpoints.iter().zip(&ks).any(|(c, k)| c.k != *k) {
            return Err(Error::InvalidArgument(
                "trajectories have different checkpoint sets".into(),
            ));
        }
    }
    let n = ensemble.len();
    let mut out = Vec::with_capacity(ks.len());
    let (mut xs, mut ys, mut zs) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for (i, &k) in ks.iter().enumerate() {
        for (j, t) in ensemble.iter().enumerate() {
            let c = &t.checkpoints[i];
            let r = residuals(spec, &c.x, &c.y)?;
            xs[j] = r.x_hat_norm_sq();
            ys[j] = r.y_hat_norm_sq();
            zs[j] = r.z_hat_norm_sq;
        }
        out.push(CheckpointMoments {
            k,
            xhat_sq: MeanSe::of(&xs),
            yhat_sq: MeanSe::of(&ys),
            zhat_sq: MeanSe::of(&zs),
        });
    }
    Ok(out)
}

/// Least-squares fit of `log(value)` on `log(k+1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub k_window: (u64, u64),
    pub points: usize,
}

/// Minimum number of points inside the fit window.
pub const MIN_FIT_POINTS: usize = 8;

pub fn fit_rate(series: &[(u64, f64)], k_lo: u64) -> Result<RateFit> {
    let pts: Vec<(u64, f64)> = series.iter().copied().filter(|(k, _)| *k >= k_lo).collect();
    if let Some(&(k, value)) = pts.iter().find(|(_, v)| v.is_nan() || *v <= 0.0) {
        return Err(Error::NonPositive { k, value });
    }
    if pts.len() < MIN_FIT_POINTS {
        return Err(Error::InvalidArgument(format!(
            "rate fit needs at least {MIN_FIT_POINTS} points with k >= {k_lo}, got {}",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let lx: Vec<f64> = pts.iter().map(|(k, _)| ((k + 1) as f64).ln()).collect();
    let ly: Vec<f64> = pts.iter().map(|(_, v)| v.ln()).collect();
    // shifting by the first value keeps a constant series exactly constant
    let mx = lx[0] + lx.iter().map(|v| v - lx[0]).sum::<f64>() / n;
    let my = ly[0] + ly.iter().map(|v| v - ly[0]).sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("rate fit needs at least two distinct k".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 {
        1.0
    } else {
        (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0)
    };
    Ok(RateFit {
        slope,
        intercept,
        r2,
        k_window: (pts[0].0, pts[pts.len() - 1].0),
        points: pts.len(),
    })
}

/// Default fit window start: `max(K*, k_max/100)`.
pub fn default_fit_start(kstar: u64, k_max: u64) -> u64 {
    kstar.max(k_max / 100)
}
