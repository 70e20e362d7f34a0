//! Markovian noise sources and finite-chain mixing diagnostics.
//!
//! A [`FiniteChain`] is the enumerable noise model used for exact oracles:
//! stationary laws, total-variation profiles, mixing times `τ(α)` and the
//! conditional-expectation bias of a state-indexed function. An
//! [`ArSource`] generates the autoregressive regression data of the
//! robust-identification demo; its state space is continuous, so only a
//! surrogate mixing constant is reported for it.
//!
//! Matrix powers are formed by repeated multiplication. For the chain sizes
//! this crate targets (n ≤ 64) that is exact enough and avoids an
//! eigendecomposition.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ErgodicityFailure, Error, Result};

/// Row sums must match 1 to this tolerance.
pub const ROW_SUM_TOL: f64 = 1e-12;
/// Probability vectors passed to [`tv_distance`] must sum to 1 to this tolerance.
pub const PROB_SUM_TOL: f64 = 1e-9;
/// Default cap on the matrix-power scan of [`mixing_time`].
pub const DEFAULT_MIXING_CAP: usize = 1_000_000;

/// Row-major transition matrix as read from a config file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    pub transition: Vec<Vec<f64>>,
}

/// A finite-state Markov chain with a row-stochastic transition matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteChain {
    n: usize,
    /// row-major
    p: Vec<f64>,
    cumulative: Vec<f64>,
    ergodicity: std::result::Result<(), ErgodicityFailure>,
}

impl FiniteChain {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::InvalidChain(format!("need at least 2 states, got {n}")));
        }
        let mut p = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::InvalidChain(format!(
                    "row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            if let Some(bad) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidChain(format!("row {i} has entry {bad} outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidChain(format!("row {i} sums to {sum}")));
            }
            p.extend_from_slice(row);
        }
        let mut cumulative = vec![0.0; n * n];
        for i in 0..n {
            let row = &p[i * n..(i + 1) * n];
            let last_positive = row.iter().rposition(|&v| v > 0.0).unwrap_or(n - 1);
            let mut acc = 0.0;
            for j in 0..n {
                acc += row[j];
                cumulative[i * n + j] = if j >= last_positive { 1.0 } else { acc };
            }
        }
        let ergodicity = check_ergodicity(n, &p);
        Ok(Self {
            n,
            p,
            cumulative,
            ergodicity,
        })
    }

    pub fn from_config(cfg: &ChainConfig) -> Result<Self> {
        Self::new(cfg.transition.clone())
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::new(
            (0..n)
                .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.p[from * self.n + to]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.p[i * self.n..(i + 1) * self.n]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn is_ergodic(&self) -> bool {
        self.ergodicity.is_ok()
    }

    /// `Ok(())` when the chain is irreducible and aperiodic.
    pub fn ergodicity(&self) -> Result<()> {
        self.ergodicity.map_err(Error::NotErgodic)
    }

    /// Draws the successor of `from`.
    #[inline]
    pub fn sample_next<R: Rng + ?Sized>(&self, from: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let cum = &self.cumulative[from * self.n..(from + 1) * self.n];
        cum.iter().position(|&c| u < c).unwrap_or(self.n - 1)
    }

    /// Draws a state from the probability vector `dist`.
    pub fn sample_from<R: Rng + ?Sized>(dist: &[f64], rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &w) in dist.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        dist.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }

    /// Solves `πP = π`, `Σπ = 1`.
    pub fn stationary_distribution(&self) -> Result<Vec<f64>> {
        self.ergodicity()?;
        let n = self.n;
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = self.prob(j, i) - if i == j { 1.0 } else { 0.0 };
            }
        }
        for j in 0..n {
            m[(n - 1, j)] = 1.0;
        }
        let mut rhs = DVector::zeros(n);
        rhs[n - 1] = 1.0;
        let sol = m
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Singular("stationary system".into()))?;
        let mut pi: Vec<f64> = sol.iter().map(|&v| v.max(0.0)).collect();
        let total: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|v| *v /= total);
        // one power-iteration polish step tightens the residual
        let polished = self.left_multiply(&pi);
        let residual = polished.iter().zip(&pi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if residual > 1e-10 {
            return Err(Error::Singular(format!(
                "stationary residual {residual:e} exceeds 1e-10"
            )));
        }
        Ok(pi)
    }

    /// `v P` for a row vector `v`.
    pub fn left_multiply(&self, v: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n];
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            for (o, &pij) in out.iter_mut().zip(self.row(i)) {
                *o += vi * pij;
            }
        }
        out
    }

    /// `P^k` rows for k = 0, 1, ... passed to `visit` until it returns `false`
    /// or `k_max` is reached. Returns the last k visited.
    fn scan_powers(&self, k_max: usize, mut visit: impl FnMut(usize, &[f64]) -> bool) -> usize {
        let n = self.n;
        let mut q = vec![0.0; n * n];
        for i in 0..n {
            q[i * n + i] = 1.0;
        }
        let mut next = vec![0.0; n * n];
        for k in 0..=k_max {
            if !visit(k, &q) || k == k_max {
                return k;
            }
            next.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..n {
                for l in 0..n {
                    let qil = q[i * n + l];
                    if qil == 0.0 {
                        continue;
                    }
                    let prow = self.row(l);
                    let out = &mut next[i * n..(i + 1) * n];
                    for (o, &plj) in out.iter_mut().zip(prow) {
                        *o += qil * plj;
                    }
                }
            }
            std::mem::swap(&mut q, &mut next);
        }
        k_max
    }

    /// `max_ξ₀ TV(P^k(ξ₀, ·), π)` for k = 0..=k_max.
    pub fn tv_profile(&self, k_max: usize) -> Result<Vec<f64>> {
        let pi = self.stationary_distribution()?;
        let n = self.n;
        let mut out = Vec::with_capacity(k_max + 1);
        self.scan_powers(k_max, |_, q| {
            out.push(max_row_tv(q, n, &pi));
            true
        });
        Ok(out)
    }
}

fn max_row_tv(q: &[f64], n: usize, pi: &[f64]) -> f64 {
    (0..n).map(|i| half_l1(&q[i * n..(i + 1) * n], pi)).fold(0.0, f64::max)
}

fn half_l1(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

fn check_ergodicity(n: usize, p: &[f64]) -> std::result::Result<(), ErgodicityFailure> {
    let edge = |i: usize, j: usize| p[i * n + j] > 0.0;
    // forward BFS levels from state 0
    let mut level = vec![usize::MAX; n];
    level[0] = 0;
    let mut queue = std::collections::VecDeque::from([0usize]);
    while let Some(u) = queue.pop_front() {
        for v in 0..n {
            if edge(u, v) && level[v] == usize::MAX {
                level[v] = level[u] + 1;
                queue.push_back(v);
            }
        }
    }
    if let Some(s) = level.iter().position(|&l| l == usize::MAX) {
        return Err(ErgodicityFailure::Reducible { unreachable_state: s });
    }
    // backward reachability
    let mut seen = vec![false; n];
    seen[0] = true;
    let mut stack = vec![0usize];
    while let Some(v) = stack.pop() {
        for (u, s) in seen.iter_mut().enumerate() {
            if edge(u, v) && !*s {
                *s = true;
                stack.push(u);
            }
        }
    }
    if let Some(s) = seen.iter().position(|&b| !b) {
        return Err(ErgodicityFailure::Reducible { unreachable_state: s });
    }
    // period = gcd over edges of (level[u] + 1 - level[v]); equals the gcd of
    // cycle lengths through state 0 for an irreducible chain
    let mut g = 0usize;
    for u in 0..n {
        for v in 0..n {
            if edge(u, v) {
                let diff = (level[u] + 1).abs_diff(level[v]);
                g = gcd(g, diff);
            }
        }
    }
    if g == 1 {
        Ok(())
    } else {
        Err(ErgodicityFailure::Periodic { period: g })
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Total-variation distance `½ Σ|pᵢ − qᵢ|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            found: q.len(),
        });
    }
    for v in [p, q] {
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL || v.iter().any(|x| *x < -PROB_SUM_TOL) {
            return Err(Error::NotNormalized { sum });
        }
    }
    Ok(half_l1(p, q).clamp(0.0, 1.0))
}

/// Smallest `k ≥ 0` with `max_ξ₀ TV(P^k(ξ₀,·), π) ≤ alpha`.
pub fn mixing_time(chain: &FiniteChain, alpha: f64) -> Result<usize> {
    mixing_time_capped(chain, alpha, DEFAULT_MIXING_CAP)
}

pub fn mixing_time_capped(chain: &FiniteChain, alpha: f64, cap: usize) -> Result<usize> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(mixing_times(chain, &[alpha], cap)?[0])
}

/// Mixing times for several thresholds from a single matrix-power scan.
fn mixing_times(chain: &FiniteChain, alphas: &[f64], cap: usize) -> Result<Vec<usize>> {
    let pi = chain.stationary_distribution()?;
    let n = chain.n();
    let mut found: Vec<Option<usize>> = vec![None; alphas.len()];
    let mut last_tv = f64::NAN;
    chain.scan_powers(cap, |k, q| {
        let tv = max_row_tv(q, n, &pi);
        last_tv = tv;
        for (slot, &a) in found.iter_mut().zip(alphas) {
            if slot.is_none() && tv <= a {
                *slot = Some(k);
            }
        }
        found.iter().any(Option::is_none)
    });
    found
        .into_iter()
        .map(|f| f.ok_or(Error::MixingCapExceeded { cap, tv: last_tv }))
        .collect()
}

/// Fitted geometric mixing constant `τ(α) ≈ C log(1/α)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingProfile {
    /// through-origin least-squares slope of τ against log(1/α)
    pub c: f64,
    /// `(α, τ(α))`, sorted by decreasing α
    pub tau_table: Vec<(f64, usize)>,
    /// uncentered R² of the through-origin fit
    pub fit_r2: f64,
    /// diagnostic: intercept and slope of the unconstrained fit
    pub free_intercept: f64,
    pub free_slope: f64,
}

/// Least-squares fit of `tau ≈ c·x` through the origin.
///
/// Returns `(c, r2, free_intercept, free_slope)` where `r2` is the uncentered
/// coefficient of determination and the free fit includes an intercept.
pub fn fit_through_origin(x: &[f64], tau: &[f64]) -> Result<(f64, f64, f64, f64)> {
    if x.len() != tau.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: tau.len(),
        });
    }
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateDesign("all regressors are zero".into()));
    }
    let sxy: f64 = x.iter().zip(tau).map(|(a, b)| a * b).sum();
    let c = sxy / sxx;
    let ss_res: f64 = x.iter().zip(tau).map(|(a, b)| (b - c * a).powi(2)).sum();
    let ss_tot: f64 = tau.iter().map(|b| b * b).sum();
    let r2 = if ss_tot == 0.0 {
        1.0
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };

    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = tau.iter().sum::<f64>() / n;
    let cxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if cxx == 0.0 {
        return Err(Error::DegenerateDesign("all alphas are equal".into()));
    }
    let cxy: f64 = x.iter().zip(tau).map(|(a, b)| (a - mx) * (b - my)).sum();
    let free_slope = cxy / cxx;
    Ok((c, r2, my - free_slope * mx, free_slope))
}

/// Computes `τ(α)` on the grid and fits `τ(α) = C log(1/α)`.
pub fn fit_mixing_constant(chain: &FiniteChain, alphas: &[f64]) -> Result<MixingProfile> {
    let mut distinct: Vec<f64> = alphas.to_vec();
    distinct.sort_by(|a, b| b.total_cmp(a));
    distinct.dedup();
    if let Some(bad) = distinct.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
        return Err(Error::InvalidArgument(format!("alpha {bad} outside (0, 1)")));
    }
    if distinct.len() == 1 {
        return Err(Error::DegenerateDesign("all alphas are equal".into()));
    }
    if distinct.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "need at least 4 distinct alphas, got {}",
            distinct.len()
        )));
    }
    let taus = mixing_times(chain, &distinct, DEFAULT_MIXING_CAP)?;
    let x: Vec<f64> = distinct.iter().map(|a| (1.0 / a).ln()).collect();
    let y: Vec<f64> = taus.iter().map(|&t| t as f64).collect();
    let (c, fit_r2, free_intercept, free_slope) = fit_through_origin(&x, &y)?;
    Ok(MixingProfile {
        c,
        tau_table: distinct.into_iter().zip(taus).collect(),
        fit_r2,
        free_intercept,
        free_slope,
    })
}

/// Default α grid for fitting C: eleven log-spaced points from 1e-1 to 1e-6.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..11).map(|i| 10f64.powf(-1.0 - 0.5 * i as f64)).collect()
}

/// Exact conditional-expectation bias `max_ξ₀ ‖(P^k f)(ξ₀) − Σπᵢfᵢ‖` for k = 0..=k_max.
///
/// `f[i]` is the vector value at state i.
pub fn bias_profile(chain: &FiniteChain, f: &[Vec<f64>], k_max: usize) -> Result<Vec<f64>> {
    let pi = chain.stationary_distribution()?;
    let n = chain.n();
    if f.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: f.len(),
        });
    }
    let m = f.first().map_or(0, Vec::len);
    if let Some(bad) = f.iter().find(|v| v.len() != m) {
        return Err(Error::DimensionMismatch {
            expected: m,
            found: bad.len(),
        });
    }
    let mean: Vec<f64> = (0..m).map(|c| pi.iter().zip(f).map(|(w, v)| w * v[c]).sum()).collect();
    let mut g: Vec<Vec<f64>> = f.to_vec();
    let mut out = Vec::with_capacity(k_max + 1);
    for k in 0..=k_max {
        let bias = g
            .iter()
            .map(|gi| gi.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        out.push(bias);
        if k == k_max {
            break;
        }
        g = (0..n)
            .map(|i| {
                let mut acc = vec![0.0; m];
                for (j, gj) in g.iter().enumerate() {
                    let pij = chain.prob(i, j);
                    if pij != 0.0 {
                        acc.iter_mut().zip(gj).for_each(|(a, b)| *a += pij * b);
                    }
                }
                acc
            })
            .collect();
    }
    Ok(out)
}

/// Formats a `(k, value)` profile as CSV.
pub fn profile_csv(values: &[f64]) -> String {
    let mut s = String::from("k,value\n");
    for (k, v) in values.iter().enumerate() {
        let _ = writeln!(s, "{k},{v:?}");
    }
    s
}

/// Parameters of the autoregressive regression-data generator
/// `ξ¹ₖ = Aξ¹ₖ₋₁ + e₁Wₖ`, `ξ²ₖ = ⟨x_true, ξ¹ₖ⟩ + Vₖ`.
///
/// `A` is stored through its first subdiagonal, so it is strictly lower
/// triangular and hence nilpotent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArParams {
    /// `A[i][i-1]` for i = 1..d
    pub subdiagonal: Vec<f64>,
    pub x_true: Vec<f64>,
    /// standard deviation of the regressor innovation W
    #[serde(default = "one")]
    pub innovation_std: f64,
    /// standard deviation of the observation noise V
    #[serde(default = "one")]
    pub noise_std: f64,
}

fn one() -> f64 {
    1.0
}

/// Surrogate mixing description for the AR source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingSurrogate {
    pub spectral_radius: f64,
    /// steps after which the regressor no longer depends on its initial value
    pub memory_length: usize,
    /// `memory_length / ln 10`, so that `C log(1/α) ≥ memory_length` for all α ≤ 0.1
    pub c_surrogate: f64,
    pub caveat: String,
}

impl ArParams {
    pub fn dim(&self) -> usize {
        self.x_true.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::config("x_true", "dimension must be at least 1"));
        }
        if self.subdiagonal.len() != d - 1 {
            return Err(Error::config(
                "subdiagonal",
                format!("expected {} entries for d = {d}, got {}", d - 1, self.subdiagonal.len()),
            ));
        }
        if self.innovation_std < 0.0 || self.noise_std < 0.0 {
            return Err(Error::config("noise_std", "standard deviations must be nonnegative"));
        }
        if self.spectral_radius() >= 1.0 {
            return Err(Error::config("subdiagonal", "spectral radius of A must be below 1"));
        }
        Ok(())
    }

    /// Strictly lower-triangular matrices are nilpotent.
    pub fn spectral_radius(&self) -> f64 {
        0.0
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut a = DMatrix::zeros(d, d);
        for (i, &v) in self.subdiagonal.iter().enumerate() {
            a[(i + 1, i)] = v;
        }
        a
    }

    /// Nilpotency index of A: 1 + the longest run of consecutive nonzero subdiagonal entries.
    pub fn memory_length(&self) -> usize {
        let mut best = 0;
        let mut run = 0;
        for &v in &self.subdiagonal {
            run = if v != 0.0 { run + 1 } else { 0 };
            best = best.max(run);
        }
        best + 1
    }

    pub fn mixing_surrogate(&self) -> MixingSurrogate {
        let memory_length = self.memory_length();
        MixingSurrogate {
            spectral_radius: self.spectral_radius(),
            memory_length,
            c_surrogate: memory_length as f64 / 10f64.ln(),
            caveat: "continuous state space: τ(α) is not computed; A is nilpotent, so the regressor \
                     forgets its initial value after memory_length steps and C is a surrogate"
                .into(),
        }
    }

    /// Stationary covariance of the regressor, `Σ = Σⱼ Aʲ e₁e₁ᵀ (Aʲ)ᵀ σ_W²` (a finite sum).
    pub fn stationary_covariance(&self) -> DMatrix<f64> {
        let d = self.dim();
        let a = self.matrix();
        let mut v = DVector::zeros(d);
        v[0] = self.innovation_std;
        let mut sigma = DMatrix::zeros(d, d);
        for _ in 0..d {
            sigma += &v * v.transpose();
            v = &a * v;
        }
        sigma
    }
}

/// Current state of the AR generator.
#[derive(Debug, Clone, PartialEq)]
pub struct ArState {
    pub regressor: Vec<f64>,
    pub response: f64,
}

/// One realized noise state `ξ`.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseState {
    Finite(usize),
    Ar(ArState),
}

impl NoiseState {
    pub fn index(&self) -> Option<usize> {
        match self {
            Self::Finite(i) => Some(*i),
            Self::Ar(_) => None,
        }
    }
}

/// The noise model behind a problem: either enumerable or AR.
#[derive(Debug, Clone)]
pub enum NoiseModel {
    Finite(Arc<FiniteChain>),
    Ar(Arc<ArParams>),
}

impl NoiseModel {
    pub fn finite_chain(&self) -> Option<&FiniteChain> {
        match self {
            Self::Finite(c) => Some(c),
            Self::Ar(_) => None,
        }
    }

    /// Fresh, uninitialized source.
    pub fn source(&self) -> MarkovSource {
        match self {
            Self::Finite(c) => MarkovSource::Finite {
                chain: Arc::clone(c),
                state: None,
            },
            Self::Ar(p) => MarkovSource::Ar(ArSource {
                params: Arc::clone(p),
                state: None,
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ArSource {
    params: Arc<ArParams>,
    state: Option<NoiseState>,
}

impl ArSource {
    fn advance<R: Rng + ?Sized>(params: &ArParams, st: &mut ArState, rng: &mut R) {
        let d = params.dim();
        for i in (1..d).rev() {
            st.regressor[i] = params.subdiagonal[i - 1] * st.regressor[i - 1];
        }
        let w: f64 = StandardNormal.sample(rng);
        st.regressor[0] = params.innovation_std * w;
        let v: f64 = StandardNormal.sample(rng);
        st.response = crate::linalg::dot(&params.x_true, &st.regressor) + params.noise_std * v;
    }
}

/// Generator of the noise sequence `ξ₀, ξ₁, ...`. Single-owner mutable state.
#[derive(Debug, Clone)]
pub enum MarkovSource {
    Finite {
        chain: Arc<FiniteChain>,
        state: Option<NoiseState>,
    },
    Ar(ArSource),
}

impl MarkovSource {
    pub fn state(&self) -> Option<&NoiseState> {
        match self {
            Self::Finite { state, .. } => state.as_ref(),
            Self::Ar(s) => s.state.as_ref(),
        }
    }

    pub fn set_state(&mut self, new: NoiseState) -> Result<()> {
        match (self, new) {
            (Self::Finite { chain, state }, NoiseState::Finite(i)) => {
                if i >= chain.n() {
                    return Err(Error::InvalidArgument(format!("state {i} out of range")));
                }
                *state = Some(NoiseState::Finite(i));
            }
            (Self::Ar(s), NoiseState::Ar(a)) => {
                if a.regressor.len() != s.params.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: s.params.dim(),
                        found: a.regressor.len(),
                    });
                }
                s.state = Some(NoiseState::Ar(a));
            }
            _ => return Err(Error::InvalidArgument("noise state kind does not match source".into())),
        }
        Ok(())
    }

    /// Initial state: a draw from π for finite chains; for the AR source, a
    /// burn-in of `memory_length` steps from zero, which is exactly stationary.
    pub fn init_stationary<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        match self {
            Self::Finite { chain, state } => {
                let pi = chain.stationary_distribution()?;
                *state = Some(NoiseState::Finite(FiniteChain::sample_from(&pi, rng)));
            }
            Self::Ar(s) => {
                let mut st = ArState {
                    regressor: vec![0.0; s.params.dim()],
                    response: 0.0,
                };
                for _ in 0..s.params.memory_length() {
                    ArSource::advance(&s.params, &mut st, rng);
                }
                s.state = Some(NoiseState::Ar(st));
            }
        }
        Ok(())
    }

    /// Advances one transition and returns the new state.
    #[inline]
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<&NoiseState> {
        match self {
            Self::Finite { chain, state } => {
                let Some(NoiseState::Finite(i)) = state.as_mut() else {
                    return Err(Error::Uninitialized);
                };
                *i = chain.sample_next(*i, rng);
            }
            Self::Ar(s) => {
                let Some(NoiseState::Ar(st)) = s.state.as_mut() else {
                    return Err(Error::Uninitialized);
                };
                ArSource::advance(&s.params, st, rng);
            }
        }
        Ok(self.state().expect("initialized above"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sym2() -> FiniteChain {
        FiniteChain::new(vec![vec![0.7, 0.3], vec![0.3, 0.7]]).unwrap()
    }

    #[test]
    fn identity_chain_is_absorbing() {
        let chain = Arc::new(FiniteChain::identity(3).unwrap());
        let mut src = NoiseModel::Finite(chain).source();
        src.set_state(NoiseState::Finite(0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert_eq!(src.step(&mut rng).unwrap(), &NoiseState::Finite(0));
        }
    }

    #[test]
    fn uninitialized_source_errors() {
        let mut src = NoiseModel::Finite(Arc::new(sym2())).source();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(src.step(&mut rng), Err(Error::Uninitialized)));
    }

    #[test]
    fn one_step_frequency_matches_row() {
        let chain = sym2();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let hits = (0..n).filter(|_| chain.sample_next(0, &mut rng) == 1).count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.3).abs() < 0.005, "freq = {freq}");
    }

    #[test]
    fn ar_without_memory_is_iid() {
        let params = Arc::new(ArParams {
            subdiagonal: vec![0.0, 0.0],
            x_true: vec![0.0; 3],
            innovation_std: 1.0,
            noise_std: 1.0,
        });
        let mut src = NoiseModel::Ar(params).source();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        src.init_stationary(&mut rng).unwrap();
        let mut sum_sq = 0.0;
        let mut resp_sq = 0.0;
        let n = 20_000;
        for _ in 0..n {
            let NoiseState::Ar(st) = src.step(&mut rng).unwrap() else {
                unreachable!()
            };
            assert_eq!(st.regressor[1], 0.0);
            assert_eq!(st.regressor[2], 0.0);
            sum_sq += st.regressor[0] * st.regressor[0];
            resp_sq += st.response * st.response;
        }
        assert!((sum_sq / n as f64 - 1.0).abs() < 0.05);
        assert!((resp_sq / n as f64 - 1.0).abs() < 0.05);
    }

    #[test]
    fn stationary_examples() {
        let half = FiniteChain::new(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let pi = half.stationary_distribution().unwrap();
        assert!((pi[0] - 0.5).abs() < 1e-14 && (pi[1] - 0.5).abs() < 1e-14);

        let c = FiniteChain::new(vec![vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        let pi = c.stationary_distribution().unwrap();
        assert!((pi[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((pi[1] - 1.0 / 3.0).abs() < 1e-12);

        let id = FiniteChain::identity(2).unwrap();
        assert!(matches!(
            id.stationary_distribution(),
            Err(Error::NotErgodic(ErgodicityFailure::Reducible { .. }))
        ));
    }

    #[test]
    fn periodic_chain_detected() {
        let flip = FiniteChain::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(
            flip.ergodicity().unwrap_err().to_string(),
            "chain is not ergodic: periodic with period 2"
        );
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(FiniteChain::new(vec![vec![0.5, 0.6], vec![0.5, 0.5]]).is_err());
        assert!(FiniteChain::new(vec![vec![1.5, -0.5], vec![0.5, 0.5]]).is_err());
        assert!(FiniteChain::new(vec![vec![1.0]]).is_err());
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_distance(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!((tv_distance(&[0.7, 0.3], &[0.5, 0.5]).unwrap() - 0.2).abs() < 1e-15);
        assert!(matches!(
            tv_distance(&[1.0], &[0.5, 0.5]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            tv_distance(&[0.7, 0.7], &[0.5, 0.5]),
            Err(Error::NotNormalized { .. })
        ));
    }

    #[test]
    fn mixing_time_examples() {
        assert_eq!(mixing_time(&sym2(), 0.01).unwrap(), 5);
        let same = FiniteChain::new(vec![vec![0.3, 0.7], vec![0.3, 0.7]]).unwrap();
        assert_eq!(mixing_time(&same, 0.2).unwrap(), 1);
        assert_eq!(mixing_time(&same, 1e-9).unwrap(), 1);
        // at k = 0 the max TV is 1 - min π = 0.7; any alpha above that gives 0
        assert_eq!(mixing_time(&same, 0.75).unwrap(), 0);
    }

    #[test]
    fn mixing_time_cap() {
        let slow = FiniteChain::new(vec![vec![0.999, 0.001], vec![0.001, 0.999]]).unwrap();
        assert!(matches!(
            mixing_time_capped(&slow, 1e-6, 10),
            Err(Error::MixingCapExceeded { cap: 10, .. })
        ));
        assert!(mixing_time(&sym2(), 0.0).is_err());
    }

    #[test]
    fn through_origin_fit() {
        let alphas = [1e-1, 1e-2, 1e-3, 1e-4];
        let x: Vec<f64> = alphas.iter().map(|a: &f64| (1.0 / a).ln()).collect();
        let exact: Vec<f64> = x.iter().map(|v| 3.0 * v).collect();
        let (c, r2, _, _) = fit_through_origin(&x, &exact).unwrap();
        assert!((c - 3.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);

        // constant τ ≡ 5: closed form C = 5 Σx / Σx²
        let flat = vec![5.0; 4];
        let (c, r2, intercept, slope) = fit_through_origin(&x, &flat).unwrap();
        let expect = 5.0 * x.iter().sum::<f64>() / x.iter().map(|v| v * v).sum::<f64>();
        assert!((c - expect).abs() < 1e-12);
        assert!(r2 < 1.0);
        assert!((intercept - 5.0).abs() < 1e-12 && slope.abs() < 1e-12);

        assert!(matches!(
            fit_through_origin(&[2.0, 2.0], &[1.0, 3.0]),
            Err(Error::DegenerateDesign(_))
        ));
    }

    #[test]
    fn fit_mixing_constant_sym2() {
        let prof = fit_mixing_constant(&sym2(), &[1e-1, 1e-2, 1e-3, 1e-4]).unwrap();
        let target = 1.0 / 0.4f64.ln().abs();
        assert!((prof.c - target).abs() / target < 0.15, "C = {}", prof.c);
        let taus: Vec<usize> = prof.tau_table.iter().map(|t| t.1).collect();
        assert_eq!(taus, vec![2, 5, 7, 10]);
        assert!(matches!(
            fit_mixing_constant(&sym2(), &[0.1; 5]),
            Err(Error::DegenerateDesign(_))
        ));
    }

    #[test]
    fn bias_profile_examples() {
        let chain = sym2();
        let constant = vec![vec![2.0, -1.0]; 2];
        assert!(bias_profile(&chain, &constant, 10)
            .unwrap()
            .iter()
            .all(|&b| b.abs() < 1e-15));

        // indicator of state 0: bias_k = 0.5 * 0.4^k
        let ind = vec![vec![1.0], vec![0.0]];
        let prof = bias_profile(&chain, &ind, 20).unwrap();
        for (k, b) in prof.iter().enumerate() {
            assert!((b - 0.5 * 0.4f64.powi(k as i32)).abs() < 1e-14, "k = {k}");
        }

        let skew = FiniteChain::new(vec![vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        let f = vec![vec![3.0, 0.0], vec![0.0, 3.0]];
        let b0 = bias_profile(&skew, &f, 0).unwrap()[0];
        // mean = (2, 1); state 1 is farther: ‖(0,3) − (2,1)‖ = √8
        assert!((b0 - 8f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ar_covariance_is_diagonal_for_subdiagonal_a() {
        let p = ArParams {
            subdiagonal: vec![0.9, 0.8],
            x_true: vec![1.0, 0.0, 0.0],
            innovation_std: 1.0,
            noise_std: 1.0,
        };
        let s = p.stationary_covariance();
        assert!((s[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((s[(1, 1)] - 0.81).abs() < 1e-15);
        assert!((s[(2, 2)] - 0.81 * 0.64).abs() < 1e-15);
        assert_eq!(s[(0, 1)], 0.0);
        assert_eq!(p.memory_length(), 3);
    }
}
