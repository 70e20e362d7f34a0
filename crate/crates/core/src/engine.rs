//! The two-time-scale iteration
//!
//! ```text
//! x_{k+1} = x_k − α_k F(x_k, y_k; ξ_k)
//! y_{k+1} = y_k − β_k G(x_k, y_k; ξ_k)
//! ```
//!
//! with step-size schedules, schedule validation, `K*`, and seeded,
//! checkpointed trajectories.
//!
//! Step `k` first advances the noise `ξ_{k−1} → ξ_k`, then evaluates both
//! operators at the same `(x_k, y_k, ξ_k)` and updates both blocks at once.
//! The initial noise state is a stationary draw (exact for finite chains,
//! a full-memory burn-in for the AR source) and plays the role of `ξ_{−1}`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::markov_noise::{MarkovSource, NoiseState};
use crate::problems::{Operator, ProblemSpec};

const TWO_THIRDS: f64 = 2.0 / 3.0;

/// `α_k = α₀/(k+1)^a`, `β_k = β₀/(k+1)^b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSchedule {
    pub alpha0: f64,
    pub beta0: f64,
    #[serde(default = "default_alpha_exponent")]
    pub alpha_exponent: f64,
    #[serde(default = "default_beta_exponent")]
    pub beta_exponent: f64,
}

fn default_alpha_exponent() -> f64 {
    TWO_THIRDS
}
fn default_beta_exponent() -> f64 {
    1.0
}

#[inline]
fn inv_power(k: u64, e: f64) -> f64 {
    let t = (k + 1) as f64;
    if e == 1.0 {
        1.0 / t
    } else if e == TWO_THIRDS {
        let c = t.cbrt();
        1.0 / (c * c)
    } else if e == 0.0 {
        1.0
    } else {
        t.powf(-e)
    }
}

impl StepSchedule {
    pub fn new(alpha0: f64, beta0: f64) -> Self {
        Self {
            alpha0,
            beta0,
            alpha_exponent: TWO_THIRDS,
            beta_exponent: 1.0,
        }
    }

    pub fn with_exponents(mut self, alpha_exponent: f64, beta_exponent: f64) -> Self {
        self.alpha_exponent = alpha_exponent;
        self.beta_exponent = beta_exponent;
        self
    }

    #[inline]
    pub fn alpha(&self, k: u64) -> f64 {
        self.alpha0 * inv_power(k, self.alpha_exponent)
    }

    #[inline]
    pub fn beta(&self, k: u64) -> f64 {
        self.beta0 * inv_power(k, self.beta_exponent)
    }

    /// `τ(α_k) = ⌈C log(1/α_k)⌉`, clipped to `[0, k]`.
    pub fn tau_at(&self, k: u64, c: f64) -> u64 {
        let raw = (c * (1.0 / self.alpha(k)).ln()).ceil();
        if raw.is_nan() || raw <= 0.0 {
            0
        } else {
            (raw as u64).min(k)
        }
    }

    /// `α_{k;τ} = Σ_{t=k−τ}^{k} α_t`.
    pub fn tail_step_sum(&self, k: u64, tau: u64) -> Result<f64> {
        if tau > k {
            return Err(Error::WindowBeforeStart { k, tau });
        }
        Ok((k - tau..=k).map(|t| self.alpha(t)).sum())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Pass/fail for each step-size condition of the finite-time theorem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub checks: Vec<ScheduleCheck>,
    /// `1/μ_G ≤ β₀ < 2/μ_G`: admissible under the theorem statement but not under its proof
    pub beta0_discrepancy: bool,
}

impl ScheduleReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&ScheduleCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect()
    }
}

/// Checks every schedule condition. `beta0_min_stated` (β₀ ≥ 1/μ_G) is
/// reported but not enforced; `beta0_min` (β₀ ≥ 2/μ_G) is.
pub fn validate_schedule(s: &StepSchedule, mu_f: f64, mu_g: f64, b: f64) -> ScheduleReport {
    let (a, bx) = (s.alpha_exponent, s.beta_exponent);
    let mut checks = Vec::new();
    let mut push = |name: &str, passed: bool, detail: String| {
        checks.push(ScheduleCheck {
            name: name.into(),
            passed,
            detail,
        })
    };

    let ratio = s.beta0 / s.alpha0;
    let cap = (mu_f / (2.0 * mu_g)).max(mu_f * mu_g / (b * b));
    push(
        "step_ratio",
        ratio <= cap,
        format!("beta0/alpha0 = {ratio} vs max(mu_F/(2 mu_G), mu_F mu_G/B^2) = {cap}"),
    );
    push(
        "beta0_min",
        s.beta0 >= 2.0 / mu_g,
        format!("beta0 = {} vs 2/mu_G = {}", s.beta0, 2.0 / mu_g),
    );
    let stated = s.beta0 >= 1.0 / mu_g;
    checks.push(ScheduleCheck {
        name: "beta0_min_stated".into(),
        passed: true,
        detail: format!(
            "beta0 = {} vs 1/mu_G = {} ({}; informational)",
            s.beta0,
            1.0 / mu_g,
            if stated { "holds" } else { "fails" }
        ),
    });
    let mut push = |name: &str, passed: bool, detail: String| {
        checks.push(ScheduleCheck {
            name: name.into(),
            passed,
            detail,
        })
    };
    push(
        "positive",
        s.alpha0 > 0.0 && s.beta0 > 0.0,
        format!("alpha0 = {}, beta0 = {}", s.alpha0, s.beta0),
    );
    push("alpha_divergent", a <= 1.0, format!("alpha exponent {a} <= 1"));
    push("beta_divergent", bx <= 1.0, format!("beta exponent {bx} <= 1"));
    push("alpha_sq_summable", 2.0 * a > 1.0, format!("2 * {a} > 1"));
    push("beta_sq_summable", 2.0 * bx > 1.0, format!("2 * {bx} > 1"));
    push(
        "beta_sq_over_alpha_summable",
        2.0 * bx - a > 1.0,
        format!("2 * {bx} - {a} > 1"),
    );
    push(
        "nonincreasing",
        a >= 0.0 && bx >= 0.0,
        format!("exponents {a}, {bx} >= 0"),
    );
    push(
        "beta_below_alpha",
        s.beta0 <= s.alpha0 && bx >= a,
        "beta0 <= alpha0 and beta exponent >= alpha exponent".into(),
    );

    ScheduleReport {
        checks,
        beta0_discrepancy: stated && s.beta0 < 2.0 / mu_g,
    }
}

/// Default upper limit of the `K*` scan.
pub const DEFAULT_KSTAR_CAP: u64 = 1_000_000;

/// `K*`: the smallest `k` from which `τ(α_t) α_{t−τ(α_t)} ≤ min{log 2/(2B), α₀}`
/// holds for every `t` in `[k, cap]`.
///
/// Early iterations pass trivially while `α_k ≥ 1` (then `τ = 0`), so the first
/// passing index is not meaningful; the returned index is one past the last
/// violation in the scanned range.
pub fn compute_kstar(s: &StepSchedule, b: f64, c: f64, cap: u64) -> Result<u64> {
    if b.is_nan() || b <= 0.0 || c.is_nan() || c < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "need B > 0 and C >= 0 (B = {b}, C = {c})"
        )));
    }
    let threshold = (std::f64::consts::LN_2 / (2.0 * b)).min(s.alpha0);
    let mut last_fail: Option<(u64, f64)> = None;
    for k in 0..=cap {
        let tau = s.tau_at(k, c);
        let v = tau as f64 * s.alpha(k - tau);
        if v > threshold {
            last_fail = Some((k, v));
        }
    }
    match last_fail {
        None => Ok(0),
        Some((k, v)) if k == cap => Err(Error::KstarNotFound {
            cap,
            last_violation: k,
            value: v,
            threshold,
        }),
        Some((k, _)) => Ok(k + 1),
    }
}

/// `(x_k, y_k)` and the most recent noise state.
#[derive(Debug, Clone, PartialEq)]
pub struct IterateState {
    pub k: u64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub xi: Option<NoiseState>,
}

impl IterateState {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        Self { k: 0, x, y, xi: None }
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.y).all(|v| v.is_finite())
    }
}

fn check_dims(spec: &ProblemSpec, x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != spec.dx {
        return Err(Error::DimensionMismatch {
            expected: spec.dx,
            found: x.len(),
        });
    }
    if y.len() != spec.dy {
        return Err(Error::DimensionMismatch {
            expected: spec.dy,
            found: y.len(),
        });
    }
    Ok(())
}

/// Operator evaluation and the simultaneous update, with reusable buffers.
struct Stepper<'a> {
    spec: &'a ProblemSpec,
    schedule: StepSchedule,
    f: Vec<f64>,
    g: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(spec: &'a ProblemSpec, schedule: &StepSchedule) -> Self {
        Self {
            spec,
            schedule: *schedule,
            f: vec![0.0; spec.dx],
            g: vec![0.0; spec.dy],
        }
    }

    /// Returns false when the new iterate is not finite.
    #[inline]
    fn apply(&mut self, k: u64, x: &mut [f64], y: &mut [f64], xi: &NoiseState) -> bool {
        (self.spec.sample_f)(x, y, xi, &mut self.f);
        (self.spec.sample_g)(x, y, xi, &mut self.g);
        let a = self.schedule.alpha(k);
        let b = self.schedule.beta(k);
        let mut ok = true;
        for (xi, fi) in x.iter_mut().zip(&self.f) {
            *xi -= a * fi;
            ok &= xi.is_finite();
        }
        for (yi, gi) in y.iter_mut().zip(&self.g) {
            *yi -= b * gi;
            ok &= yi.is_finite();
        }
        ok
    }
}

/// One step of the coupled update. The source must be initialized.
pub fn sa_step<R: Rng + ?Sized>(
    state: &mut IterateState,
    spec: &ProblemSpec,
    schedule: &StepSchedule,
    source: &mut MarkovSource,
    rng: &mut R,
) -> Result<()> {
    check_dims(spec, &state.x, &state.y)?;
    let xi = source.step(rng)?.clone();
    let mut st = Stepper::new(spec, schedule);
    let (mut x, mut y) = (state.x.clone(), state.y.clone());
    if !st.apply(state.k, &mut x, &mut y, &xi) {
        return Err(Error::InvalidArgument(format!(
            "non-finite iterate after step k = {}",
            state.k
        )));
    }
    state.x = x;
    state.y = y;
    state.xi = Some(xi);
    state.k += 1;
    Ok(())
}

/// How `(x₀, y₀)` is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    /// i.i.d. `N(0, radius²)` entries
    Gaussian {
        radius: f64,
    },
    /// uniform in the ball of the given radius around the origin of the stacked `(x, y)`
    Ball {
        radius: f64,
    },
    Fixed {
        x: Vec<f64>,
        y: Vec<f64>,
    },
}

impl Default for Init {
    fn default() -> Self {
        Self::Gaussian { radius: 1.0 }
    }
}

impl Init {
    fn draw<R: Rng + ?Sized>(&self, dx: usize, dy: usize, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        match self {
            Self::Gaussian { radius } => {
                let mut v = || -> f64 {
                    let z: f64 = StandardNormal.sample(rng);
                    radius * z
                };
                let x = (0..dx).map(|_| v()).collect();
                let y = (0..dy).map(|_| v()).collect();
                (x, y)
            }
            Self::Ball { radius } => {
                let z = crate::problems::random_in_ball(&vec![0.0; dx + dy], *radius, rng);
                (z[..dx].to_vec(), z[dx..].to_vec())
            }
            Self::Fixed { x, y } => (x.clone(), y.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunOptions {
    pub init: Init,
    /// retain `z_{k−τ(α_k)}` at each checkpoint, with `τ` computed from this mixing constant
    pub lag_mixing_constant: Option<f64>,
}

/// `z_{k−τ}` stored alongside a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct LaggedState {
    pub tau: u64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Iterates `(x_k, y_k)`, the noise `ξ_k` they are about to consume, and the
/// noise residuals `ψ_k`, `ζ_k` at that state when mean operators exist.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub k: u64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub xi: NoiseState,
    pub psi: Option<Vec<f64>>,
    pub zeta: Option<Vec<f64>>,
    pub lagged: Option<LaggedState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub seed: u64,
    /// stationary draw preceding `ξ_0`
    pub xi_init: NoiseState,
    pub checkpoints: Vec<Checkpoint>,
    pub final_state: IterateState,
}

impl Trajectory {
    pub fn at(&self, k: u64) -> Option<&Checkpoint> {
        self.checkpoints
            .binary_search_by_key(&k, |c| c.k)
            .ok()
            .map(|i| &self.checkpoints[i])
    }
}

/// About `count` log-spaced indices in `[1, k_max]` plus `0` and `k_max`.
pub fn checkpoint_grid(k_max: u64, count: usize) -> Vec<u64> {
    let mut out = vec![0];
    if k_max >= 1 {
        let n = count.max(2);
        let top = ((k_max + 1) as f64).ln();
        for i in 0..n {
            let v = (top * i as f64 / (n - 1) as f64).exp().round() as u64;
            out.push(v.saturating_sub(1).min(k_max));
        }
        out.push(k_max);
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Adds `extra` to a grid (dropping points above `k_max`), keeping it sorted and unique.
pub fn merge_grid(grid: &[u64], extra: &[u64], k_max: u64) -> Vec<u64> {
    let mut out: Vec<u64> = grid.iter().chain(extra).copied().filter(|&k| k <= k_max).collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Ring buffer of the last `cap` stacked iterates.
struct LagRing {
    cap: u64,
    d: usize,
    buf: Vec<f64>,
}

impl LagRing {
    fn push(&mut self, k: u64, x: &[f64], y: &[f64]) {
        let off = (k % self.cap) as usize * self.d;
        self.buf[off..off + x.len()].copy_from_slice(x);
        self.buf[off + x.len()..off + self.d].copy_from_slice(y);
    }

    fn get(&self, k: u64, dx: usize) -> (Vec<f64>, Vec<f64>) {
        let off = (k % self.cap) as usize * self.d;
        (
            self.buf[off..off + dx].to_vec(),
            self.buf[off + dx..off + self.d].to_vec(),
        )
    }
}

/// Runs `k_max` steps from a seeded start and records the grid points.
///
/// The result depends only on `(spec, schedule, k_max, seed, grid, options)`.
pub fn run_trajectory(
    spec: &ProblemSpec,
    schedule: &StepSchedule,
    k_max: u64,
    seed: u64,
    grid: &[u64],
    options: &RunOptions,
) -> Result<Trajectory> {
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "checkpoint grid must be strictly increasing".into(),
        ));
    }
    if let Some(&last) = grid.last() {
        if last > k_max {
            return Err(Error::InvalidArgument(format!(
                "checkpoint {last} exceeds k_max = {k_max}"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut x, mut y) = options.init.draw(spec.dx, spec.dy, &mut rng);
    check_dims(spec, &x, &y)?;
    let mut source = spec.noise.source();
    source.init_stationary(&mut rng)?;
    let xi_init = source.state().cloned().ok_or(Error::Uninitialized)?;

    let with_residuals = spec.has_mean();
    let mut ring = options.lag_mixing_constant.map(|c| {
        let cap = schedule.tau_at(k_max, c) + 1;
        LagRing {
            cap,
            d: spec.dx + spec.dy,
            buf: vec![0.0; cap as usize * (spec.dx + spec.dy)],
        }
    });

    let mut stepper = Stepper::new(spec, schedule);
    let mut checkpoints = Vec::with_capacity(grid.len());
    let mut next = grid.iter().copied().peekable();

    let mut k = 0u64;
    loop {
        if let Some(r) = ring.as_mut() {
            r.push(k, &x, &y);
        }
        let xi = source.step(&mut rng)?;
        if next.peek() == Some(&k) {
            next.next();
            let (psi, zeta) = if with_residuals {
                let (p, z) = noise_residuals_at(spec, &x, &y, xi)?;
                (Some(p), Some(z))
            } else {
                (None, None)
            };
            let lagged = match (ring.as_ref(), options.lag_mixing_constant) {
                (Some(r), Some(c)) => {
                    let tau = schedule.tau_at(k, c);
                    let (lx, ly) = r.get(k - tau, spec.dx);
                    Some(LaggedState { tau, x: lx, y: ly })
                }
                _ => None,
            };
            checkpoints.push(Checkpoint {
                k,
                x: x.clone(),
                y: y.clone(),
                xi: xi.clone(),
                psi,
                zeta,
                lagged,
            });
        }
        if k == k_max {
            break;
        }
        if !stepper.apply(k, &mut x, &mut y, xi) {
            let xi = source.state().cloned();
            let partial = Trajectory {
                seed,
                xi_init,
                checkpoints,
                final_state: IterateState { k: k + 1, x, y, xi },
            };
            return Err(Error::SimulationAborted {
                k: k + 1,
                partial: Box::new(partial),
            });
        }
        k += 1;
    }

    Ok(Trajectory {
        seed,
        xi_init,
        checkpoints,
        final_state: IterateState {
            k,
            x,
            y,
            xi: source.state().cloned(),
        },
    })
}

/// `ψ = F(x, y; ξ) − F(x, y)` and `ζ = G(x, y; ξ) − G(x, y)`.
pub(crate) fn noise_residuals_at(
    spec: &ProblemSpec,
    x: &[f64],
    y: &[f64],
    xi: &NoiseState,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut psi = spec.sample(Operator::F, x, y, xi);
    let mut zeta = spec.sample(Operator::G, x, y, xi);
    let mf = spec.mean(Operator::F, x, y)?;
    let mg = spec.mean(Operator::G, x, y)?;
    psi.iter_mut().zip(&mf).for_each(|(p, m)| *p -= m);
    zeta.iter_mut().zip(&mg).for_each(|(z, m)| *z -= m);
    Ok((psi, zeta))
}

/// 64-bit finalizer of SplitMix64.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-trial seed: `splitmix64(master ⊕ splitmix64(trial))`. Adding trials never
/// changes the seeds of earlier ones.
pub fn seed_for_trial(master: u64, trial: u64) -> u64 {
    splitmix64(master ^ splitmix64(trial))
}
