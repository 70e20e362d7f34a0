use serde::{Deserialize, Serialize};

use crate::engine::{compute_kstar, StepSchedule, DEFAULT_KSTAR_CAP};
use crate::error::{Error, Result};
use crate::problems::ProblemSpec;

/// Number of explicitly summed terms of `D₁`; the rest is bounded by an integral.
pub const D1_TERMS: u64 = 10_000_000;

/// Constants of the finite-time bound. `D₂` and `D` are kept as natural logs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub b: f64,
    /// geometric mixing constant
    pub c: f64,
    pub kstar: u64,
    /// partial sum plus tail bound
    pub d1: f64,
    /// the tail bound alone
    pub d1_tail: f64,
    pub log_d2: f64,
    pub log_d: f64,
    pub mu_f: f64,
    pub mu_g: f64,
    /// `‖y*‖ + ‖H(0)‖ + 1`
    pub offset: f64,
    /// `E‖ẑ₀‖²` used in `D`
    pub ez0_sq: f64,
}

impl BoundConstants {
    pub fn log10_d2(&self) -> f64 {
        self.log_d2 / std::f64::consts::LN_10
    }

    pub fn log10_d(&self) -> f64 {
        self.log_d / std::f64::consts::LN_10
    }
}

fn logsumexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `Σ_{k=0}^{N} [β_k²/(μ_F α_k) + β_k² + α_k α_{k;τ(α_k)}]`, with the window sums
/// taken from a ring of the last `τ_max + 1` step sizes.
fn d1_partial(s: &StepSchedule, mu_f: f64, c: f64, n: u64) -> f64 {
    let cap = s.tau_at(n, c) as usize + 1;
    let mut ring = vec![0.0; cap];
    let mut total = 0.0;
    for k in 0..=n {
        let a = s.alpha(k);
        let b = s.beta(k);
        ring[k as usize % cap] = a;
        let tau = s.tau_at(k, c);
        let window: f64 = (k - tau..=k).map(|t| ring[t as usize % cap]).sum();
        total += b * b / (mu_f * a) + b * b + a * window;
    }
    total
}

/// Integral-test bound on the terms `k > N`.
///
/// For `k ≥ N + 1` we have `α_{k−τ} ≤ 2^a α_k` (the window is far shorter than `k`)
/// and `τ + 1 ≤ C a log(k+1) + C log⁺(1/α₀) + 2`, so each summand is at most
/// `u t^{-p} log t + v t^{-p}` for the relevant exponents.
fn d1_tail(s: &StepSchedule, mu_f: f64, c: f64, n: u64) -> f64 {
    let (a, b) = (s.alpha_exponent, s.beta_exponent);
    let m = (n + 1) as f64;
    let power_tail = |p: f64| m.powf(1.0 - p) / (p - 1.0);
    let t1 = s.beta0 * s.beta0 / (mu_f * s.alpha0) * power_tail(2.0 * b - a);
    let t2 = s.beta0 * s.beta0 * power_tail(2.0 * b);
    let p = 2.0 * a;
    let scale = 2f64.powf(a) * s.alpha0 * s.alpha0;
    let u = scale * c * a;
    let v = scale * (c * (1.0 / s.alpha0).ln().max(0.0) + 2.0);
    let log_tail = m.powf(1.0 - p) * (m.ln() / (p - 1.0) + 1.0 / (p - 1.0).powi(2));
    t1 + t2 + u * log_tail + v * power_tail(p)
}

/// All constants of the bound for a problem, schedule, growth constant `B`,
/// mixing constant `C`, and measured `E‖ẑ₀‖²`.
pub fn compute_constants(
    spec: &ProblemSpec,
    schedule: &StepSchedule,
    b: f64,
    c: f64,
    ez0_sq: f64,
) -> Result<BoundConstants> {
    let (a, bx) = (schedule.alpha_exponent, schedule.beta_exponent);
    for (name, p) in [("2b - a", 2.0 * bx - a), ("2b", 2.0 * bx), ("2a", 2.0 * a)] {
        if p.is_nan() || p <= 1.0 {
            return Err(Error::NotSummable(format!("{name} = {p} must exceed 1")));
        }
    }
    let mu_f = spec.constants.mu_f;
    let mu_g = spec.constants.mu_g;
    let kstar = compute_kstar(schedule, b, c, DEFAULT_KSTAR_CAP)?;
    let partial = d1_partial(schedule, mu_f, c, D1_TERMS);
    let tail = d1_tail(schedule, mu_f, c, D1_TERMS);
    let d1 = partial + tail;
    let offset = spec.offset_norm()?;
    let log_d2 = 160f64.ln() + 6.0 * (1.0 + b).ln() + 2.0 * offset.ln();
    let growth = d1 * (b + 1.0).powi(6);
    let first = if ez0_sq > 0.0 {
        ez0_sq.ln() + 160.0 * growth
    } else {
        f64::NEG_INFINITY
    };
    let second = d1.ln() + log_d2 + 320.0 * growth;
    let log_d = logsumexp(first, second);
    Ok(BoundConstants {
        b,
        c,
        kstar,
        d1,
        d1_tail: tail,
        log_d2,
        log_d,
        mu_f,
        mu_g,
        offset,
        ez0_sq,
    })
}

/// Natural log of the right side bounding `V_{k+1}` for `k ≥ K*`:
///
/// ```text
/// (K*)² V_{K*}/(k+1)²
///   + (5D₂ + 64D(1+B)⁸)/(2μ_F μ_G) · [ (5β₀³ + 2μ_F β₀ α₀³)/(μ_F α₀²) (k+1)^{-2/3}
///                                     + 4Cβ₀α₀ log((k+1)/α₀) (k+1)^{-2/3} ]
/// ```
pub fn theorem_bound(k: u64, c: &BoundConstants, v_kstar: f64, s: &StepSchedule) -> Result<f64> {
    if k < c.kstar {
        return Err(Error::BelowKstar { k, kstar: c.kstar });
    }
    let kp1 = (k + 1) as f64;
    let lead = if c.kstar == 0 || v_kstar <= 0.0 {
        f64::NEG_INFINITY
    } else {
        2.0 * (c.kstar as f64).ln() + v_kstar.ln() - 2.0 * kp1.ln()
    };
    let (a0, b0) = (s.alpha0, s.beta0);
    let bracket = ((5.0 * b0.powi(3) + 2.0 * c.mu_f * b0 * a0.powi(3)) / (c.mu_f * a0 * a0)
        + 4.0 * c.c * b0 * a0 * (kp1 / a0).ln())
        * kp1.powf(-2.0 / 3.0);
    if bracket.is_nan() || bracket <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "rate bracket is not positive at k = {k} ({bracket}); the bound is vacuous there"
        )));
    }
    let log_coef =
        logsumexp(5f64.ln() + c.log_d2, 64f64.ln() + c.log_d + 8.0 * (1.0 + c.b).ln()) - (2.0 * c.mu_f * c.mu_g).ln();
    Ok(logsumexp(lead, log_coef + bracket.ln()))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use nalgebra::DMatrix;

    use super::*;
    use crate::markov_noise::FiniteChain;
    use crate::problems::{make_linear, LinearConfig};

    fn origin_problem(mu: f64) -> ProblemSpec {
        let m = |v| DMatrix::from_row_slice(1, 1, &[v]);
        let cfg = LinearConfig::from_blocks(&m(mu), &m(0.0), &m(0.0), &m(mu));
        let chain = FiniteChain::new(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        make_linear(&cfg, Arc::new(chain)).unwrap()
    }

    #[test]
    fn d1_first_term() {
        let s = StepSchedule::new(1.0, 0.5);
        assert_eq!(s.tau_at(0, 2.0), 0);
        assert!((d1_partial(&s, 1.0, 2.0, 0) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn d1_tail_bounds_the_next_block() {
        // the tail bound from N must cover the explicit sum over (N, 20N]
        let s = StepSchedule::new(2.5, 1.5);
        let (mu, c, n) = (2.0, 1.4, 5_000);
        let tail = d1_tail(&s, mu, c, n);
        let block = d1_partial(&s, mu, c, 20 * n) - d1_partial(&s, mu, c, n);
        assert!(block > 0.0 && block <= tail, "block {block} tail {tail}");
        assert!(tail < 10.0 * block);
    }

    #[test]
    fn d2_and_d_examples() {
        // B = 0 is below any valid B; exercise the formula directly
        let p = origin_problem(1.0);
        let s = StepSchedule::new(1.0, 2.0);
        let c = compute_constants(&p, &s, 1e-300, 0.5, 0.0).unwrap();
        assert!((c.log_d2 - 160f64.ln()).abs() < 1e-12);
        let want = c.d1.ln() + c.log_d2 + 320.0 * c.d1 * (c.b + 1.0).powi(6);
        assert!((c.log_d - want).abs() < 1e-12 * want.abs());

        let c2 = compute_constants(&p, &s, 1e-300, 0.5, 3.0).unwrap();
        let first = 3f64.ln() + 160.0 * c2.d1 * (c2.b + 1.0).powi(6);
        assert!(c2.log_d >= first && c2.log_d >= c2.d1.ln() + c2.log_d2);
    }

    #[test]
    fn non_summable_schedule_is_rejected() {
        let p = origin_problem(1.0);
        let s = StepSchedule::new(1.0, 0.5).with_exponents(0.5, 1.0);
        assert!(matches!(
            compute_constants(&p, &s, 1.0, 1.0, 1.0),
            Err(Error::NotSummable(_))
        ));
    }

    #[test]
    fn bound_leading_term_only() {
        let c = BoundConstants {
            b: 1.0,
            c: 1.0,
            kstar: 10,
            d1: 1.0,
            d1_tail: 0.0,
            log_d2: f64::NEG_INFINITY,
            log_d: f64::NEG_INFINITY,
            mu_f: 1.0,
            mu_g: 1.0,
            offset: 1.0,
            ez0_sq: 0.0,
        };
        let s = StepSchedule::new(1.0, 2.0);
        let got = theorem_bound(99, &c, 0.7, &s).unwrap();
        assert!((got - (100.0 * 0.7 / 10_000.0f64).ln()).abs() < 1e-12);
        assert!(matches!(
            theorem_bound(9, &c, 0.7, &s),
            Err(Error::BelowKstar { k: 9, kstar: 10 })
        ));
    }

    #[test]
    fn bound_has_log_over_k_two_thirds_tail() {
        let c = BoundConstants {
            b: 2.0,
            c: 1.5,
            kstar: 100,
            d1: 3.0,
            d1_tail: 0.0,
            log_d2: 20.0,
            log_d: 900.0,
            mu_f: 1.0,
            mu_g: 1.0,
            offset: 1.0,
            ez0_sq: 1.0,
        };
        let s = StepSchedule::new(1.0, 2.0);
        let norm = |k: u64| {
            let kp = (k + 1) as f64;
            theorem_bound(k, &c, 1.0, &s).unwrap() + kp.ln() * 2.0 / 3.0 - kp.ln().ln()
        };
        let (a, b) = (norm(1_000_000), norm(10_000_000));
        assert!(a.is_finite() && (a - b).abs() < 0.1);
    }
}
