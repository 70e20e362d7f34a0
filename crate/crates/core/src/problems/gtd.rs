//! Gradient TD policy evaluation with a smooth nonlinear value approximator
//! `V_y(ζ) = ⟨y, φ₀(ζ)⟩ + (ε/2)⟨y, M(ζ) y⟩`.
//!
//! The GTD iteration is written as an ascent; both operators are negated here
//! so it runs on the same descent engine as every other problem. The noise
//! state is the transition pair `(ζ_k, ζ_{k+1})`, which is itself a Markov
//! chain with stationary law `π(ζ) P(ζ, ζ′)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::estimate::{random_in_ball, sampled_lipschitz};
use super::{Operator, ProblemConstants, ProblemSpec};
use crate::error::{Error, Result};
use crate::linalg::{dist, dot, from_rows, inverse, norm};
use crate::markov_noise::{FiniteChain, NoiseModel, NoiseState};

const GTD_ESTIMATE_SEED: u64 = 0x6774_6400;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GtdConfig {
    /// fixed-policy state transition matrix, row-major
    pub transition: Vec<Vec<f64>>,
    /// reward r(ζ) collected on leaving ζ
    pub rewards: Vec<f64>,
    pub gamma: f64,
    /// base features φ₀(ζ), one row per state
    pub features: Vec<Vec<f64>>,
    /// symmetric curvature matrices M(ζ); empty means a linear approximator
    #[serde(default)]
    pub curvature: Vec<Vec<Vec<f64>>>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// radius of the region (around the root) on which constants are estimated
    #[serde(default = "default_region")]
    pub region_radius: f64,
    #[serde(default = "default_samples")]
    pub estimate_samples: usize,
}

fn default_epsilon() -> f64 {
    0.1
}
fn default_region() -> f64 {
    2.0
}
fn default_samples() -> usize {
    1000
}

/// Closed-form approximator and the per-pair operators.
#[derive(Debug)]
pub(crate) struct GtdModel {
    m: usize,
    gamma: f64,
    eps: f64,
    rewards: Vec<f64>,
    phi0: Vec<Vec<f64>>,
    curvature: Vec<DMatrix<f64>>,
    /// (ζ, ζ′) for each pair-chain state
    pairs: Vec<(usize, usize)>,
    /// π(ζ) P(ζ, ζ′)
    pair_weights: Vec<f64>,
}

impl GtdModel {
    /// ∇V_y(ζ) = φ₀(ζ) + ε M(ζ) y
    fn grad(&self, z: usize, y: &[f64]) -> Vec<f64> {
        let mut g = self.phi0[z].clone();
        if self.eps != 0.0 {
            let my = &self.curvature[z] * DVector::from_column_slice(y);
            g.iter_mut().zip(my.iter()).for_each(|(a, b)| *a += self.eps * b);
        }
        g
    }

    fn value(&self, z: usize, y: &[f64]) -> f64 {
        let mut v = dot(y, &self.phi0[z]);
        if self.eps != 0.0 {
            let yv = DVector::from_column_slice(y);
            v += 0.5 * self.eps * yv.dot(&(&self.curvature[z] * &yv));
        }
        v
    }

    /// δ = r(ζ) + γ V_y(ζ′) − V_y(ζ)
    fn td_error(&self, z: usize, zn: usize, y: &[f64]) -> f64 {
        self.rewards[z] + self.gamma * self.value(zn, y) - self.value(z, y)
    }

    /// −(δ − φᵀx) φ
    fn f_into(&self, pair: usize, x: &[f64], y: &[f64], out: &mut [f64]) {
        let (z, zn) = self.pairs[pair];
        let phi = self.grad(z, y);
        let c = self.td_error(z, zn, y) - dot(&phi, x);
        for (o, p) in out.iter_mut().zip(&phi) {
            *o = -c * p;
        }
    }

    /// −[(φ − γφ′) φᵀx − h],  h = (δ − φᵀx) ε M(ζ) x
    fn g_into(&self, pair: usize, x: &[f64], y: &[f64], out: &mut [f64]) {
        let (z, zn) = self.pairs[pair];
        let phi = self.grad(z, y);
        let phi_next = self.grad(zn, y);
        let phx = dot(&phi, x);
        let c = self.td_error(z, zn, y) - phx;
        for ((o, p), pn) in out.iter_mut().zip(&phi).zip(&phi_next) {
            *o = -(p - self.gamma * pn) * phx;
        }
        if self.eps != 0.0 {
            let mx = &self.curvature[z] * DVector::from_column_slice(x);
            out.iter_mut().zip(mx.iter()).for_each(|(o, v)| *o += c * self.eps * v);
        }
    }

    fn mean_into(&self, which: Operator, x: &[f64], y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let mut tmp = vec![0.0; self.m];
        for (pair, &w) in self.pair_weights.iter().enumerate() {
            match which {
                Operator::F => self.f_into(pair, x, y, &mut tmp),
                Operator::G => self.g_into(pair, x, y, &mut tmp),
            }
            out.iter_mut().zip(&tmp).for_each(|(o, t)| *o += w * t);
        }
    }

    /// E[φφᵀ] and E[δφ] at y; H(y) solves E[φφᵀ] x = E[δφ].
    fn normal_equations(&self, y: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
        let m = self.m;
        let mut cov = DMatrix::zeros(m, m);
        let mut rhs = DVector::zeros(m);
        for (&(z, zn), &w) in self.pairs.iter().zip(&self.pair_weights) {
            let phi = DVector::from_vec(self.grad(z, y));
            cov += &phi * phi.transpose() * w;
            rhs += &phi * (w * self.td_error(z, zn, y));
        }
        (cov, rhs)
    }

    fn h(&self, y: &[f64]) -> Vec<f64> {
        let (cov, rhs) = self.normal_equations(y);
        match cov.lu().solve(&rhs) {
            Some(v) => v.as_slice().to_vec(),
            None => vec![f64::NAN; self.m],
        }
    }

    /// G(H(y), y)
    fn reduced_g(&self, y: &[f64]) -> Vec<f64> {
        let x = self.h(y);
        let mut out = vec![0.0; self.m];
        self.mean_into(Operator::G, &x, y, &mut out);
        out
    }

    /// Linear TD fixed point E[φ₀(φ₀ − γφ₀′)ᵀ] y = E[r φ₀].
    fn linear_td_solution(&self) -> Option<Vec<f64>> {
        let m = self.m;
        let mut a = DMatrix::zeros(m, m);
        let mut b = DVector::zeros(m);
        for (&(z, zn), &w) in self.pairs.iter().zip(&self.pair_weights) {
            let p = DVector::from_column_slice(&self.phi0[z]);
            let pn = DVector::from_column_slice(&self.phi0[zn]);
            a += &p * (&p - &pn * self.gamma).transpose() * w;
            b += &p * (w * self.rewards[z]);
        }
        a.lu().solve(&b).map(|v| v.as_slice().to_vec())
    }

    /// Damped Newton on y ↦ G(H(y), y) with a central-difference Jacobian.
    fn solve_root(&self, start: Vec<f64>) -> Option<Vec<f64>> {
        let m = self.m;
        let mut y = start;
        let mut g = self.reduced_g(&y);
        for _ in 0..100 {
            let gn = norm(&g);
            if gn <= 1e-13 {
                return Some(y);
            }
            let mut jac = DMatrix::zeros(m, m);
            for j in 0..m {
                let h = 1e-6 * (1.0 + y[j].abs());
                let mut yp = y.clone();
                let mut ym = y.clone();
                yp[j] += h;
                ym[j] -= h;
                let gp = self.reduced_g(&yp);
                let gm = self.reduced_g(&ym);
                for i in 0..m {
                    jac[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
                }
            }
            let step = jac.lu().solve(&DVector::from_column_slice(&g))?;
            let mut t = 1.0;
            loop {
                let cand: Vec<f64> = y.iter().zip(step.iter()).map(|(a, s)| a - t * s).collect();
                let gc = self.reduced_g(&cand);
                if norm(&gc) < gn || t < 1e-8 {
                    y = cand;
                    g = gc;
                    break;
                }
                t *= 0.5;
            }
        }
        (norm(&g) <= 1e-11).then_some(y)
    }
}

/// Builds the GTD problem. `H` and `(x*, y*)` are exact up to the Newton solve;
/// `μ_F, μ_G` and the Lipschitz moduli are sampled estimates on the configured region.
pub fn make_gtd(cfg: &GtdConfig) -> Result<ProblemSpec> {
    if !(cfg.gamma >= 0.0 && cfg.gamma < 1.0) {
        return Err(Error::config(
            "gamma",
            format!("discount must lie in [0, 1), got {}", cfg.gamma),
        ));
    }
    if cfg.epsilon < 0.0 {
        return Err(Error::config("epsilon", "curvature scale must be nonnegative"));
    }
    let base = FiniteChain::new(cfg.transition.clone())?;
    base.ergodicity()?;
    let n = base.n();
    if cfg.rewards.len() != n {
        return Err(Error::config(
            "rewards",
            format!("expected {n} entries, got {}", cfg.rewards.len()),
        ));
    }
    if cfg.features.len() != n {
        return Err(Error::config(
            "features",
            format!("expected {n} rows, got {}", cfg.features.len()),
        ));
    }
    let m = cfg.features[0].len();
    if m == 0 || cfg.features.iter().any(|r| r.len() != m) {
        return Err(Error::config("features", "rows must share a positive length"));
    }
    let curvature = if cfg.curvature.is_empty() {
        vec![DMatrix::zeros(m, m); n]
    } else {
        if cfg.curvature.len() != n {
            return Err(Error::config("curvature", format!("expected {n} matrices")));
        }
        let mut out = Vec::with_capacity(n);
        for rows in &cfg.curvature {
            let c = from_rows(rows, "curvature")?;
            if c.nrows() != m || c.ncols() != m {
                return Err(Error::config("curvature", format!("matrices must be {m}x{m}")));
            }
            if (&c - c.transpose()).abs().max() > 1e-12 {
                return Err(Error::config("curvature", "matrices must be symmetric"));
            }
            out.push(c);
        }
        out
    };

    let pi = base.stationary_distribution()?;
    let mut pairs = Vec::new();
    let mut pair_weights = Vec::new();
    for (z, &pz) in pi.iter().enumerate() {
        for zn in 0..n {
            if base.prob(z, zn) > 0.0 {
                pairs.push((z, zn));
                pair_weights.push(pz * base.prob(z, zn));
            }
        }
    }
    // (ζ, ζ′) → (ζ′, ζ″) with probability P(ζ′, ζ″)
    let pair_rows: Vec<Vec<f64>> = pairs
        .iter()
        .map(|&(_, zn)| {
            pairs
                .iter()
                .map(|&(a, b)| if a == zn { base.prob(a, b) } else { 0.0 })
                .collect()
        })
        .collect();
    let pair_chain = FiniteChain::new(pair_rows)?;

    let model = Arc::new(GtdModel {
        m,
        gamma: cfg.gamma,
        eps: cfg.epsilon,
        rewards: cfg.rewards.clone(),
        phi0: cfg.features.clone(),
        curvature,
        pairs,
        pair_weights,
    });

    let (cov0, _) = model.normal_equations(&vec![0.0; m]);
    inverse(&cov0, "feature covariance E[φφᵀ]")?;

    let start = model.linear_td_solution().unwrap_or_else(|| vec![0.0; m]);
    let ystar = model.solve_root(start);
    let fixed_point = ystar.map(|y| (model.h(&y), y));

    let sample_f = {
        let model = Arc::clone(&model);
        Arc::new(move |x: &[f64], y: &[f64], xi: &NoiseState, out: &mut [f64]| match xi {
            NoiseState::Finite(p) => model.f_into(*p, x, y, out),
            NoiseState::Ar(_) => out.iter_mut().for_each(|o| *o = f64::NAN),
        })
    };
    let sample_g = {
        let model = Arc::clone(&model);
        Arc::new(move |x: &[f64], y: &[f64], xi: &NoiseState, out: &mut [f64]| match xi {
            NoiseState::Finite(p) => model.g_into(*p, x, y, out),
            NoiseState::Ar(_) => out.iter_mut().for_each(|o| *o = f64::NAN),
        })
    };
    let mean_f = {
        let model = Arc::clone(&model);
        Arc::new(move |x: &[f64], y: &[f64], out: &mut [f64]| model.mean_into(Operator::F, x, y, out))
    };
    let mean_g = {
        let model = Arc::clone(&model);
        Arc::new(move |x: &[f64], y: &[f64], out: &mut [f64]| model.mean_into(Operator::G, x, y, out))
    };
    let h = {
        let model = Arc::clone(&model);
        Arc::new(move |y: &[f64], out: &mut [f64]| out.copy_from_slice(&model.h(y)))
    };

    let mut spec = ProblemSpec {
        name: "gtd".into(),
        dx: m,
        dy: m,
        sample_f,
        sample_g,
        mean_f: Some(mean_f),
        mean_g: Some(mean_g),
        h: Some(h),
        fixed_point,
        constants: ProblemConstants {
            mu_f: 0.0,
            mu_g: 0.0,
            l_f: 0.0,
            l_g: 0.0,
            l_h: 0.0,
            estimated: true,
        },
        noise: NoiseModel::Finite(Arc::new(pair_chain)),
    };
    spec.constants = estimate_constants(&spec, &model, cfg.region_radius, cfg.estimate_samples.max(1));
    Ok(spec)
}

/// Region-restricted sampled estimates of `μ_F, μ_G, L_F, L_G, L_H`.
fn estimate_constants(spec: &ProblemSpec, model: &GtdModel, radius: f64, samples: usize) -> ProblemConstants {
    let mut rng = ChaCha8Rng::seed_from_u64(GTD_ESTIMATE_SEED);
    let m = model.m;
    let (cx, cy) = spec.fixed_point.clone().unwrap_or_else(|| (vec![0.0; m], vec![0.0; m]));

    let mut ys: Vec<Vec<f64>> = (0..samples).map(|_| random_in_ball(&cy, radius, &mut rng)).collect();
    ys.push(cy.clone());

    // μ_F: smallest eigenvalue of E[φφᵀ] over the region
    let mu_f = ys
        .iter()
        .map(|y| model.normal_equations(y).0.symmetric_eigenvalues().min())
        .fold(f64::INFINITY, f64::min);

    // μ_G: smallest one-point monotonicity quotient
    let mu_g = if spec.fixed_point.is_some() {
        ys.iter()
            .filter_map(|y| {
                let r = dist(y, &cy);
                (r > 1e-8).then(|| {
                    let g = model.reduced_g(y);
                    let diff: Vec<f64> = y.iter().zip(&cy).map(|(a, b)| a - b).collect();
                    dot(&diff, &g) / (r * r)
                })
            })
            .fold(f64::INFINITY, f64::min)
    } else {
        f64::NAN
    };

    let states = spec.enumerable_states().unwrap_or_default();
    let pairs = (samples / 4).max(50);
    let l_f = sampled_lipschitz(spec, Operator::F, (&cx, &cy), radius, pairs, &states, &mut rng);
    let l_g = sampled_lipschitz(spec, Operator::G, (&cx, &cy), radius, pairs, &states, &mut rng);
    let mut l_h: f64 = 0.0;
    for _ in 0..pairs {
        let y1 = random_in_ball(&cy, radius, &mut rng);
        let y2 = random_in_ball(&cy, radius, &mut rng);
        let d = dist(&y1, &y2);
        if d > 0.0 {
            l_h = l_h.max(dist(&model.h(&y1), &model.h(&y2)) / d);
        }
    }
    ProblemConstants {
        mu_f,
        mu_g,
        l_f: l_f.max(mu_f),
        l_g: l_g.max(mu_g),
        l_h,
        estimated: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state(eps: f64) -> GtdConfig {
        GtdConfig {
            transition: vec![vec![0.6, 0.4], vec![0.3, 0.7]],
            rewards: vec![1.0, -0.5],
            gamma: 0.9,
            features: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            curvature: vec![
                vec![vec![1.0, 0.2], vec![0.2, 0.5]],
                vec![vec![0.3, 0.0], vec![0.0, 1.0]],
            ],
            epsilon: eps,
            region_radius: 1.0,
            estimate_samples: 200,
        }
    }

    #[test]
    fn linear_approximator_has_no_correction() {
        let cfg = two_state(0.0);
        let p = make_gtd(&cfg).unwrap();
        let model_spec = &p;
        // with ε = 0 the G operator reduces to −(φ − γφ′)φᵀx
        let x = [0.3, -0.7];
        let y = [1.0, 2.0];
        for s in 0..4 {
            let g = model_spec.sample(Operator::G, &x, &y, &NoiseState::Finite(s));
            let f = model_spec.sample(Operator::F, &x, &y, &NoiseState::Finite(s));
            assert!(g.iter().chain(&f).all(|v| v.is_finite()));
        }
        // pair 0 is (0, 0): φ = e₀, φ′ = e₀, so G = −(1 − γ)·x₀·e₀
        let g = model_spec.sample(Operator::G, &x, &y, &NoiseState::Finite(0));
        assert!((g[0] + 0.1 * 0.3).abs() < 1e-15 && g[1] == 0.0);
    }

    #[test]
    fn zero_x_gives_minus_delta_phi() {
        let p = make_gtd(&two_state(0.1)).unwrap();
        let y = [0.5, -0.2];
        // pair 1 is (0, 1)
        let f = p.sample(Operator::F, &[0.0, 0.0], &y, &NoiseState::Finite(1));
        let v = |z: usize, m: [[f64; 2]; 2]| {
            let quad = y[0] * (m[0][0] * y[0] + m[0][1] * y[1]) + y[1] * (m[1][0] * y[0] + m[1][1] * y[1]);
            y[z] + 0.05 * quad
        };
        let m0 = [[1.0, 0.2], [0.2, 0.5]];
        let m1 = [[0.3, 0.0], [0.0, 1.0]];
        let delta = 1.0 + 0.9 * v(1, m1) - v(0, m0);
        let phi = [
            1.0 + 0.1 * (m0[0][0] * y[0] + m0[0][1] * y[1]),
            0.1 * (m0[1][0] * y[0] + m0[1][1] * y[1]),
        ];
        assert!((f[0] + delta * phi[0]).abs() < 1e-14);
        assert!((f[1] + delta * phi[1]).abs() < 1e-14);
    }

    #[test]
    fn root_and_h_are_consistent() {
        let p = make_gtd(&two_state(0.1)).unwrap();
        p.validate().unwrap();
        assert!(p.constants.mu_f > 0.0 && p.constants.mu_g > 0.0);
        // closed-form mean equals the pair-chain stationary sum
        let x = [0.2, 0.1];
        let y = [-0.3, 0.4];
        for which in [Operator::F, Operator::G] {
            let a = p.mean(which, &x, &y).unwrap();
            let b = p.mean_exact(which, &x, &y).unwrap();
            assert!(dist(&a, &b) < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_discount() {
        let mut cfg = two_state(0.0);
        cfg.gamma = 1.0;
        assert!(matches!(make_gtd(&cfg), Err(Error::Config { .. })));
    }
}
