//! Operator pairs `F(x, y; ξ)`, `G(x, y; ξ)` and the built-in problem instances.
//!
//! Every problem is a [`ProblemSpec`]: sampled operators, optional closed-form
//! means, the solution map `H` with `F(H(y), y) = 0`, the root `(x*, y*)`, and
//! the monotonicity and Lipschitz constants the finite-time analysis consumes.
//! Operators write into caller-provided buffers so the iteration loop does not
//! allocate.

mod estimate;
mod gtd;
mod linear;
mod robust_pr;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub(crate) use estimate::random_in_ball;
pub use estimate::{estimate_b, sampled_lipschitz, BoundEstimate};
pub use gtd::{make_gtd, GtdConfig};
pub use linear::{make_linear, LinearConfig};
pub use robust_pr::{make_robust_pr, RobustPrConfig};

use crate::error::{Error, Result};
use crate::markov_noise::{ChainConfig, FiniteChain, NoiseModel, NoiseState};

/// Sampled operator `(x, y, ξ) ↦ out`.
pub type SampledOperator = Arc<dyn Fn(&[f64], &[f64], &NoiseState, &mut [f64]) + Send + Sync>;
/// Mean operator `(x, y) ↦ out`.
pub type MeanOperator = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
/// Solution map `y ↦ H(y)`.
pub type SolutionMap = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Operator {
    F,
    G,
}

/// `μ_F, μ_G, L_F, L_G, L_H`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemConstants {
    pub mu_f: f64,
    pub mu_g: f64,
    pub l_f: f64,
    pub l_g: f64,
    pub l_h: f64,
    /// true when the constants are sampled estimates over a region rather than exact
    pub estimated: bool,
}

/// A root-finding problem `F(x*, y*) = 0`, `G(x*, y*) = 0` with Markovian samples.
///
/// Immutable after construction; share it across trials by reference.
#[derive(Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub dx: usize,
    pub dy: usize,
    pub sample_f: SampledOperator,
    pub sample_g: SampledOperator,
    pub mean_f: Option<MeanOperator>,
    pub mean_g: Option<MeanOperator>,
    pub h: Option<SolutionMap>,
    pub fixed_point: Option<(Vec<f64>, Vec<f64>)>,
    pub constants: ProblemConstants,
    pub noise: NoiseModel,
}

impl std::fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("dx", &self.dx)
            .field("dy", &self.dy)
            .field("has_mean", &self.mean_f.is_some())
            .field("has_h", &self.h.is_some())
            .field("fixed_point", &self.fixed_point)
            .field("constants", &self.constants)
            .finish_non_exhaustive()
    }
}

impl ProblemSpec {
    pub fn out_dim(&self, which: Operator) -> usize {
        match which {
            Operator::F => self.dx,
            Operator::G => self.dy,
        }
    }

    /// Sampled operator value at `(x, y, ξ)`.
    pub fn sample(&self, which: Operator, x: &[f64], y: &[f64], xi: &NoiseState) -> Vec<f64> {
        let mut out = vec![0.0; self.out_dim(which)];
        match which {
            Operator::F => (self.sample_f)(x, y, xi, &mut out),
            Operator::G => (self.sample_g)(x, y, xi, &mut out),
        }
        out
    }

    /// Mean operator: the closed form when the problem provides one, else the exact
    /// stationary-weighted sum.
    pub fn mean(&self, which: Operator, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let closed = match which {
            Operator::F => self.mean_f.as_ref(),
            Operator::G => self.mean_g.as_ref(),
        };
        match closed {
            Some(m) => {
                let mut out = vec![0.0; self.out_dim(which)];
                m(x, y, &mut out);
                Ok(out)
            }
            None => self.mean_exact(which, x, y),
        }
    }

    pub fn has_mean(&self) -> bool {
        (self.mean_f.is_some() && self.mean_g.is_some()) || self.noise.finite_chain().is_some()
    }

    /// `Σ_ξ π(ξ) sample(x, y, ξ)` over an enumerable noise space.
    pub fn mean_exact(&self, which: Operator, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let chain = self.noise.finite_chain().ok_or(Error::NotEnumerable)?;
        let pi = chain.stationary_distribution()?;
        let mut acc = vec![0.0; self.out_dim(which)];
        for (i, &w) in pi.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let v = self.sample(which, x, y, &NoiseState::Finite(i));
            acc.iter_mut().zip(&v).for_each(|(a, b)| *a += w * b);
        }
        Ok(acc)
    }

    pub fn h_of(&self, y: &[f64]) -> Result<Vec<f64>> {
        let h = self.h.as_ref().ok_or(Error::MissingCapability("the solution map H"))?;
        let mut out = vec![0.0; self.dx];
        h(y, &mut out);
        Ok(out)
    }

    pub fn fixed_point(&self) -> Result<(&[f64], &[f64])> {
        self.fixed_point
            .as_ref()
            .map(|(x, y)| (x.as_slice(), y.as_slice()))
            .ok_or(Error::MissingCapability("a fixed point (x*, y*)"))
    }

    /// `‖y*‖ + ‖H(0)‖ + 1`, the offset appearing in the residual bounds.
    pub fn offset_norm(&self) -> Result<f64> {
        let (_, ystar) = self.fixed_point()?;
        let h0 = self.h_of(&vec![0.0; self.dy])?;
        Ok(crate::linalg::norm(ystar) + crate::linalg::norm(&h0) + 1.0)
    }

    /// Every noise state when the space is enumerable.
    pub fn enumerable_states(&self) -> Option<Vec<NoiseState>> {
        self.noise
            .finite_chain()
            .map(|c| (0..c.n()).map(NoiseState::Finite).collect())
    }

    /// Checks the structural invariants: `x* = H(y*)`, `F(x*, y*) = G(x*, y*) = 0`,
    /// `μ ≤ L`.
    pub fn validate(&self) -> Result<()> {
        let c = &self.constants;
        if !(c.mu_f > 0.0 && c.mu_g > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "monotonicity constants must be positive (mu_F = {}, mu_G = {})",
                c.mu_f, c.mu_g
            )));
        }
        if c.mu_f > c.l_f * (1.0 + 1e-12) || c.mu_g > c.l_g * (1.0 + 1e-12) {
            return Err(Error::InvalidArgument(
                "mu must not exceed the Lipschitz modulus".into(),
            ));
        }
        if let (Some(_), Some((xs, ys))) = (&self.h, &self.fixed_point) {
            let hx = self.h_of(ys)?;
            let gap = crate::linalg::dist(&hx, xs);
            if gap > 1e-9 {
                return Err(Error::InvalidArgument(format!("‖x* − H(y*)‖ = {gap:e}")));
            }
            if self.has_mean() {
                for which in [Operator::F, Operator::G] {
                    let r = crate::linalg::norm(&self.mean(which, xs, ys)?);
                    if r > 1e-9 {
                        return Err(Error::InvalidArgument(format!(
                            "mean operator {which:?} at the fixed point has norm {r:e}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Problem description as read from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemConfig {
    Linear { chain: ChainConfig, linear: LinearConfig },
    RobustPr { robust_pr: RobustPrConfig },
    Gtd { gtd: GtdConfig },
}

impl ProblemConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn build(&self) -> Result<ProblemSpec> {
        match self {
            Self::Linear { chain, linear } => {
                let chain = FiniteChain::from_config(chain)?;
                make_linear(linear, Arc::new(chain))
            }
            Self::RobustPr { robust_pr } => make_robust_pr(robust_pr),
            Self::Gtd { gtd } => make_gtd(gtd),
        }
    }
}
