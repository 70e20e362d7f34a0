use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{ProblemConstants, ProblemSpec};
use crate::error::{Error, Result};
use crate::linalg::{dot, mul_add};
use crate::markov_noise::{ArParams, NoiseModel, NoiseState};

/// SGD with Polyak-Ruppert averaging on AR-generated regression data.
///
/// The slow iterate `y` is the SGD iterate, the fast iterate `x` is the
/// running average. With `α_k = 1/(k+1)` the update `x ← x − α(x − y)`
/// reproduces `x_{k+1} = (1/(k+1)) Σ_{t≤k} y_t`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RobustPrConfig {
    pub ar: ArParams,
    #[serde(default = "default_loss")]
    pub loss: String,
}

fn default_loss() -> String {
    "squared".into()
}

/// `F(x, y; ξ) = x − y`, `G(x, y; ξ) = ∇_y (⟨y, ξ¹⟩ − ξ²)² = 2(⟨y, ξ¹⟩ − ξ²) ξ¹`.
///
/// The sampled gradient is not globally Lipschitz (its modulus scales with
/// `‖ξ¹‖²`), so `L_G` is reported for the mean operator and flagged as an estimate.
pub fn make_robust_pr(cfg: &RobustPrConfig) -> Result<ProblemSpec> {
    if cfg.loss != "squared" {
        return Err(Error::UnsupportedLoss(cfg.loss.clone()));
    }
    cfg.ar.validate()?;
    let d = cfg.ar.dim();
    let sigma = cfg.ar.stationary_covariance();
    let eig = sigma.clone().symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if lo <= 0.0 {
        return Err(Error::NotMonotone {
            which: "regressor covariance",
            value: lo,
        });
    }
    let x_true = cfg.ar.x_true.clone();

    let sample_f = Arc::new(|x: &[f64], y: &[f64], _: &NoiseState, out: &mut [f64]| {
        for ((o, a), b) in out.iter_mut().zip(x).zip(y) {
            *o = a - b;
        }
    });
    let sample_g = Arc::new(|_: &[f64], y: &[f64], xi: &NoiseState, out: &mut [f64]| {
        let NoiseState::Ar(st) = xi else {
            out.iter_mut().for_each(|o| *o = f64::NAN);
            return;
        };
        let resid = dot(y, &st.regressor) - st.response;
        for (o, r) in out.iter_mut().zip(&st.regressor) {
            *o = 2.0 * resid * r;
        }
    });
    let mean_f = Arc::new(|x: &[f64], y: &[f64], out: &mut [f64]| {
        for ((o, a), b) in out.iter_mut().zip(x).zip(y) {
            *o = a - b;
        }
    });
    // E[2(⟨y, ξ¹⟩ − ⟨x_true, ξ¹⟩ − V) ξ¹] = 2Σ(y − x_true)
    let mean_g = {
        let two_sigma = sigma * 2.0;
        let x_true = x_true.clone();
        Arc::new(move |_: &[f64], y: &[f64], out: &mut [f64]| {
            let diff: Vec<f64> = y.iter().zip(&x_true).map(|(a, b)| a - b).collect();
            out.iter_mut().for_each(|o| *o = 0.0);
            mul_add(out, &two_sigma, &diff);
        })
    };
    let h = Arc::new(|y: &[f64], out: &mut [f64]| out.copy_from_slice(y));

    Ok(ProblemSpec {
        name: "robust_pr".into(),
        dx: d,
        dy: d,
        sample_f,
        sample_g,
        mean_f: Some(mean_f),
        mean_g: Some(mean_g),
        h: Some(h),
        fixed_point: Some((x_true.clone(), x_true)),
        constants: ProblemConstants {
            mu_f: 1.0,
            mu_g: 2.0 * lo,
            l_f: std::f64::consts::SQRT_2,
            l_g: 2.0 * hi,
            l_h: 1.0,
            estimated: true,
        },
        noise: NoiseModel::Ar(Arc::new(cfg.ar.clone())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov_noise::ArState;
    use crate::problems::Operator;

    fn cfg() -> RobustPrConfig {
        RobustPrConfig {
            ar: ArParams {
                subdiagonal: vec![0.9, 0.85],
                x_true: vec![1.0, -2.0, 0.5],
                innovation_std: 1.0,
                noise_std: 1.0,
            },
            loss: "squared".into(),
        }
    }

    fn xi(regressor: Vec<f64>, response: f64) -> NoiseState {
        NoiseState::Ar(ArState { regressor, response })
    }

    #[test]
    fn averaging_operator_vanishes_on_diagonal() {
        let p = make_robust_pr(&cfg()).unwrap();
        let v = p.sample(Operator::F, &[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &xi(vec![0.0; 3], 0.0));
        assert_eq!(v, vec![0.0; 3]);
        p.validate().unwrap();
    }

    #[test]
    fn squared_loss_gradient() {
        let p = make_robust_pr(&cfg()).unwrap();
        let e1 = vec![1.0, 0.0, 0.0];
        // noiseless observation at the truth: zero gradient
        let g = p.sample(Operator::G, &[0.0; 3], &[1.0, -2.0, 0.5], &xi(e1.clone(), 1.0));
        assert_eq!(g, vec![0.0; 3]);
        let g = p.sample(Operator::G, &[0.0; 3], &[0.0; 3], &xi(e1, 3.0));
        assert_eq!(g, vec![-6.0, 0.0, 0.0]);
    }

    #[test]
    fn unsupported_loss() {
        let mut c = cfg();
        c.loss = "huber".into();
        assert!(matches!(make_robust_pr(&c), Err(Error::UnsupportedLoss(_))));
    }

    #[test]
    fn mean_exact_requires_enumerable_noise() {
        let p = make_robust_pr(&cfg()).unwrap();
        assert!(matches!(
            p.mean_exact(Operator::G, &[0.0; 3], &[0.0; 3]),
            Err(Error::NotEnumerable)
        ));
    }
}
