use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Operator, ProblemSpec};
use crate::linalg::{dist, norm};
use crate::markov_noise::NoiseState;

/// Draws used for the sup over ξ when the noise space is not enumerable.
const SAMPLED_SUP_DRAWS: usize = 10_000;
const ESTIMATE_SEED: u64 = 0x5eed_b0b0;

/// The growth constant `B` together with how it was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundEstimate {
    pub b: f64,
    /// the sup over ξ was taken over sampled states rather than the full state space
    pub sampled_sup: bool,
    /// Lipschitz moduli were (re-)estimated by sampling over the region
    pub sampled_lipschitz: bool,
}

pub(crate) fn random_in_ball<R: Rng + ?Sized>(center: &[f64], radius: f64, rng: &mut R) -> Vec<f64> {
    let d = center.len();
    let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let n = norm(&dir).max(f64::MIN_POSITIVE);
    let r = radius * rng.random::<f64>().powf(1.0 / d as f64);
    center.iter().zip(&dir).map(|(c, v)| c + r * v / n).collect()
}

/// Noise states to take a sup over: all of them when enumerable, otherwise
/// `draws` consecutive states of a stationary source.
pub(crate) fn noise_states_for_sup<R: Rng + ?Sized>(
    spec: &ProblemSpec,
    draws: usize,
    rng: &mut R,
) -> (Vec<NoiseState>, bool) {
    if let Some(states) = spec.enumerable_states() {
        return (states, false);
    }
    let mut src = spec.noise.source();
    if src.init_stationary(rng).is_err() {
        return (Vec::new(), true);
    }
    let states = (0..draws).filter_map(|_| src.step(rng).ok().cloned()).collect();
    (states, true)
}

/// Largest observed ratio `‖Op(x₁, y₁; ξ) − Op(x₂, y₂; ξ)‖ / (‖x₁ − x₂‖ + ‖y₁ − y₂‖)`
/// over random pairs in balls of `radius` around `(cx, cy)`, for every noise state
/// in `states`. A lower bound on the true modulus.
pub fn sampled_lipschitz<R: Rng + ?Sized>(
    spec: &ProblemSpec,
    which: Operator,
    center: (&[f64], &[f64]),
    radius: f64,
    pairs: usize,
    states: &[NoiseState],
    rng: &mut R,
) -> f64 {
    let mut best: f64 = 0.0;
    for _ in 0..pairs {
        let x1 = random_in_ball(center.0, radius, rng);
        let y1 = random_in_ball(center.1, radius, rng);
        let x2 = random_in_ball(center.0, radius, rng);
        let y2 = random_in_ball(center.1, radius, rng);
        let denom = dist(&x1, &x2) + dist(&y1, &y2);
        if denom == 0.0 {
            continue;
        }
        for xi in states {
            let a = spec.sample(which, &x1, &y1, xi);
            let b = spec.sample(which, &x2, &y2, xi);
            best = best.max(dist(&a, &b) / denom);
        }
    }
    best
}

/// `B = max{ max_ξ ‖F(0,0;ξ)‖, max_ξ ‖G(0,0;ξ)‖, ‖F(0,0)‖, ‖G(0,0)‖, L_F, L_G, L_H }`.
///
/// The sup over ξ is exact for enumerable noise and sampled otherwise. When the
/// problem's Lipschitz constants are themselves estimates, they are re-sampled
/// on the ball of radius `region` around the fixed point (or origin) and the
/// larger value is kept.
pub fn estimate_b(spec: &ProblemSpec, region: f64) -> BoundEstimate {
    let mut rng = ChaCha8Rng::seed_from_u64(ESTIMATE_SEED);
    let zx = vec![0.0; spec.dx];
    let zy = vec![0.0; spec.dy];
    let (states, sampled_sup) = noise_states_for_sup(spec, SAMPLED_SUP_DRAWS, &mut rng);

    let mut b: f64 = 0.0;
    for xi in &states {
        b = b.max(norm(&spec.sample(Operator::F, &zx, &zy, xi)));
        b = b.max(norm(&spec.sample(Operator::G, &zx, &zy, xi)));
    }
    for which in [Operator::F, Operator::G] {
        if let Ok(m) = spec.mean(which, &zx, &zy) {
            b = b.max(norm(&m));
        }
    }
    let c = spec.constants;
    b = b.max(c.l_f).max(c.l_g).max(c.l_h);

    let mut resampled = false;
    if c.estimated && region > 0.0 {
        let (cx, cy) = match spec.fixed_point() {
            Ok((x, y)) => (x.to_vec(), y.to_vec()),
            Err(_) => (zx.clone(), zy.clone()),
        };
        let sub: Vec<NoiseState> = states.iter().take(64).cloned().collect();
        for which in [Operator::F, Operator::G] {
            b = b.max(sampled_lipschitz(spec, which, (&cx, &cy), region, 500, &sub, &mut rng));
        }
        resampled = true;
    }
    BoundEstimate {
        b,
        sampled_sup,
        sampled_lipschitz: resampled,
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use nalgebra::DMatrix;

    use super::*;
    use crate::markov_noise::FiniteChain;
    use crate::problems::{make_linear, LinearConfig};

    fn chain() -> Arc<FiniteChain> {
        Arc::new(FiniteChain::new(vec![vec![0.7, 0.3], vec![0.3, 0.7]]).unwrap())
    }

    #[test]
    fn noise_free_b_is_max_lipschitz() {
        let a = DMatrix::from_row_slice(1, 1, &[0.5]);
        let g = DMatrix::from_row_slice(1, 1, &[0.8]);
        let cfg = LinearConfig::from_blocks(&a, &(&a * 0.5), &(&a * 0.5), &g);
        let p = make_linear(&cfg, chain()).unwrap();
        let est = estimate_b(&p, 1.0);
        let c = p.constants;
        assert_eq!(est.b, c.l_f.max(c.l_g).max(c.l_h));
        assert!(!est.sampled_sup && !est.sampled_lipschitz);
    }

    #[test]
    fn inflating_one_state_bias_raises_b_only_past_the_max() {
        let a11 = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let id = DMatrix::identity(2, 2);
        let mut cfg = LinearConfig::from_blocks(&a11, &id, &id, &(&id * 2.0));
        cfg.bias_f = vec![vec![0.1, 0.0], vec![-0.1, 0.0]];
        let base = estimate_b(&make_linear(&cfg, chain()).unwrap(), 1.0).b;
        // tiny bias does not bind
        cfg.bias_f = vec![vec![0.2, 0.0], vec![-0.2, 0.0]];
        assert_eq!(estimate_b(&make_linear(&cfg, chain()).unwrap(), 1.0).b, base);
        cfg.bias_f = vec![vec![10.0, 0.0], vec![-10.0, 0.0]];
        let big = estimate_b(&make_linear(&cfg, chain()).unwrap(), 1.0).b;
        assert!((big - 10.0).abs() < 1e-12);
    }

    #[test]
    fn ball_samples_stay_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let p = random_in_ball(&[1.0, -1.0, 0.0], 0.5, &mut rng);
            assert!(dist(&p, &[1.0, -1.0, 0.0]) <= 0.5 + 1e-12);
        }
    }
}
