use proptest::prelude::*;
use ttsa_core::engine::{seed_for_trial, StepSchedule};
use ttsa_core::harness::fmt_f64;
use ttsa_core::markov_noise::{bias_profile, mixing_time, tv_distance};
use ttsa_core::problems::{estimate_b, Operator};
use ttsa_core::{FiniteChain, NoiseState, ProblemConfig, ProblemSpec};

const LINEAR4: &str = include_str!("../../../configs/problems/linear4.toml");

fn linear4() -> ProblemSpec {
    ProblemConfig::from_toml_str(LINEAR4).unwrap().build().unwrap()
}

fn normalize(w: &[f64]) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

fn prob_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.01f64..1.0, n).prop_map(|w| normalize(&w))
}

/// Strictly positive rows, hence ergodic.
fn chain(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Vec<f64>>> {
    n.prop_flat_map(|n| proptest::collection::vec(prob_vec(n), n))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tv_is_a_metric((p, q, r) in (2usize..7).prop_flat_map(|n| (prob_vec(n), prob_vec(n), prob_vec(n)))) {
        let pq = tv_distance(&p, &q).unwrap();
        prop_assert!((0.0..=1.0).contains(&pq));
        prop_assert_eq!(pq, tv_distance(&q, &p).unwrap());
        prop_assert!(tv_distance(&p, &p).unwrap() == 0.0);
        let pr = tv_distance(&p, &r).unwrap();
        let rq = tv_distance(&r, &q).unwrap();
        prop_assert!(pq <= pr + rq + 1e-12);
    }

    #[test]
    fn stationary_distribution_is_invariant(rows in chain(2..7)) {
        let c = FiniteChain::new(rows).unwrap();
        let pi = c.stationary_distribution().unwrap();
        prop_assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in c.left_multiply(&pi).iter().zip(&pi) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn tv_profile_is_nonincreasing_and_mixing_time_is_monotone(rows in chain(2..7)) {
        let c = FiniteChain::new(rows).unwrap();
        let tv = c.tv_profile(40).unwrap();
        for w in tv.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
        let t1 = mixing_time(&c, 0.1).unwrap();
        let t2 = mixing_time(&c, 0.01).unwrap();
        let t3 = mixing_time(&c, 0.001).unwrap();
        prop_assert!(t1 <= t2 && t2 <= t3);
        if t2 < tv.len() {
            prop_assert!(tv[t2] <= 0.01);
            prop_assert!(t2 == 0 || tv[t2 - 1] > 0.01);
        }
    }

    #[test]
    fn bias_is_bounded_by_total_variation(
        (rows, f) in (2usize..7).prop_flat_map(|n| (
            proptest::collection::vec(prob_vec(n), n),
            proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), n),
        ))
    ) {
        let c = FiniteChain::new(rows).unwrap();
        let bias = bias_profile(&c, &f, 30).unwrap();
        let tv = c.tv_profile(30).unwrap();
        let scale = 2.0 * f.iter().map(|v| norm(v)).fold(0.0, f64::max);
        for (b, t) in bias.iter().zip(&tv) {
            prop_assert!(*b <= scale * t + 1e-9);
        }
    }

    #[test]
    fn relabelling_states_changes_nothing(
        (rows, f, perm) in (2usize..6).prop_flat_map(|n| (
            proptest::collection::vec(prob_vec(n), n),
            proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 2), n),
            Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
        ))
    ) {
        let n = rows.len();
        // state i of the relabelled chain is state perm[i] of the original
        let permuted: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| rows[perm[i]][perm[j]]).collect()).collect();
        let pf: Vec<Vec<f64>> = (0..n).map(|i| f[perm[i]].clone()).collect();
        let a = FiniteChain::new(rows).unwrap();
        let b = FiniteChain::new(permuted).unwrap();
        prop_assert_eq!(mixing_time(&a, 0.01).unwrap(), mixing_time(&b, 0.01).unwrap());
        let pa = a.stationary_distribution().unwrap();
        let pb = b.stationary_distribution().unwrap();
        for i in 0..n {
            prop_assert!((pb[i] - pa[perm[i]]).abs() < 1e-10);
        }
        let ba = bias_profile(&a, &f, 20).unwrap();
        let bb = bias_profile(&b, &pf, 20).unwrap();
        for (x, y) in ba.iter().zip(&bb) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn schedules_are_positive_nonincreasing_and_clipped(
        alpha0 in 0.01f64..10.0,
        ratio in 0.01f64..1.0,
        c in 0.0f64..5.0,
        k in 0u64..1_000_000,
    ) {
        let s = StepSchedule::new(alpha0, alpha0 * ratio);
        prop_assert!(s.alpha(k) > 0.0 && s.beta(k) > 0.0);
        prop_assert!(s.alpha(k + 1) <= s.alpha(k));
        prop_assert!(s.beta(k + 1) <= s.beta(k));
        prop_assert!(s.beta(k) <= s.alpha(k));
        let tau = s.tau_at(k, c);
        prop_assert!(tau <= k);
        let sum: f64 = (k - tau..=k).map(|t| s.alpha(t)).sum();
        let got = s.tail_step_sum(k, tau).unwrap();
        prop_assert!((got - sum).abs() <= 1e-12 * sum.max(1.0));
    }

    #[test]
    fn trial_seeds_do_not_collide(master in any::<u64>(), i in 0u64..1_000_000, j in 0u64..1_000_000) {
        prop_assume!(i != j);
        prop_assert_ne!(seed_for_trial(master, i), seed_for_trial(master, j));
    }

    #[test]
    fn csv_reals_round_trip(v in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
        prop_assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn linear_growth_bound_holds(
        x in proptest::collection::vec(-50.0f64..50.0, 2),
        y in proptest::collection::vec(-50.0f64..50.0, 2),
        state in 0usize..4,
    ) {
        let spec = linear4();
        let b = estimate_b(&spec, 1.0).b;
        let xi = NoiseState::Finite(state);
        let scale = b * (norm(&x) + norm(&y) + 1.0);
        prop_assert!(norm(&spec.sample(Operator::F, &x, &y, &xi)) <= scale * (1.0 + 1e-12));
        prop_assert!(norm(&spec.sample(Operator::G, &x, &y, &xi)) <= scale * (1.0 + 1e-12));
    }

    #[test]
    fn solution_map_zeroes_the_fast_operator(y in proptest::collection::vec(-10.0f64..10.0, 2)) {
        let spec = linear4();
        let h = spec.h_of(&y).unwrap();
        let f = spec.mean(Operator::F, &h, &y).unwrap();
        prop_assert!(norm(&f) <= 1e-10 * (1.0 + norm(&y)));
    }
}
