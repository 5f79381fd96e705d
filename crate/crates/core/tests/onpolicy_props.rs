mod common;

use common::{char_poly_spectral_radius, paths_into_safe, random_embedded, random_simplex, rng};
use mdp_stability::onpolicy::{
    analyze, chain_perturbation_bound, decrease_bound, finite_difference_jacobian, jacobian_norm, make_toy_policy,
    perturbation_size, rate_of_decrease_check, realize_chain, shutdown_probability, spectral_radius, start_sensitivity,
    transient_set, DiffPolicy, EmbeddedMdp, Perturbation, LINEARIZATION_THRESHOLD,
};
use mdp_stability::safety::StartDistribution;
use mdp_stability::scenarios::{random_perturbation, random_toy_policy, recurrent_dead_fixture, uniform_shutdown_perturbation};
use proptest::prelude::*;
use rand::Rng;

fn softmax_oracle(weights: &[Vec<f64>], t: f64, x: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = weights.iter().map(|w| (w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn full_start(seed: u64, n: usize) -> StartDistribution {
    let mut r = rng(seed);
    StartDistribution::new(random_simplex(&mut r, n)).unwrap().allowing_safe()
}

fn free_start(emdp: &EmbeddedMdp) -> StartDistribution {
    let free = emdp.base.non_safe();
    let mut w = vec![0.0; emdp.base.n_states()];
    for &s in &free {
        w[s] = 1.0 / free.len() as f64;
    }
    StartDistribution::new(w).unwrap()
}

/// Absorption probabilities by iterating `h <- P h` on non-safe states.
fn iterated_shutdown(p: &[Vec<f64>], safe: &[usize], start: &[f64], sweeps: usize) -> f64 {
    let n = p.len();
    let mut h: Vec<f64> = (0..n).map(|i| f64::from(u8::from(safe.contains(&i)))).collect();
    for _ in 0..sweeps {
        h = (0..n)
            .map(|i| if safe.contains(&i) { 1.0 } else { (0..n).map(|j| p[i][j] * h[j]).sum() })
            .collect();
    }
    start.iter().zip(&h).map(|(a, b)| a * b).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn realized_chain_matches_summation(seed in any::<u64>(), n in 2usize..=8, m in 1usize..=3, d in 1usize..=4) {
        let emdp = random_embedded(seed, n, m, d);
        let policy = random_toy_policy(seed ^ 1, m, d, 2.0, 0.7).unwrap();
        let p = realize_chain(&emdp, &policy).unwrap();
        for i in 0..n {
            let pi = softmax_oracle(&policy.weights, 0.7, &emdp.embedding[i]);
            for j in 0..n {
                let direct: f64 = (0..m).map(|a| pi[a] * emdp.base.prob(i, a, j)).sum();
                prop_assert!((p[i][j] - direct).abs() <= 1e-12);
            }
            prop_assert!((p[i].iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn transient_set_matches_path_enumeration(seed in any::<u64>(), n in 2usize..=8) {
        let emdp = random_embedded(seed, n, 2, 2);
        let policy = random_toy_policy(seed ^ 2, 2, 2, 3.0, 1.0).unwrap();
        let p = realize_chain(&emdp, &policy).unwrap();
        prop_assert_eq!(transient_set(&p, emdp.base.safe()), paths_into_safe(&p, emdp.base.safe()));
    }

    #[test]
    fn shutdown_closed_form_matches_iteration(seed in any::<u64>(), n in 2usize..=8, m in 1usize..=3) {
        let emdp = random_embedded(seed, n, m, 2);
        let policy = random_toy_policy(seed ^ 3, m, 2, 2.0, 1.0).unwrap();
        let p = realize_chain(&emdp, &policy).unwrap();
        let start = full_start(seed, n);
        let s = shutdown_probability(&p, emdp.base.safe(), &start).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
        let oracle = iterated_shutdown(&p, emdp.base.safe(), &start.weights, 100_000);
        prop_assert!((s - oracle).abs() <= 1e-10);
    }

    #[test]
    fn spectral_radius_matches_characteristic_polynomial(seed in any::<u64>(), n in 1usize..=6, fill in 0.3f64..1.0) {
        let mut r = rng(seed);
        let p: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let keep = r.random_range(0.2..1.0);
                let row = random_simplex(&mut r, n);
                row.into_iter().map(|v| if r.random::<f64>() < fill { v * keep } else { 0.0 }).collect()
            })
            .collect();
        let est = spectral_radius(&p);
        let oracle = char_poly_spectral_radius(&p);
        if est.converged {
            prop_assert!((est.value - oracle).abs() <= 1e-8, "power {} oracle {}", est.value, oracle);
        } else {
            prop_assert!((est.value - oracle).abs() <= 1e-3);
        }
    }

    #[test]
    fn analysis_invariants(seed in any::<u64>(), n in 3usize..=8, m in 1usize..=3, d in 1usize..=3) {
        let emdp = random_embedded(seed, n, m, d);
        let policy = random_toy_policy(seed ^ 4, m, d, 2.0, 1.0).unwrap();
        let a = analyze(&emdp, &policy, &free_start(&emdp)).unwrap();
        prop_assert!((0.0..=1.0).contains(&a.safety));
        if !a.s_trans.is_empty() {
            prop_assert!(a.lambda1 >= 0.0 && a.lambda1 < 1.0);
        }
        let inv = 1.0 / (1.0 - a.lambda1);
        prop_assert!((a.bound_b - inv * (1.0 + inv) * emdp.base.safe().len() as f64).abs() <= 1e-12 * a.bound_b);
    }

    #[test]
    fn size_is_resummed_exactly(seed in any::<u64>(), n in 2usize..=8, m in 1usize..=3, d in 1usize..=3, size in 1e-6f64..1e-2) {
        let emdp = random_embedded(seed, n, m, d);
        let policy = random_toy_policy(seed ^ 5, m, d, 2.0, 1.0).unwrap();
        let pert = random_perturbation(&emdp, &policy, size, seed, LINEARIZATION_THRESHOLD).unwrap();
        let mut ds = 0.0;
        for v in &pert.delta_s {
            ds += v.iter().map(|x| x * x).sum::<f64>().sqrt();
        }
        let mut dt = 0.0;
        for s in &pert.delta_t {
            for a in s {
                for x in a {
                    dt += x.abs();
                }
            }
        }
        let direct = 0.5 * n as f64 * policy.bound_b() * ds + dt;
        prop_assert!((perturbation_size(&emdp, &policy, &pert).unwrap() - direct).abs() <= 1e-15 * direct.max(1.0));
        prop_assert!((pert.size - direct).abs() <= 1e-15 * direct.max(1.0));
        let after = pert.apply(&emdp).unwrap();
        for s in 0..n {
            for a in 0..m {
                let sum: f64 = after.base.row(s, a).iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn chain_bound_and_rate_hold_below_threshold(seed in any::<u64>(), n in 3usize..=8, m in 2usize..=3, d in 1usize..=3, log_size in -6.0f64..-3.0) {
        let emdp = random_embedded(seed, n, m, d);
        let policy = random_toy_policy(seed ^ 6, m, d, 2.0, 1.0).unwrap().tightened_for(&emdp.embedding);
        let pert = random_perturbation(&emdp, &policy, 10f64.powf(log_size), seed ^ 7, LINEARIZATION_THRESHOLD).unwrap();
        let bound = chain_perturbation_bound(&emdp, &policy, &pert, LINEARIZATION_THRESHOLD).unwrap();
        prop_assert!(bound.entries_hold, "{:?}", bound.violations);
        prop_assert!(bound.aggregate_holds);
        prop_assert!(!bound.first_order_only);
        let rate = rate_of_decrease_check(&emdp, &policy, &pert, &free_start(&emdp)).unwrap();
        prop_assert!(rate.below_bound);
        prop_assert!(rate.lower_witness);
        prop_assert!(rate.trans_included);
    }

    #[test]
    fn jacobian_matches_finite_differences(seed in any::<u64>(), m in 1usize..=4, d in 1usize..=4, t in 0.3f64..3.0) {
        let policy = random_toy_policy(seed, m, d, 2.0, t).unwrap();
        let mut r = rng(seed ^ 8);
        let x: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..2.0)).collect();
        let p = policy.probs(&x);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-10 && p.iter().all(|&v| v >= 0.0));
        let j = policy.jacobian(&x);
        let fd = finite_difference_jacobian(&policy, &x, 1e-5);
        let scale = j.iter().flatten().fold(0.0_f64, |a, v| a.max(v.abs()));
        let err = j.iter().flatten().zip(fd.iter().flatten()).fold(0.0_f64, |a, (u, v)| a.max((u - v).abs()));
        prop_assert!(err <= 1e-6 * scale.max(1e-300) || err == 0.0);
        for k in 0..d {
            prop_assert!(j.iter().map(|row| row[k]).sum::<f64>().abs() <= 1e-8);
        }
        prop_assert!(jacobian_norm(&j) <= policy.bound_b() + 1e-12);
    }

    #[test]
    fn jacobian_norm_is_the_operator_norm(seed in any::<u64>(), m in 1usize..=4, d in 1usize..=3) {
        let mut r = rng(seed);
        let j: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let norm = jacobian_norm(&j);
        let mut best = 0.0_f64;
        for _ in 0..20_000 {
            let v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
            let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if len < 1e-9 {
                continue;
            }
            let image: f64 = j.iter().map(|row| row.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>().abs()).sum();
            best = best.max(image / len);
        }
        prop_assert!(best <= norm + 1e-12);
        prop_assert!(best >= 0.97 * norm);
    }

    #[test]
    fn half_l1_continuity_always_holds(seed in any::<u64>(), n in 2usize..=8, m in 1usize..=3) {
        let emdp = random_embedded(seed, n, m, 2);
        let policy = random_toy_policy(seed ^ 9, m, 2, 2.0, 1.0).unwrap();
        let p = realize_chain(&emdp, &policy).unwrap();
        let rep = start_sensitivity(&p, emdp.base.safe(), &full_start(seed, n), &full_start(seed ^ 1, n)).unwrap();
        prop_assert!(rep.half_l1_bound_holds);
    }
}

#[test]
fn shutdown_examples() {
    // a -> safe or dead with equal odds.
    let p = vec![vec![1.0, 0.0, 0.0], vec![0.5, 0.0, 0.5], vec![0.0, 0.0, 1.0]];
    let at = |s: usize| StartDistribution::point(3, s).allowing_safe();
    assert!((shutdown_probability(&p, &[0], &at(1)).unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(shutdown_probability(&p, &[0], &at(0)).unwrap(), 1.0);
    assert_eq!(shutdown_probability(&p, &[0], &at(2)).unwrap(), 0.0);
    assert_eq!(transient_set(&p, &[0]), vec![1]);
}

#[test]
fn spectral_examples() {
    assert!((spectral_radius(&[vec![0.5]]).value - 0.5).abs() < 1e-10);
    let swap = spectral_radius(&[vec![0.0, 0.5], vec![0.5, 0.0]]);
    assert!((swap.value - 0.5).abs() < 1e-10);
    assert!(swap.agrees);
}

#[test]
fn decrease_bound_is_monotone() {
    let lambdas = [0.0, 0.1, 0.5, 0.9, 0.99];
    for w in lambdas.windows(2) {
        for k in 1..4 {
            assert!(decrease_bound(w[0], k) < decrease_bound(w[1], k));
            assert!(decrease_bound(w[0], k) < decrease_bound(w[0], k + 1));
        }
    }
    assert_eq!(decrease_bound(0.0, 1), 2.0);
}

#[test]
fn size_formula_arithmetic() {
    let emdp = EmbeddedMdp::new(
        recurrent_dead_fixture().unwrap().base.clone(),
        vec![vec![0.0], vec![0.0], vec![0.0]],
        None,
    )
    .unwrap();
    let mut policy = make_toy_policy(vec![vec![1.0]], 1.0).unwrap();
    policy.bound_b = Some(1.0);
    let zero = Perturbation::zero(&emdp);
    assert_eq!(perturbation_size(&emdp, &policy, &zero).unwrap(), 0.0);
    let mut ds = zero.delta_s.clone();
    ds[1][0] = 0.1 / 1.5;
    let pert = Perturbation::new(&emdp, &policy, ds, zero.delta_t.clone()).unwrap();
    assert!((pert.size - 0.1).abs() < 1e-15);
}

#[test]
fn toy_policy_degenerate_cases() {
    let zero = make_toy_policy(vec![vec![0.0, 0.0]; 3], 1.0).unwrap();
    let x = [0.3, -0.7];
    assert!(zero.probs(&x).iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    assert!(zero.jacobian(&x).iter().flatten().all(|&v| v == 0.0));
    assert_eq!(zero.clone().tightened_for(&[x.to_vec()]).bound_b(), 0.0);

    let single = make_toy_policy(vec![vec![2.0, -1.0]], 0.5).unwrap();
    assert_eq!(single.probs(&x), vec![1.0]);
    assert!(single.jacobian(&x).iter().flatten().all(|&v| v == 0.0));

    let policy = random_toy_policy(4, 3, 2, 2.0, 1.0).unwrap();
    let tight = policy.clone().tightened_for(&[vec![0.0, 0.0], vec![1.0, 1.0]]);
    assert!(tight.bound_b() <= policy.bound_b());
    assert!(make_toy_policy(vec![vec![1.0]], 0.0).is_err());
}

#[test]
fn chain_bound_special_cases() {
    let emdp = random_embedded(31, 6, 2, 2);
    let policy = random_toy_policy(32, 2, 2, 2.0, 1.0).unwrap().tightened_for(&emdp.embedding);
    let pert = random_perturbation(&emdp, &policy, 1e-3, 33, LINEARIZATION_THRESHOLD).unwrap();

    let no_shift = Perturbation::new(&emdp, &policy, Perturbation::zero(&emdp).delta_s, pert.delta_t.clone()).unwrap();
    let bound = chain_perturbation_bound(&emdp, &policy, &no_shift, LINEARIZATION_THRESHOLD).unwrap();
    for i in 0..6 {
        for j in 0..6 {
            assert!(bound.actual[i][j] <= bound.rhs[i][j] + 1e-15);
        }
    }

    let no_env = Perturbation::new(&emdp, &policy, pert.delta_s.clone(), Perturbation::zero(&emdp).delta_t).unwrap();
    let bound = chain_perturbation_bound(&emdp, &policy, &no_env, LINEARIZATION_THRESHOLD).unwrap();
    assert!(bound.entries_hold && bound.aggregate_holds);

    let rate = rate_of_decrease_check(&emdp, &policy, &Perturbation::zero(&emdp), &free_start(&emdp)).unwrap();
    assert_eq!(rate.ratio, 0.0);
    assert!(rate.below_bound);
}

#[test]
fn uniform_shutdown_jumps_safety_up() {
    let emdp = recurrent_dead_fixture().unwrap();
    let policy = make_toy_policy(vec![vec![0.0]], 1.0).unwrap();
    let start = free_start(&emdp);
    let before = analyze(&emdp, &policy, &start).unwrap();
    assert_eq!(before.safety, 0.0);
    for big_n in [10.0, 100.0, 1e4] {
        let pert = uniform_shutdown_perturbation(&emdp, &policy, big_n).unwrap();
        let rate = rate_of_decrease_check(&emdp, &policy, &pert, &start).unwrap();
        assert!((rate.safety_after - 1.0).abs() < 1e-9);
        assert!(rate.below_bound && rate.lower_witness);
        assert!((rate.size - 4.0 / big_n).abs() < 1e-12);
    }
}

#[test]
fn sensitivity_examples() {
    let p = vec![vec![1.0, 0.0, 0.0], vec![0.5, 0.0, 0.5], vec![0.5, 0.5, 0.0]];
    let d = StartDistribution::new(vec![0.0, 0.3, 0.7]).unwrap();
    let same = start_sensitivity(&p, &[0], &d, &d).unwrap();
    assert_eq!(same.difference, 0.0);
    let twin = start_sensitivity(&p, &[0], &StartDistribution::point(3, 1), &StartDistribution::point(3, 2)).unwrap();
    assert!(twin.difference < 1e-12);
}
