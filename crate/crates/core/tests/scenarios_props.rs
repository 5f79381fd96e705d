mod common;

use common::{random_simplex, rng};
use mdp_stability::bisim::{bisim_metric, BisimConfig};
use mdp_stability::mdp::{validate, MdpSpec};
use mdp_stability::onpolicy::{make_toy_policy, EmbeddedMdp};
use mdp_stability::scenarios::{
    build_duplicated, build_playing_dead, build_uniform_shutdown, playing_dead_fixture, random_document, random_family,
    uniform_shutdown_perturbation, PlayingDeadParams, RandomFamily, RNG_NAME,
};
use proptest::prelude::*;
use rand::Rng;

fn family(seed: u64) -> RandomFamily {
    let mut r = rng(seed ^ 0xfa);
    RandomFamily::new(r.random_range(2..=10), r.random_range(1..=4), r.random_range(1..=4))
}

/// Some non-safe state has a path into the safe set under some actions.
fn safe_reachable(mdp: &MdpSpec) -> bool {
    let n = mdp.n_states();
    let mut mark: Vec<bool> = (0..n).map(|s| mdp.is_safe(s)).collect();
    let mut changed = true;
    while changed {
        changed = false;
        for s in 0..n {
            if !mark[s] && (0..mdp.n_actions()).any(|a| (0..n).any(|t| mark[t] && mdp.prob(s, a, t) > 0.0)) {
                mark[s] = true;
                changed = true;
            }
        }
    }
    (0..n).any(|s| mark[s] && !mdp.is_safe(s))
}

#[test]
fn generated_documents_validate_and_mostly_reach_safety() {
    let mut reachable = 0;
    for seed in 0..1000u64 {
        let fam = family(seed);
        let emdp = random_family(seed, &fam).unwrap();
        assert!(validate(&emdp.base).is_valid(), "seed {seed}");
        assert_eq!(emdp.base.safe().len(), fam.n_safe());
        assert!(emdp.embedding.iter().flatten().all(|x| (0.0..=1.0).contains(x)));
        reachable += usize::from(safe_reachable(&emdp.base));
    }
    assert!(reachable >= 950, "safe set reachable in only {reachable}/1000 draws");
}

#[test]
fn same_seed_gives_identical_bytes() {
    for seed in [0, 7, 123_456] {
        let fam = family(seed);
        let a = serde_json::to_string(&random_document(seed, &fam).unwrap()).unwrap();
        let b = serde_json::to_string(&random_document(seed, &fam).unwrap()).unwrap();
        assert_eq!(a, b);
        let doc = random_document(seed, &fam).unwrap();
        let generator = doc.generator.clone().unwrap();
        assert_eq!((generator.rng.as_str(), generator.seed), (RNG_NAME, seed));
        let back = EmbeddedMdp::from_document(doc).unwrap();
        assert_eq!(back, random_family(seed, &fam).unwrap());
    }
}

fn changed_rows(a: &MdpSpec, b: &MdpSpec) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for s in 0..a.n_states() {
        for act in 0..a.n_actions() {
            let same = (0..a.n_states()).all(|t| a.prob(s, act, t) == b.prob(s, act, t)) && b.prob(s, act, a.n_states()) == 0.0;
            if !same {
                out.push((s, act));
            }
        }
    }
    out
}

#[test]
fn playing_dead_changes_only_rows_into_terminal() {
    for (gamma, eps, delta) in [(0.9, 0.5, 1e-3), (0.8, 1.0, 5e-3), (0.95, 2.0, 1e-4)] {
        let params = playing_dead_fixture(gamma, eps, delta).unwrap();
        let base = &params.base;
        let mp = build_playing_dead(&params).unwrap();
        assert_eq!(mp.n_states(), base.n_states() + 1);
        let term = base.safe()[0];
        let feeding: Vec<(usize, usize)> = (0..base.n_states())
            .flat_map(|s| (0..base.n_actions()).map(move |a| (s, a)))
            .filter(|&(s, a)| s != term && base.prob(s, a, term) > 0.0)
            .collect();
        assert_eq!(changed_rows(base, &mp), feeding);
        for &(s, a) in &feeding {
            assert_eq!(mp.prob(s, a, term), 0.0);
            assert_eq!(mp.prob(s, a, 3), base.prob(s, a, term));
        }
        let pd = 3;
        assert_eq!(mp.prob(pd, params.escape_action, pd), 1.0 - delta);
        assert_eq!(mp.prob(pd, params.escape_action, params.escape_state), delta);
        assert_eq!(mp.reward(pd, params.escape_action), delta);
        assert_eq!(mp.reward(pd, 1 - params.escape_action), 0.0);
    }
}

#[test]
fn playing_dead_rejects_large_delta() {
    assert!(playing_dead_fixture(0.9, 0.5, 1e-2).is_err());
    let mut params: PlayingDeadParams = playing_dead_fixture(0.9, 0.5, 1e-3).unwrap();
    params.delta = params.delta_limit();
    assert!(build_playing_dead(&params).is_err());
}

/// Embedded base whose non-safe rows never touch the safe state.
fn never_absorbing(seed: u64, n: usize, m: usize) -> EmbeddedMdp {
    let mut r = rng(seed);
    let transition = (0..=n)
        .map(|s| {
            (0..m)
                .map(|_| {
                    let mut row = vec![0.0; n + 1];
                    if s == 0 {
                        row[0] = 1.0;
                    } else {
                        for (k, w) in random_simplex(&mut r, n).into_iter().enumerate() {
                            row[k + 1] = w;
                        }
                    }
                    row
                })
                .collect()
        })
        .collect();
    let ids = (0..=n).map(|i| format!("s{i}")).collect();
    let acts = (0..m).map(|i| format!("a{i}")).collect();
    let base = MdpSpec::new(ids, acts, transition, vec![vec![0.0; m]; n + 1], 0.9, vec![0]).unwrap();
    EmbeddedMdp::new(base, (0..=n).map(|i| vec![i as f64]).collect(), None).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn uniform_shutdown_moves_two_over_n_per_row(seed in any::<u64>(), n in 1usize..=6, m in 1usize..=3, big_n in 1.5f64..1e4) {
        let emdp = never_absorbing(seed, n, m);
        let policy = make_toy_policy(vec![vec![0.0]; m], 1.0).unwrap();
        let pert = uniform_shutdown_perturbation(&emdp, &policy, big_n).unwrap();
        let expected = 2.0 / big_n * (n * m) as f64;
        prop_assert!((pert.delta_t_norm() - expected).abs() <= 1e-12 * expected.max(1.0));
        prop_assert!((pert.size - expected).abs() <= 1e-12 * expected.max(1.0));
        let shut = build_uniform_shutdown(&emdp.base, big_n).unwrap();
        prop_assert!(validate(&shut).is_valid());
    }

    #[test]
    fn duplicates_are_bisimilar(seed in any::<u64>(), n in 2usize..=6, copies in 2usize..=3) {
        let base = random_family(seed, &RandomFamily::new(n, 2, 1)).unwrap().base;
        let state = (seed % n as u64) as usize;
        let dup = build_duplicated(&base, state, copies).unwrap();
        prop_assert!(validate(&dup).is_valid());
        prop_assert_eq!(dup.n_states(), n + copies - 1);
        prop_assert_eq!(dup.is_safe(n), base.is_safe(state));
        let config = BisimConfig::for_discount(0.9);
        let metric = bisim_metric(&dup, &config).unwrap();
        for k in n..n + copies - 1 {
            prop_assert!(metric.dist[state][k] <= config.tol);
            prop_assert_eq!(&dup.state_ids()[k], &format!("{}#{}", base.state_ids()[state], k - n + 1));
        }
        for s in 0..n {
            for a in 0..2 {
                let mass: f64 = std::iter::once(state).chain(n..n + copies - 1).map(|t| dup.prob(s, a, t)).sum();
                prop_assert!((mass - base.prob(s, a, state)).abs() <= 1e-15);
            }
        }
    }
}

#[test]
fn uniform_shutdown_converges_to_the_base() {
    let emdp = never_absorbing(3, 4, 2);
    let policy = make_toy_policy(vec![vec![0.0]; 2], 1.0).unwrap();
    let mut last = f64::INFINITY;
    for big_n in [10.0, 100.0, 1e3, 1e6] {
        let size = uniform_shutdown_perturbation(&emdp, &policy, big_n).unwrap().delta_t_norm();
        assert!(size < last);
        last = size;
    }
    assert!(last < 1e-4);
    assert!(build_uniform_shutdown(&emdp.base, 1.0).is_err());
}

#[test]
fn duplicating_requires_two_copies() {
    let base = random_family(1, &RandomFamily::new(4, 2, 1)).unwrap().base;
    assert!(build_duplicated(&base, 0, 1).is_err());
    assert!(build_duplicated(&base, 9, 2).is_err());
}
