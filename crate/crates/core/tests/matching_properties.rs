//! Property suites for team formation against the brute-force stable set.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use teamform_core::harness::check::{oom_fixture, random_instance, som_instability_fixture};
use teamform_core::matching::{
    balance_capacities, enumerate_stable_matchings, find_blocking_pairs, form_teams, oom_match,
    som_match, MatchAlgorithm, PreferenceMatrix,
};

fn sizes() -> impl Strategy<Value = (usize, usize)> {
    (1usize..=3).prop_flat_map(|l| (Just(l), l.max(2)..=7))
}

fn instance(l: usize, f: usize, seed: u64) -> PreferenceMatrix {
    random_instance(&mut ChaCha8Rng::seed_from_u64(seed), l, f).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn oom_is_stable_and_in_the_stable_set((l, f) in sizes(), seed in any::<u64>()) {
        let prefs = instance(l, f, seed);
        let plan = balance_capacities(l, f).unwrap();
        let g = oom_match(&prefs, &plan).unwrap();
        g.validate(&prefs, &plan).unwrap();
        prop_assert!(find_blocking_pairs(&g, &prefs, &plan).is_empty());
        prop_assert!(enumerate_stable_matchings(&prefs, &plan).unwrap().contains(&g));
    }

    #[test]
    fn som_places_every_follower((l, f) in sizes(), seed in any::<u64>()) {
        let prefs = instance(l, f, seed);
        let plan = balance_capacities(l, f).unwrap();
        let g = som_match(&prefs, &plan).unwrap();
        g.validate(&prefs, &plan).unwrap();
        prop_assert_eq!(g.members().len(), l + f);
    }

    #[test]
    fn oom_depends_on_rankings_only((l, f) in sizes(), seed in any::<u64>(), shift in -5.0f64..5.0) {
        let prefs = instance(l, f, seed);
        let plan = balance_capacities(l, f).unwrap();
        let base = oom_match(&prefs, &plan).unwrap();
        let cubed = prefs.map(|x| (x + shift).powi(3)).unwrap();
        prop_assert_eq!(oom_match(&cubed, &plan).unwrap(), base.clone());
        let logged = prefs.map(|x| (x + 1e-3).ln()).unwrap();
        prop_assert_eq!(oom_match(&logged, &plan).unwrap(), base);
    }

    #[test]
    fn som_is_affine_invariant(
        (l, f) in sizes(),
        seed in any::<u64>(),
        a in 0.01f64..100.0,
        b in -10.0f64..10.0,
    ) {
        let prefs = instance(l, f, seed);
        let plan = balance_capacities(l, f).unwrap();
        let mapped = prefs.map(|x| a * x + b).unwrap();
        prop_assert_eq!(som_match(&mapped, &plan).unwrap(), som_match(&prefs, &plan).unwrap());
    }

    #[test]
    fn capacities_are_balanced(l in 1usize..=6, extra in 0usize..=12) {
        let f = l + extra;
        let plan = balance_capacities(l, f).unwrap();
        prop_assert_eq!(plan.total(), f);
        let hi = *plan.capacities().iter().max().unwrap();
        let lo = *plan.capacities().iter().min().unwrap();
        prop_assert!(hi - lo <= 1);
    }

    #[test]
    fn blocking_pairs_agree_with_the_stable_set((l, f) in sizes(), seed in any::<u64>()) {
        let prefs = instance(l, f, seed);
        let plan = balance_capacities(l, f).unwrap();
        let som = som_match(&prefs, &plan).unwrap();
        let stable = enumerate_stable_matchings(&prefs, &plan).unwrap();
        prop_assert_eq!(find_blocking_pairs(&som, &prefs, &plan).is_empty(), stable.contains(&som));
    }
}

#[test]
fn committed_fixture_file_matches_the_builtin_fixture() {
    let text = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/fixtures/ordering.json"
    ))
    .unwrap();
    let prefs = PreferenceMatrix::from_json(&text).unwrap();
    assert_eq!(prefs, oom_fixture());
    let g = form_teams(&prefs, MatchAlgorithm::Oom).unwrap();
    assert_eq!(g.team(0).unwrap().followers, vec![3, 4]);
    assert_eq!(g.team(1).unwrap().followers, vec![2]);
}

#[test]
fn som_fixture_is_blocked_and_oom_is_not() {
    let prefs = som_instability_fixture();
    let plan = balance_capacities(2, 2).unwrap();
    let som = som_match(&prefs, &plan).unwrap();
    assert!(!find_blocking_pairs(&som, &prefs, &plan).is_empty());
    let oom = oom_match(&prefs, &plan).unwrap();
    assert!(find_blocking_pairs(&oom, &prefs, &plan).is_empty());
}

#[test]
fn survivor_restriction_keeps_original_indices() {
    let prefs = oom_fixture();
    let kept = prefs.restrict(&[0, 1, 3, 4]).unwrap();
    assert_eq!(kept.agents(), 4);
    assert_eq!(kept.leaders(), 2);
    assert_eq!(kept.score(0, 2), prefs.score(0, 3));
    let plan = balance_capacities(2, 2).unwrap();
    let g = oom_match(&kept, &plan).unwrap().remap(&[0, 1, 3, 4]);
    assert_eq!(g.members(), vec![0, 1, 3, 4]);
}
