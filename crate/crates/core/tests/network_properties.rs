//! Structural properties of the utility and mixing networks, and
//! finite-difference checks of each block in isolation.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use teamform_core::attention::{
    sample_complementary_masks, EntityMatrix, EntityRole, Mask, MultiHeadAttention,
};
use teamform_core::diffcore::{grad_check, grad_check_params, Graph, ParameterStore, Tensor, Var};
use teamform_core::harness::check::{greedy_consistency, monotonicity_sweep, small_model_config};
use teamform_core::nets::{mix_forward, Branches, GroupLayout, Model, UtilityMasks};

const TOLERANCE: f64 = 1e-4;

fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn random_mask(rng: &mut impl Rng, rows: usize, cols: usize) -> Mask {
    let mut m = Mask::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m.set(i, j, i == j || rng.gen_bool(0.6));
        }
    }
    m
}

fn roles(leaders: usize, followers: usize, others: usize) -> Vec<EntityRole> {
    let mut r = vec![EntityRole::Leader; leaders];
    r.extend(vec![EntityRole::Follower; followers]);
    r.extend(vec![EntityRole::NonAgent; others]);
    r
}

fn one_hot(rng: &mut impl Rng, rows: usize, width: usize) -> Tensor {
    let mut t = Tensor::zeros(&[rows, width]);
    for r in 0..rows {
        let k = rng.gen_range(0..width);
        t.data_mut()[r * width + k] = 1.0;
    }
    t
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&p| t.row_slice(p).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

fn permute_mask(m: &Mask, row_perm: &[usize], col_perm: &[usize]) -> Mask {
    Mask::from_fn(m.rows(), m.cols(), |i, j| m.get(row_perm[i], col_perm[j]))
}

/// Weighted sum of every entry, so no output direction is degenerate.
fn probe(g: &mut Graph, x: Var, rng: &mut impl Rng) -> Var {
    let shape = g.value(x).shape().to_vec();
    let w = g.constant(random_tensor(rng, shape[0], shape[1]));
    let y = g.mul(x, w).unwrap();
    g.sum(y).unwrap()
}

/// A random role-respecting permutation of `leaders + followers + others`
/// entities: leaders, followers and non-agents are shuffled within their
/// own blocks.
fn block_permutation(
    rng: &mut impl Rng,
    leaders: usize,
    followers: usize,
    others: usize,
) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut perm = Vec::new();
    let mut start = 0;
    for n in [leaders, followers, others] {
        let mut block: Vec<usize> = (start..start + n).collect();
        block.shuffle(rng);
        perm.extend(block);
        start += n;
    }
    perm
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn utilities_are_permutation_equivariant(
        seed in any::<u64>(),
        leaders in 1usize..=2,
        followers in 2usize..=4,
        others in 0usize..=3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (model, store) = Model::new(small_model_config(), &mut rng).unwrap();
        let cfg = model.config;
        let agents = leaders + followers;
        let n = agents + others;
        let entities = EntityMatrix::new(random_tensor(&mut rng, n, cfg.feature_dim), roles(leaders, followers, others)).unwrap();
        let obs = random_mask(&mut rng, agents, n);
        let split = sample_complementary_masks(&obs, &mut rng).unwrap();
        let out_mask = split.out_mask.with_diagonal();
        let hidden = random_tensor(&mut rng, agents, cfg.hidden);
        let groups = one_hot(&mut rng, agents, cfg.group_slots);
        let perm = block_permutation(&mut rng, leaders, followers, others);
        let agent_perm = &perm[..agents];

        let run = |x: Tensor, obs: &Mask, m_in: &Mask, m_out: &Mask, h: Tensor, grp: Tensor| {
            let mut g = Graph::frozen();
            let x = g.constant(x);
            let h = g.constant(h);
            let grp = g.constant(grp);
            let out = model.utility.forward(
                &mut g, &store, x, agents,
                UtilityMasks { observability: obs, counterfactual: Some((m_in, m_out)) },
                h, grp,
                Branches { counterfactual: true, preferences: true },
            ).unwrap();
            (
                g.value(out.q).clone(),
                g.value(out.q_in.unwrap()).clone(),
                g.value(out.embeddings).clone(),
                out.preferences.unwrap(),
            )
        };
        let base = run(entities.augmented(), &obs, &split.in_mask, &out_mask, hidden.clone(), groups.clone());
        let moved = run(
            permute_rows(&entities.augmented(), &perm),
            &permute_mask(&obs, agent_perm, &perm),
            &permute_mask(&split.in_mask, agent_perm, &perm),
            &permute_mask(&out_mask, agent_perm, &perm),
            permute_rows(&hidden, agent_perm),
            permute_rows(&groups, agent_perm),
        );
        prop_assert!(permute_rows(&base.0, agent_perm).max_abs_diff(&moved.0) < 1e-10);
        prop_assert!(permute_rows(&base.1, agent_perm).max_abs_diff(&moved.1) < 1e-10);
        prop_assert!(permute_rows(&base.2, agent_perm).max_abs_diff(&moved.2) < 1e-10);
        for i in 0..agents {
            for j in 0..agents {
                let a = base.3[agent_perm[i] * agents + agent_perm[j]];
                prop_assert!((a - moved.3[i * agents + j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn group_tag_only_moves_its_own_agent(seed in any::<u64>(), agents in 2usize..=5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (model, store) = Model::new(small_model_config(), &mut rng).unwrap();
        let cfg = model.config;
        let n = agents + 2;
        let x = EntityMatrix::new(random_tensor(&mut rng, n, cfg.feature_dim), roles(1, agents - 1, 2)).unwrap().augmented();
        let obs = random_mask(&mut rng, agents, n);
        let groups = one_hot(&mut rng, agents, cfg.group_slots);
        let changed_agent = rng.gen_range(0..agents);
        let mut changed = groups.clone();
        let w = cfg.group_slots;
        let row = changed_agent * w;
        let old = (0..w).position(|k| groups.data()[row + k] == 1.0).unwrap();
        changed.data_mut()[row + old] = 0.0;
        changed.data_mut()[row + (old + 1) % w] = 1.0;

        let q = |grp: &Tensor| {
            let mut g = Graph::frozen();
            let xv = g.constant(x.clone());
            let h = g.constant(model.initial_hidden(agents));
            let gv = g.constant(grp.clone());
            let out = model.utility.forward(
                &mut g, &store, xv, agents,
                UtilityMasks { observability: &obs, counterfactual: None },
                h, gv, Branches::default(),
            ).unwrap();
            g.value(out.q).clone()
        };
        let (a, b) = (q(&groups), q(&changed));
        for r in 0..agents {
            if r == changed_agent {
                prop_assert!(a.row_slice(r) != b.row_slice(r));
            } else {
                prop_assert_eq!(a.row_slice(r), b.row_slice(r));
            }
        }
    }

    #[test]
    fn mixers_are_monotone(seed in any::<u64>()) {
        let sweep = monotonicity_sweep(5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(sweep.passed(), "{:?}", sweep);
    }
}

#[test]
fn greedy_actions_maximise_the_mixed_value() {
    let report = greedy_consistency(2, &mut ChaCha8Rng::seed_from_u64(41)).unwrap();
    assert_eq!(report.failures, 0);
}

#[test]
fn attention_gradients_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let mut store = ParameterStore::new();
        let mha = MultiHeadAttention::register(&mut store, "mha", 6, 2, &mut rng).unwrap();
        let (q_rows, e_rows) = (3, 5);
        let queries = random_tensor(&mut rng, q_rows, 6);
        let entities = random_tensor(&mut rng, e_rows, 6);
        let mask = random_mask(&mut rng, q_rows, e_rows);
        let weights = random_tensor(&mut rng, q_rows, 6);
        let f = |g: &mut Graph, s: &ParameterStore, q: Var, e: Var| {
            let out = mha.forward(g, s, q, e, &mask)?.output;
            let w = g.constant(weights.clone());
            let y = g.mul(out, w)?;
            g.sum(y)
        };
        let by_param = grad_check_params(
            &store,
            |g, s| {
                let q = g.constant(queries.clone());
                let e = g.constant(entities.clone());
                f(g, s, q, e)
            },
            1e-6,
            TOLERANCE,
            None,
            &mut rng,
        )
        .unwrap();
        assert!(by_param.passed(), "{by_param:?}");
        let by_input = grad_check(
            |g, v| {
                let mut frozen = store.clone();
                frozen.zero_grads();
                f(g, &frozen, v[0], v[1])
            },
            &[queries.clone(), entities.clone()],
            1e-6,
            TOLERANCE,
        )
        .unwrap();
        assert!(by_input.passed(), "{by_input:?}");
    }
}

#[test]
fn utility_gradients_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..4 {
        let (model, store) = Model::new(small_model_config(), &mut rng).unwrap();
        let cfg = model.config;
        let (agents, n) = (3, 5);
        let x = EntityMatrix::new(random_tensor(&mut rng, n, cfg.feature_dim), roles(1, 2, 2))
            .unwrap()
            .augmented();
        let obs = random_mask(&mut rng, agents, n);
        let split = sample_complementary_masks(&obs, &mut rng).unwrap();
        let out_mask = split.out_mask.with_diagonal();
        let hidden = random_tensor(&mut rng, agents, cfg.hidden);
        let groups = one_hot(&mut rng, agents, cfg.group_slots);
        let probe_seed: u64 = rng.gen();
        let report = grad_check_params(
            &store,
            |g, s| {
                let mut weights = ChaCha8Rng::seed_from_u64(probe_seed);
                let xv = g.constant(x.clone());
                let h = g.constant(hidden.clone());
                let grp = g.constant(groups.clone());
                let out = model.utility.forward(
                    g,
                    s,
                    xv,
                    agents,
                    UtilityMasks {
                        observability: &obs,
                        counterfactual: Some((&split.in_mask, &out_mask)),
                    },
                    h,
                    grp,
                    Branches {
                        counterfactual: true,
                        preferences: false,
                    },
                )?;
                let terms = [
                    probe(g, out.q, &mut weights),
                    probe(g, out.q_in.unwrap(), &mut weights),
                    probe(g, out.q_out.unwrap(), &mut weights),
                    probe(g, out.embeddings, &mut weights),
                    probe(g, out.hidden, &mut weights),
                ];
                let stacked = g.concat_rows(&terms)?;
                g.sum(stacked)
            },
            1e-6,
            TOLERANCE,
            Some(4),
            &mut rng,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}

#[test]
fn hypernetwork_and_mixer_gradients_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..4 {
        let (model, store) = Model::new(small_model_config(), &mut rng).unwrap();
        let cfg = model.config;
        let (agents, n) = (4, 6);
        let state = random_tensor(&mut rng, n, cfg.feature_dim);
        let emb = random_tensor(&mut rng, agents, cfg.embed);
        let layout = GroupLayout::new(vec![vec![0, 2], vec![1, 3]], agents).unwrap();
        let split = sample_complementary_masks(&Mask::ones(agents, n), &mut rng).unwrap();
        let utilities = random_tensor(&mut rng, 1, agents);
        let aux_utilities = random_tensor(&mut rng, 1, 2 * agents);
        let report = grad_check_params(
            &store,
            |g, s| {
                let sv = g.constant(state.clone());
                let ev = g.constant(emb.clone());
                let ev = g.row_normalize(ev)?;
                let out = model
                    .hyper
                    .forward(g, s, sv, agents, ev, &layout, Some(&split))?;
                let q = g.constant(utilities.clone());
                let main = mix_forward(g, q, &out.main)?;
                let qa = g.constant(aux_utilities.clone());
                let aux = mix_forward(g, qa, &out.aux.unwrap())?;
                let both = g.concat_cols(&[main, aux])?;
                let sq = g.square(both)?;
                g.sum(sq)
            },
            1e-6,
            TOLERANCE,
            Some(4),
            &mut rng,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
