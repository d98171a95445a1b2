//! Self-check sweeps: matching stability and invariances, mixing
//! monotonicity and greedy consistency, mask complementarity and finite
//! difference checks of every loss term.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{sample_complementary_masks, Mask};
use crate::diffcore::gradcheck::DEFAULT_STEP;
use crate::diffcore::{grad_check_selected, Graph, ParameterStore, Tensor};
use crate::env::{WorldConfig, ACTION_COUNT, FEATURE_DIM};
use crate::error::Result;
use crate::losses::{argmax, squared_error_sum};
use crate::matching::{
    balance_capacities, enumerate_stable_matchings, find_blocking_pairs, oom_match, som_match,
    MatchAlgorithm, PreferenceMatrix,
};
use crate::nets::{mix_forward, GroupLayout, MixingWeights, Model, ModelConfig};
use crate::training::{online_pass, run_episode, Episode, EpisodeOptions, Policy};

/// Tolerance for finite-difference agreement.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
/// Smallest accepted partial derivative of the mixed value.
pub const MONOTONICITY_FLOOR: f64 = -1e-12;

/// Preferences for the ordering fixture: agents 0 and 1 lead, 2..=4
/// follow. Leader 0 ranks 2≻3≻4, leader 1 ranks 2≻4≻3, follower 2 prefers
/// leader 1 and followers 3 and 4 prefer leader 0.
pub fn oom_fixture() -> PreferenceMatrix {
    PreferenceMatrix::from_rows(
        &[
            vec![0.0, 0.0, 0.9, 0.5, 0.1],
            vec![0.0, 0.0, 0.9, 0.1, 0.5],
            vec![0.2, 0.8, 0.0, 0.0, 0.0],
            vec![0.8, 0.2, 0.0, 0.0, 0.0],
            vec![0.8, 0.2, 0.0, 0.0, 0.0],
        ],
        2,
    )
    .expect("valid fixture")
}

/// Two leaders, two followers where the greedy mutual-score matcher leaves
/// leader 0 and follower 3 as a blocking pair.
pub fn som_instability_fixture() -> PreferenceMatrix {
    PreferenceMatrix::from_rows(
        &[
            vec![0.0, 0.0, 0.45, 0.5],
            vec![0.0, 0.0, 0.4, 0.05],
            vec![0.45, 0.4, 0.0, 0.0],
            vec![0.45, 0.05, 0.0, 0.0],
        ],
        2,
    )
    .expect("valid fixture")
}

/// Uniform scores in [0, 1) with a zero diagonal.
pub fn random_instance(
    rng: &mut impl Rng,
    leaders: usize,
    followers: usize,
) -> Result<PreferenceMatrix> {
    let n = leaders + followers;
    let scores = (0..n * n)
        .map(|i| {
            if i / n == i % n {
                0.0
            } else {
                rng.gen::<f64>()
            }
        })
        .collect();
    PreferenceMatrix::new(n, leaders, scores)
}

/// Draws |L| ∈ {1,2,3} and |F| ∈ {max(|L|,2)..=7}.
fn random_sizes(rng: &mut impl Rng) -> (usize, usize) {
    let l = rng.gen_range(1..=3);
    let f = rng.gen_range(l.max(2)..=7);
    (l, f)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StabilitySweep {
    pub instances: usize,
    /// OOM results with at least one blocking pair.
    pub oom_unstable: usize,
    /// OOM results missing from the brute-force stable set.
    pub oom_outside_stable_set: usize,
    /// SOM results with at least one blocking pair.
    pub som_unstable: usize,
    pub som_blocking_pairs: usize,
}

impl StabilitySweep {
    pub fn oom_ok(&self) -> bool {
        self.oom_unstable == 0 && self.oom_outside_stable_set == 0
    }

    pub fn som_blocking_rate(&self) -> f64 {
        self.som_unstable as f64 / self.instances.max(1) as f64
    }
}

/// Runs both matchers on `n` random instances and audits stability against
/// the brute-force oracle.
pub fn stability_sweep(n: usize, rng: &mut impl Rng) -> Result<StabilitySweep> {
    let mut s = StabilitySweep {
        instances: n,
        ..StabilitySweep::default()
    };
    for _ in 0..n {
        let (l, f) = random_sizes(rng);
        let prefs = random_instance(rng, l, f)?;
        let plan = balance_capacities(l, f)?;
        let oom = oom_match(&prefs, &plan)?;
        if !find_blocking_pairs(&oom, &prefs, &plan).is_empty() {
            s.oom_unstable += 1;
        }
        if !enumerate_stable_matchings(&prefs, &plan)?.contains(&oom) {
            s.oom_outside_stable_set += 1;
        }
        let som = som_match(&prefs, &plan)?;
        let pairs = find_blocking_pairs(&som, &prefs, &plan).len();
        s.som_blocking_pairs += pairs;
        s.som_unstable += usize::from(pairs > 0);
    }
    Ok(s)
}

/// Counts instances where OOM changes under the strictly increasing maps
/// `exp` and `2x + 7`.
pub fn oom_order_invariance(n: usize, rng: &mut impl Rng) -> Result<usize> {
    let mut failures = 0;
    for _ in 0..n {
        let (l, f) = random_sizes(rng);
        let prefs = random_instance(rng, l, f)?;
        let plan = balance_capacities(l, f)?;
        let base = oom_match(&prefs, &plan)?;
        for mapped in [prefs.map(f64::exp)?, prefs.map(|x| 2.0 * x + 7.0)?] {
            if oom_match(&mapped, &plan)? != base {
                failures += 1;
                break;
            }
        }
    }
    Ok(failures)
}

/// Counts instances where SOM changes under a positive affine rescaling.
pub fn som_affine_invariance(n: usize, rng: &mut impl Rng) -> Result<usize> {
    let mut failures = 0;
    for _ in 0..n {
        let (l, f) = random_sizes(rng);
        let prefs = random_instance(rng, l, f)?;
        let plan = balance_capacities(l, f)?;
        let a = rng.gen_range(0.5..4.0);
        let b = rng.gen_range(-3.0..3.0);
        if som_match(&prefs.map(|x| a * x + b)?, &plan)? != som_match(&prefs, &plan)? {
            failures += 1;
        }
    }
    Ok(failures)
}

/// Counts draws violating restriction, disjointness, coverage or
/// self-membership of the in/out split.
pub fn mask_sweep(n: usize, rng: &mut impl Rng) -> Result<usize> {
    let mut failures = 0;
    for _ in 0..n {
        let agents = rng.gen_range(1..=8);
        let entities = agents + rng.gen_range(0..=6);
        let p = rng.gen_range(0.1..0.9);
        let mut obs = Mask::zeros(agents, entities);
        for i in 0..agents {
            for j in 0..entities {
                obs.set(i, j, i == j || rng.gen_bool(p));
            }
        }
        let split = sample_complementary_masks(&obs, rng)?;
        let mut ok = true;
        for i in 0..agents {
            for j in 0..entities {
                let (o, x, y) = (
                    obs.get(i, j),
                    split.in_mask.get(i, j),
                    split.out_mask.get(i, j),
                );
                ok &= !(x && y);
                ok &= (x || y) == o;
                ok &= !x || o;
                ok &= !y || o;
                if j != i && o {
                    // both views of an entity follow its single coin flip
                    ok &= x == split.in_subset[j];
                }
            }
            ok &= split.in_mask.get(i, i);
        }
        if !ok {
            failures += 1;
        }
    }
    Ok(failures)
}

fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols)
            .map(|_| rng.gen_range(-scale..scale))
            .collect(),
    )
    .expect("shape")
}

/// Random grouping of `agents` into at most four pooling groups.
fn random_layout(rng: &mut impl Rng, agents: usize) -> Result<GroupLayout> {
    let k = rng.gen_range(1..=agents.min(4));
    let mut groups = vec![Vec::new(); k];
    for a in 0..agents {
        let g = if a < k { a } else { rng.gen_range(0..k) };
        groups[g].push(a);
    }
    GroupLayout::new(groups, agents)
}

/// Mixing weights produced by the hypernetwork of `model` for a random
/// state, embeddings and grouping; the auxiliary weights are included.
fn random_mixer(
    g: &mut Graph,
    model: &Model,
    store: &ParameterStore,
    agents: usize,
    rng: &mut impl Rng,
) -> Result<(MixingWeights, MixingWeights)> {
    let entities = agents + rng.gen_range(0..=4);
    let state = g.constant(random_tensor(rng, entities, model.config.feature_dim, 1.0));
    let emb = g.constant(random_tensor(rng, agents, model.config.embed, 1.0));
    let emb = g.row_normalize(emb)?;
    let layout = random_layout(rng, agents)?;
    let obs = Mask::ones(agents, entities);
    let split = sample_complementary_masks(&obs, rng)?;
    let out = model
        .hyper
        .forward(g, store, state, agents, emb, &layout, Some(&split))?;
    let aux = out.aux.expect("auxiliary weights requested");
    Ok((out.main, aux))
}

fn fresh_model(seed: u64) -> Result<(Model, ParameterStore)> {
    Model::new(
        ModelConfig::new(FEATURE_DIM, ACTION_COUNT),
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicitySweep {
    pub instances: usize,
    /// Smallest ∂Q_tot/∂Q^a seen across main and auxiliary mixers.
    pub min_partial: f64,
}

impl MonotonicitySweep {
    pub fn passed(&self) -> bool {
        self.min_partial >= MONOTONICITY_FLOOR
    }
}

/// Gradient of the mixed value with respect to each utility for random
/// parameters, states, groupings and utilities.
pub fn monotonicity_sweep(n: usize, rng: &mut impl Rng) -> Result<MonotonicitySweep> {
    let mut min_partial = f64::INFINITY;
    let mut model_seed = rng.gen::<u64>();
    let (mut model, mut store) = fresh_model(model_seed)?;
    for i in 0..n {
        if i % 25 == 0 {
            model_seed = rng.gen();
            (model, store) = fresh_model(model_seed)?;
        }
        let agents = rng.gen_range(1..=8);
        let scale = rng.gen_range(0.1..20.0);
        let mut g = Graph::frozen();
        let (main, aux) = random_mixer(&mut g, &model, &store, agents, rng)?;
        for (w, width) in [(&main, agents), (&aux, 2 * agents)] {
            let q = g.variable(random_tensor(rng, 1, width, scale));
            let out = mix_forward(&mut g, q, w)?;
            g.backward(out)?;
            let grad = g
                .grad(q)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; width]);
            min_partial = grad.iter().copied().fold(min_partial, f64::min);
        }
    }
    Ok(MonotonicitySweep {
        instances: n,
        min_partial,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GreedyConsistency {
    pub instances: usize,
    pub failures: usize,
}

/// For every |A| ≤ 3 and |U| ≤ 4 and `draws` random mixers each, checks
/// that per-agent argmax attains the exhaustive joint maximum of Q_tot.
pub fn greedy_consistency(draws: usize, rng: &mut impl Rng) -> Result<GreedyConsistency> {
    let (model, store) = fresh_model(rng.gen())?;
    let (mut instances, mut failures) = (0, 0);
    for agents in 1..=3usize {
        for actions in 1..=4usize {
            for _ in 0..draws {
                let mut g = Graph::frozen();
                let (w, _) = random_mixer(&mut g, &model, &store, agents, rng)?;
                let q = random_tensor(rng, agents, actions, 3.0);
                let mix = |g: &mut Graph, joint: &[usize]| -> Result<f64> {
                    let row: Vec<f64> = joint
                        .iter()
                        .enumerate()
                        .map(|(a, &u)| q.get(a, u))
                        .collect();
                    let v = g.constant(Tensor::row(&row));
                    let out = mix_forward(g, v, &w)?;
                    Ok(g.value(out).item())
                };
                let greedy: Vec<usize> = (0..agents).map(|a| argmax(q.row_slice(a))).collect();
                let greedy_value = mix(&mut g, &greedy)?;
                let mut best = f64::NEG_INFINITY;
                let mut joint = vec![0usize; agents];
                for code in 0..actions.pow(agents as u32) {
                    let mut c = code;
                    for slot in joint.iter_mut() {
                        *slot = c % actions;
                        c /= actions;
                    }
                    best = best.max(mix(&mut g, &joint)?);
                }
                instances += 1;
                if greedy_value < best - 1e-12 * best.abs().max(1.0) {
                    failures += 1;
                }
            }
        }
    }
    Ok(GreedyConsistency {
        instances,
        failures,
    })
}

/// A compact model for finite-difference checks.
pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        hidden: 8,
        heads: 2,
        embed: 4,
        hyper_hidden: 4,
        mix_hidden: 4,
        ..ModelConfig::new(FEATURE_DIM, ACTION_COUNT)
    }
}

/// A short random-policy episode on a small board.
pub fn small_episode(model: &Model, store: &ParameterStore, rng: &mut impl Rng) -> Result<Episode> {
    let world = WorldConfig {
        horizon: 3,
        grid: 5,
        max_agents: 4,
        ..WorldConfig::default()
    };
    let options = EpisodeOptions {
        policy: Policy::Random,
        algorithm: MatchAlgorithm::Oom,
        rematch_interval: 0,
        agents: None,
    };
    run_episode(model, store, &world, &options, 0, rng, None)
}

const ENCODER_PREFIX: &str = "utility.encoder";

/// Which loss term a finite-difference check targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LossTerm {
    /// Squared TD error of the mixed value.
    Main,
    /// Squared TD error of the in/out mixed value.
    Auxiliary,
    /// Similarity-diversity embedding loss.
    SimilarityDiversity,
}

impl LossTerm {
    pub const ALL: [LossTerm; 3] = [
        LossTerm::Main,
        LossTerm::Auxiliary,
        LossTerm::SimilarityDiversity,
    ];

    /// Parameters this term trains; the embedding objective reaches the
    /// encoder only.
    pub fn trains(self, param: &str) -> bool {
        match self {
            LossTerm::SimilarityDiversity => param.starts_with(ENCODER_PREFIX),
            _ => true,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Main => "l_q",
            LossTerm::Auxiliary => "l_aux",
            LossTerm::SimilarityDiversity => "l_sd",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientSweep {
    pub instances: usize,
    /// Worst relative error per loss term.
    pub worst: Vec<(LossTerm, f64)>,
}

impl GradientSweep {
    pub fn passed(&self) -> bool {
        self.worst.iter().all(|(_, e)| *e < GRADIENT_TOLERANCE)
    }
}

/// Central differences against reverse-mode gradients of every loss term
/// over `instances` random small models and episodes. Up to
/// `coords_per_param` coordinates of each parameter are probed.
pub fn loss_gradient_sweep(
    instances: usize,
    coords_per_param: usize,
    rng: &mut impl Rng,
) -> Result<GradientSweep> {
    let mut worst: Vec<(LossTerm, f64)> = LossTerm::ALL.iter().map(|&t| (t, 0.0)).collect();
    for _ in 0..instances {
        let (model, store) = Model::new(
            small_model_config(),
            &mut ChaCha8Rng::seed_from_u64(rng.gen()),
        )?;
        let ep = small_episode(&model, &store, rng)?;
        let targets: Vec<f64> = (0..ep.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mask_seed: u64 = rng.gen();
        for (term, err) in worst.iter_mut() {
            let term = *term;
            let f = |g: &mut Graph, s: &ParameterStore| {
                let mut masks = ChaCha8Rng::seed_from_u64(mask_seed);
                let pass = online_pass(g, &model, s, &ep, &mut masks)?;
                match term {
                    LossTerm::Main => squared_error_sum(g, pass.q_tot, &targets),
                    LossTerm::Auxiliary => squared_error_sum(g, pass.q_aux, &targets),
                    LossTerm::SimilarityDiversity => Ok(pass.sd),
                }
            };
            let report = grad_check_selected(
                &store,
                f,
                DEFAULT_STEP,
                GRADIENT_TOLERANCE,
                Some(coords_per_param),
                |name| term.trains(name),
                rng,
            )?;
            *err = err.max(report.max_error());
        }
    }
    Ok(GradientSweep { instances, worst })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CheckSuite {
    pub results: Vec<CheckResult>,
}

impl CheckSuite {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn pass_count(&self) -> usize {
        self.results.iter().filter(|r| r.passed).count()
    }

    fn push(&mut self, name: &'static str, passed: bool, detail: String) {
        self.results.push(CheckResult {
            name,
            passed,
            detail,
        });
    }
}

/// Every sweep with its full instance count, seeded from `seed`.
pub fn run_all(seed: u64) -> Result<CheckSuite> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut suite = CheckSuite::default();

    let s = stability_sweep(1000, &mut rng)?;
    suite.push(
        "oom stability",
        s.oom_ok(),
        format!(
            "{} instances, {} unstable, {} outside the stable set",
            s.instances, s.oom_unstable, s.oom_outside_stable_set
        ),
    );
    suite.push(
        "som instability rate",
        s.som_unstable > 0,
        format!(
            "{} of {} instances admit a blocking pair",
            s.som_unstable, s.instances
        ),
    );

    let fixture = som_instability_fixture();
    let plan = balance_capacities(2, 2)?;
    let pairs = find_blocking_pairs(&som_match(&fixture, &plan)?, &fixture, &plan);
    suite.push(
        "som instability fixture",
        !pairs.is_empty(),
        format!("blocking pairs {pairs:?}"),
    );

    let failures = oom_order_invariance(500, &mut rng)?;
    suite.push(
        "oom order invariance",
        failures == 0,
        format!("{failures} of 500 changed"),
    );
    let failures = som_affine_invariance(500, &mut rng)?;
    suite.push(
        "som affine invariance",
        failures == 0,
        format!("{failures} of 500 changed"),
    );

    let grads = loss_gradient_sweep(20, 3, &mut rng)?;
    let detail = grads
        .worst
        .iter()
        .map(|(t, e)| format!("{} {e:.2e}", t.name()))
        .collect::<Vec<_>>()
        .join(", ");
    suite.push("loss gradients", grads.passed(), detail);

    let mono = monotonicity_sweep(1000, &mut rng)?;
    suite.push(
        "mixing monotonicity",
        mono.passed(),
        format!(
            "min partial {:.3e} over {} instances",
            mono.min_partial, mono.instances
        ),
    );

    let greedy = greedy_consistency(10, &mut rng)?;
    suite.push(
        "greedy consistency",
        greedy.failures == 0,
        format!(
            "{} of {} instances disagree",
            greedy.failures, greedy.instances
        ),
    );

    let failures = mask_sweep(1000, &mut rng)?;
    suite.push(
        "mask complementarity",
        failures == 0,
        format!("{failures} of 1000 violated"),
    );
    Ok(suite)
}
