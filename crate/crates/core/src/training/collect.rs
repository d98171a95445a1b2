use rand::seq::SliceRandom;
use rand::Rng;

use super::replay::{Episode, Transition};
use crate::diffcore::{Graph, ParameterStore, Tensor};
use crate::env::trace::TraceRecord;
use crate::env::{Action, Observation, World, WorldConfig, ACTION_COUNT};
use crate::error::Result;
use crate::losses::argmax;
use crate::matching::{
    balance_capacities, find_blocking_pairs, Grouping, MatchAlgorithm, PreferenceMatrix,
};
use crate::nets::Branches;
use crate::nets::{group_one_hot, team_labels, Model, UtilityMasks};

/// How agents pick actions from their utilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Policy {
    Greedy,
    EpsilonGreedy(f64),
    /// Uniform over actions, ignoring the network.
    Random,
}

/// Teams formed over the surviving agents, with the number of blocking
/// pairs the result admits.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchEvent {
    pub grouping: Grouping,
    pub blocking_pairs: usize,
}

/// Forms teams among the alive agents of `obs` from attention preferences.
/// With no alive leader every survivor stays unassigned.
pub fn match_survivors(
    model: &Model,
    store: &ParameterStore,
    obs: &Observation,
    algorithm: MatchAlgorithm,
) -> Result<MatchEvent> {
    let agents = obs.alive.len();
    let leaders = obs.entities.leader_count();
    let survivors: Vec<usize> = (0..agents).filter(|&a| obs.alive[a]).collect();
    if !survivors.iter().any(|&a| a < leaders) {
        return Ok(MatchEvent {
            grouping: Grouping::default(),
            blocking_pairs: 0,
        });
    }
    let mut g = Graph::frozen();
    let x = g.constant(obs.entities.augmented());
    let scores = model.utility.preferences(&mut g, store, x, agents)?;
    let prefs = PreferenceMatrix::for_survivors(agents, leaders, scores)?.restrict(&survivors)?;
    let plan = balance_capacities(prefs.leaders(), prefs.followers())?;
    let local = algorithm.run(&prefs, &plan)?;
    let blocking_pairs = find_blocking_pairs(&local, &prefs, &plan).len();
    Ok(MatchEvent {
        grouping: local.remap(&survivors),
        blocking_pairs,
    })
}

/// Knobs for [`run_episode`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeOptions {
    pub policy: Policy,
    pub algorithm: MatchAlgorithm,
    /// Steps between scheduled re-matches; 0 disables them.
    pub rematch_interval: usize,
    /// Fixed population; `None` draws from the configured range.
    pub agents: Option<usize>,
}

/// Plays one episode. Teams are formed at the start and again at the first
/// step after any elimination. When `trace` is given, the header and every
/// step are appended to it.
pub fn run_episode(
    model: &Model,
    store: &ParameterStore,
    config: &WorldConfig,
    options: &EpisodeOptions,
    id: u64,
    rng: &mut impl Rng,
    mut trace: Option<&mut Vec<TraceRecord>>,
) -> Result<Episode> {
    let mut world = match options.agents {
        Some(n) => World::reset_with_agents(config, n, rng)?,
        None => World::reset(config, rng)?,
    };
    let agents = world.agent_count();
    let mut group_slots: Vec<usize> = (0..model.config.group_slots).collect();
    group_slots.shuffle(rng);
    if let Some(t) = trace.as_deref_mut() {
        t.push(TraceRecord::header(&world));
    }

    let mut hidden = model.initial_hidden(agents);
    let mut transitions = Vec::with_capacity(config.horizon);
    let (mut matchings, mut unstable) = (0, 0);
    let mut need_match = true;
    while !world.is_done() {
        let obs = world.observe();
        let scheduled = options.rematch_interval > 0
            && world.timestep() > 0
            && world.timestep() % options.rematch_interval == 0;
        if need_match || scheduled {
            let event = match_survivors(model, store, &obs, options.algorithm)?;
            matchings += 1;
            unstable += usize::from(event.blocking_pairs > 0);
            world.set_grouping(event.grouping);
        }
        let grouping = world.grouping().clone();

        let actions = if options.policy == Policy::Random {
            select_actions(
                &Tensor::zeros(&[agents, ACTION_COUNT]),
                &obs.alive,
                options.policy,
                rng,
            )
        } else {
            let mut g = Graph::frozen();
            let x = g.constant(obs.entities.augmented());
            let h = g.constant(hidden);
            let labels = team_labels(&grouping, &obs.alive);
            let onehot = g.constant(group_one_hot(&labels, &group_slots)?);
            let out = model.utility.forward(
                &mut g,
                store,
                x,
                agents,
                UtilityMasks {
                    observability: &obs.observability,
                    counterfactual: None,
                },
                h,
                onehot,
                Branches::default(),
            )?;
            hidden = g.value(out.hidden).clone();
            let q = g.value(out.q);
            select_actions(q, &obs.alive, options.policy, rng)
        };

        let acts: Vec<Action> = actions
            .iter()
            .map(|&i| Action::from_index(i))
            .collect::<Result<_>>()?;
        let alive_before = obs.alive.clone();
        let step = world.step(&acts)?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(TraceRecord::step(&world, &acts, step.reward, &grouping));
        }
        need_match = step.observation.alive != alive_before;
        transitions.push(Transition {
            episode: id,
            step: transitions.len(),
            observation: obs,
            next_observation: step.observation,
            grouping,
            actions,
            reward: step.reward,
            terminal: step.terminal,
        });
    }
    Ok(Episode {
        id,
        group_slots,
        transitions,
        captured: world.captured(),
        matchings,
        unstable_matchings: unstable,
    })
}

/// Action per agent. Dead agents always stay; exploration draws happen for
/// alive agents only, in index order.
pub fn select_actions(
    q: &Tensor,
    alive: &[bool],
    policy: Policy,
    rng: &mut impl Rng,
) -> Vec<usize> {
    (0..alive.len())
        .map(|a| {
            if !alive[a] {
                return Action::Stay.index();
            }
            let explore = match policy {
                Policy::Greedy => false,
                Policy::Random => true,
                Policy::EpsilonGreedy(eps) => rng.gen::<f64>() < eps,
            };
            if explore {
                rng.gen_range(0..ACTION_COUNT)
            } else {
                argmax(q.row_slice(a))
            }
        })
        .collect()
}

/// Aggregate outcome of a set of episodes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeStats {
    pub returns: Vec<f64>,
    pub captured: Vec<usize>,
    pub targets: usize,
    pub matchings: usize,
    pub unstable_matchings: usize,
}

impl EpisodeStats {
    pub fn push(&mut self, ep: &Episode) {
        self.returns.push(ep.total_reward());
        self.captured.push(ep.captured);
        self.matchings += ep.matchings;
        self.unstable_matchings += ep.unstable_matchings;
    }

    pub fn mean_return(&self) -> f64 {
        mean(&self.returns)
    }

    /// Sample standard deviation of the returns (0 for fewer than 2).
    pub fn std_return(&self) -> f64 {
        let n = self.returns.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean_return();
        (self.returns.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }

    /// Standard error of the mean return.
    pub fn standard_error(&self) -> f64 {
        if self.returns.is_empty() {
            return 0.0;
        }
        self.std_return() / (self.returns.len() as f64).sqrt()
    }

    /// Mean fraction of targets captured per episode.
    pub fn capture_rate(&self) -> f64 {
        if self.targets == 0 || self.captured.is_empty() {
            return 0.0;
        }
        self.captured.iter().sum::<usize>() as f64 / (self.targets * self.captured.len()) as f64
    }

    /// Fraction of team formations that admitted a blocking pair.
    pub fn blocking_pair_rate(&self) -> f64 {
        if self.matchings == 0 {
            0.0
        } else {
            self.unstable_matchings as f64 / self.matchings as f64
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Plays `episodes` episodes and aggregates them.
pub fn run_episodes(
    model: &Model,
    store: &ParameterStore,
    config: &WorldConfig,
    options: &EpisodeOptions,
    episodes: usize,
    rng: &mut impl Rng,
) -> Result<EpisodeStats> {
    let mut stats = EpisodeStats {
        targets: config.targets,
        ..EpisodeStats::default()
    };
    for id in 0..episodes {
        let ep = run_episode(model, store, config, options, id as u64, rng, None)?;
        stats.push(&ep);
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::FEATURE_DIM;
    use crate::nets::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> (Model, ParameterStore) {
        Model::new(
            ModelConfig::new(FEATURE_DIM, ACTION_COUNT),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap()
    }

    fn options(policy: Policy) -> EpisodeOptions {
        EpisodeOptions {
            policy,
            algorithm: MatchAlgorithm::Oom,
            rematch_interval: 0,
            agents: None,
        }
    }

    #[test]
    fn episodes_are_well_formed() {
        let (m, s) = model();
        let cfg = WorldConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for id in 0..4 {
            let ep = run_episode(
                &m,
                &s,
                &cfg,
                &options(Policy::EpsilonGreedy(0.5)),
                id,
                &mut rng,
                None,
            )
            .unwrap();
            assert!(!ep.is_empty() && ep.len() <= cfg.horizon);
            assert!(ep.transitions.last().unwrap().terminal);
            assert!(ep.transitions[..ep.len() - 1].iter().all(|t| !t.terminal));
            assert!(ep.matchings >= 1);
            let mut slots = ep.group_slots.clone();
            slots.sort_unstable();
            assert_eq!(slots, vec![0, 1, 2, 3]);
            for t in &ep.transitions {
                let alive: Vec<usize> = (0..t.observation.alive.len())
                    .filter(|&a| t.observation.alive[a])
                    .collect();
                if alive.iter().any(|&a| a < cfg.leaders) {
                    assert_eq!(t.grouping.members(), alive);
                }
            }
        }
    }

    #[test]
    fn greedy_is_deterministic_given_seed() {
        let (m, s) = model();
        let cfg = WorldConfig::default();
        let run = |seed| {
            run_episodes(
                &m,
                &s,
                &cfg,
                &options(Policy::Greedy),
                3,
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap()
        };
        assert_eq!(run(9), run(9));
    }

    #[test]
    fn trace_covers_every_step() {
        let (m, s) = model();
        let cfg = WorldConfig::default();
        let mut trace = Vec::new();
        let ep = run_episode(
            &m,
            &s,
            &cfg,
            &options(Policy::Random),
            0,
            &mut ChaCha8Rng::seed_from_u64(1),
            Some(&mut trace),
        )
        .unwrap();
        assert_eq!(trace.len(), ep.len() + 1);
    }

    #[test]
    fn dead_agents_stay() {
        let q = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            select_actions(&q, &[true, false], Policy::Greedy, &mut rng),
            vec![1, 0]
        );
    }
}
