//! Cooperative "escort" grid world with leaders, followers, targets and
//! patrolling hazards.
//!
//! A target is captured when a leader and at least one follower from that
//! leader's current team stand next to it (Chebyshev distance 1) and both
//! choose `Interact` on the same step. Hazards walk a fixed 8-step square
//! and eliminate any agent sharing their cell. If every agent is eliminated
//! the episode ends and the step penalties for the rest of the horizon are
//! charged at once.

mod config;
pub mod trace;

pub use config::WorldConfig;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{EntityMatrix, EntityRole, Mask};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::matching::Grouping;

pub const FEATURE_DIM: usize = 10;
pub const ACTION_COUNT: usize = 6;

/// Offsets of the hazard patrol, clockwise around a 3×3 square.
const PATROL: [(i32, i32); 8] = [
    (0, 0),
    (1, 0),
    (2, 0),
    (2, 1),
    (2, 2),
    (1, 2),
    (0, 2),
    (0, 1),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Stay,
    Up,
    Down,
    Left,
    Right,
    Interact,
}

impl Action {
    pub const ALL: [Action; ACTION_COUNT] = [
        Action::Stay,
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
        Action::Interact,
    ];

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::contract(format!("action index {i} out of range")))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    fn delta(self) -> (i32, i32) {
        match self {
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
            Action::Stay | Action::Interact => (0, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EntityKind {
    Leader,
    Follower,
    Target,
    Hazard,
}

/// What agents see at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub entities: EntityMatrix,
    pub observability: Mask,
    /// Alive flag per agent.
    pub alive: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub terminal: bool,
    pub captured: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    config: WorldConfig,
    kinds: Vec<EntityKind>,
    positions: Vec<(i32, i32)>,
    alive: Vec<bool>,
    agents: usize,
    /// Patrol anchor and phase per hazard, aligned with hazard entity order.
    patrols: Vec<((i32, i32), usize)>,
    t: usize,
    captured: usize,
    grouping: Grouping,
    done: bool,
}

impl World {
    /// New episode with the agent count drawn uniformly from the configured
    /// range.
    pub fn reset(config: &WorldConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let agents = rng.gen_range(config.agent_range());
        Self::reset_with_agents(config, agents, rng)
    }

    pub fn reset_with_agents(
        config: &WorldConfig,
        agents: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if agents <= config.leaders {
            return Err(Error::config(format!(
                "{agents} agents leave no follower for {} leaders",
                config.leaders
            )));
        }
        let n = config.grid as i32;
        let mut taken = vec![false; config.grid * config.grid];
        let idx = |(x, y): (i32, i32)| (y * n + x) as usize;

        let mut patrols = Vec::with_capacity(config.hazards);
        let mut patrol_cells = vec![false; taken.len()];
        for _ in 0..config.hazards {
            let anchor = (rng.gen_range(0..n - 2), rng.gen_range(0..n - 2));
            let phase = rng.gen_range(0..PATROL.len());
            for (dx, dy) in PATROL {
                patrol_cells[idx((anchor.0 + dx, anchor.1 + dy))] = true;
            }
            let (dx, dy) = PATROL[phase];
            taken[idx((anchor.0 + dx, anchor.1 + dy))] = true;
            patrols.push((anchor, phase));
        }

        let mut free: Vec<usize> = (0..taken.len()).filter(|&c| !taken[c]).collect();
        free.shuffle(rng);
        let need = agents + config.targets;
        if free.len() < need {
            return Err(Error::config("grid too small to place every entity"));
        }
        // targets avoid patrol routes so hazards never sit on them
        let mut target_cells = Vec::with_capacity(config.targets);
        let mut rest = Vec::with_capacity(free.len());
        for c in free {
            if target_cells.len() < config.targets && !patrol_cells[c] {
                target_cells.push(c);
            } else {
                rest.push(c);
            }
        }
        if target_cells.len() < config.targets || rest.len() < agents {
            return Err(Error::config("grid too small to place every entity"));
        }
        let cell = |c: usize| ((c % config.grid) as i32, (c / config.grid) as i32);

        let mut kinds = Vec::new();
        let mut positions = Vec::new();
        for a in 0..agents {
            kinds.push(if a < config.leaders {
                EntityKind::Leader
            } else {
                EntityKind::Follower
            });
            positions.push(cell(rest[a]));
        }
        for &c in &target_cells {
            kinds.push(EntityKind::Target);
            positions.push(cell(c));
        }
        for &(anchor, phase) in &patrols {
            kinds.push(EntityKind::Hazard);
            let (dx, dy) = PATROL[phase];
            positions.push((anchor.0 + dx, anchor.1 + dy));
        }
        let entities = kinds.len();
        Ok(Self {
            config: config.clone(),
            kinds,
            positions,
            alive: vec![true; entities],
            agents,
            patrols,
            t: 0,
            captured: 0,
            grouping: Grouping::default(),
            done: false,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn agent_count(&self) -> usize {
        self.agents
    }

    pub fn leader_count(&self) -> usize {
        self.config.leaders
    }

    pub fn entity_count(&self) -> usize {
        self.kinds.len()
    }

    pub fn kinds(&self) -> &[EntityKind] {
        &self.kinds
    }

    pub fn positions(&self) -> &[(i32, i32)] {
        &self.positions
    }

    pub fn alive(&self) -> &[bool] {
        &self.alive
    }

    pub fn agents_alive(&self) -> Vec<bool> {
        self.alive[..self.agents].to_vec()
    }

    pub fn timestep(&self) -> usize {
        self.t
    }

    pub fn captured(&self) -> usize {
        self.captured
    }

    pub fn targets_remaining(&self) -> usize {
        self.config.targets - self.captured
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn grouping(&self) -> &Grouping {
        &self.grouping
    }

    /// Installs the teams used by the capture rule.
    pub fn set_grouping(&mut self, grouping: Grouping) {
        self.grouping = grouping;
    }

    /// Places an entity directly; for crafted scenarios.
    pub fn set_position(&mut self, entity: usize, pos: (i32, i32)) {
        self.positions[entity] = pos;
    }

    pub fn set_alive(&mut self, entity: usize, alive: bool) {
        self.alive[entity] = alive;
    }

    fn hazard_phase(&self, entity: usize) -> Option<usize> {
        let first = self.kinds.iter().position(|k| *k == EntityKind::Hazard)?;
        (entity >= first).then(|| self.patrols[entity - first].1)
    }

    fn features(&self) -> Tensor {
        let scale = (self.config.grid.max(2) - 1) as f64;
        let remaining = if self.config.targets == 0 {
            0.0
        } else {
            self.targets_remaining() as f64 / self.config.targets as f64
        };
        let time = self.t as f64 / self.config.horizon as f64;
        let mut data = Vec::with_capacity(self.entity_count() * FEATURE_DIM);
        for (e, kind) in self.kinds.iter().enumerate() {
            let (x, y) = self.positions[e];
            let mut row = [0.0; FEATURE_DIM];
            row[0] = x as f64 / scale;
            row[1] = y as f64 / scale;
            row[2 + *kind as usize] = 1.0;
            row[6] = if self.alive[e] { 1.0 } else { 0.0 };
            row[7] = remaining;
            row[8] = time;
            if let Some(p) = self.hazard_phase(e) {
                row[9] = p as f64 / PATROL.len() as f64;
            }
            data.extend_from_slice(&row);
        }
        Tensor::new(vec![self.entity_count(), FEATURE_DIM], data).expect("fixed width")
    }

    pub fn entity_matrix(&self) -> EntityMatrix {
        let roles = self
            .kinds
            .iter()
            .map(|k| match k {
                EntityKind::Leader => EntityRole::Leader,
                EntityKind::Follower => EntityRole::Follower,
                _ => EntityRole::NonAgent,
            })
            .collect();
        EntityMatrix::new(self.features(), roles).expect("agents are placed first")
    }

    /// Chebyshev-radius visibility of alive entities; every agent sees itself.
    pub fn observation_mask(&self, radius: usize) -> Mask {
        let r = radius as i32;
        Mask::from_fn(self.agents, self.entity_count(), |a, e| {
            if a == e {
                return true;
            }
            let (ax, ay) = self.positions[a];
            let (ex, ey) = self.positions[e];
            self.alive[e] && (ax - ex).abs().max((ay - ey).abs()) <= r
        })
    }

    pub fn observe(&self) -> Observation {
        Observation {
            entities: self.entity_matrix(),
            observability: self.observation_mask(self.config.observation_radius),
            alive: self.agents_alive(),
        }
    }

    fn blocked_by_target(&self, cell: (i32, i32)) -> bool {
        self.kinds
            .iter()
            .zip(&self.positions)
            .zip(&self.alive)
            .any(|((k, p), &live)| *k == EntityKind::Target && live && *p == cell)
    }

    /// Advances one step. Actions of dead agents are ignored.
    pub fn step(&mut self, actions: &[Action]) -> Result<StepResult> {
        if actions.len() != self.agents {
            return Err(Error::Dimension {
                op: "env_step",
                left: vec![self.agents],
                right: vec![actions.len()],
            });
        }
        if self.done {
            return Err(Error::contract("episode already finished"));
        }
        let n = self.config.grid as i32;

        // movement in index order: a cell claimed earlier, or still held by a
        // later agent, blocks the move
        let start: Vec<(i32, i32)> = self.positions[..self.agents].to_vec();
        let mut claimed: Vec<(i32, i32)> = Vec::with_capacity(self.agents);
        for a in 0..self.agents {
            if !self.alive[a] {
                continue;
            }
            let (dx, dy) = actions[a].delta();
            let (x, y) = start[a];
            let want = ((x + dx).clamp(0, n - 1), (y + dy).clamp(0, n - 1));
            let held_later = (a + 1..self.agents).any(|b| self.alive[b] && start[b] == want);
            let dest = if want != start[a]
                && (claimed.contains(&want) || held_later || self.blocked_by_target(want))
            {
                start[a]
            } else {
                want
            };
            self.positions[a] = dest;
            claimed.push(dest);
        }

        // hazards advance and eliminate co-located agents
        let first_hazard = self.agents + self.config.targets;
        for (h, (anchor, phase)) in self.patrols.iter_mut().enumerate() {
            *phase = (*phase + 1) % PATROL.len();
            let (dx, dy) = PATROL[*phase];
            self.positions[first_hazard + h] = (anchor.0 + dx, anchor.1 + dy);
        }
        for a in 0..self.agents {
            if self.alive[a]
                && (first_hazard..self.entity_count())
                    .any(|h| self.positions[h] == self.positions[a])
            {
                self.alive[a] = false;
            }
        }

        // captures
        let near = |a: usize, target: (i32, i32), pos: &[(i32, i32)]| {
            let (ax, ay) = pos[a];
            (ax - target.0).abs().max((ay - target.1).abs()) == 1
        };
        let acting = |a: usize| self.alive[a] && actions[a] == Action::Interact;
        let hits: Vec<usize> = (self.agents..first_hazard)
            .filter(|&e| {
                let p = self.positions[e];
                self.alive[e]
                    && self.grouping.teams.iter().any(|team| {
                        acting(team.leader)
                            && near(team.leader, p, &self.positions)
                            && team
                                .followers
                                .iter()
                                .any(|&f| acting(f) && near(f, p, &self.positions))
                    })
            })
            .collect();
        let captured_now = hits.len();
        for e in hits {
            self.alive[e] = false;
        }
        self.captured += captured_now;
        self.t += 1;

        let mut reward =
            self.config.step_penalty + self.config.capture_reward * captured_now as f64;
        let all_captured = self.config.targets > 0 && self.captured == self.config.targets;
        if all_captured {
            reward += self.config.completion_bonus;
        }
        let wiped = !self.alive[..self.agents].iter().any(|&a| a);
        if wiped && !all_captured {
            // nothing can happen any more; settle the penalties a played-out
            // episode would have paid so that dying never shortens the bill
            reward += self.config.step_penalty * self.config.horizon.saturating_sub(self.t) as f64;
        }
        self.done = all_captured || wiped || self.t >= self.config.horizon;
        Ok(StepResult {
            observation: self.observe(),
            reward,
            terminal: self.done,
            captured: captured_now,
        })
    }

    /// 64-bit FNV-1a digest of timestep, positions and alive flags.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        feed(&(self.t as u64).to_le_bytes());
        for (p, &a) in self.positions.iter().zip(&self.alive) {
            feed(&p.0.to_le_bytes());
            feed(&p.1.to_le_bytes());
            feed(&[u8::from(a)]);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::Team;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn world(agents: usize) -> World {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        World::reset_with_agents(&WorldConfig::default(), agents, &mut rng).unwrap()
    }

    #[test]
    fn reset_is_deterministic_and_roles_ordered() {
        let cfg = WorldConfig::default();
        let a = World::reset(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = World::reset(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let w = world(5);
        use EntityKind::*;
        assert_eq!(
            &w.kinds()[..5],
            &[Leader, Leader, Follower, Follower, Follower]
        );
        let m = w.observe().observability;
        assert!((0..5).all(|a| m.get(a, a)));
    }

    #[test]
    fn standing_still_costs_the_step_penalty() {
        let mut w = world(4);
        // keep the hazard far from everyone
        for a in 0..4 {
            w.set_position(a, (a as i32, 7));
        }
        let hazard = w.entity_count() - 1;
        w.patrols[0] = ((5, 0), 0);
        w.set_position(hazard, (5, 0));
        for t in 0..3 {
            w.set_position(4 + t, (t as i32, 4));
        }
        let before = w.positions().to_vec();
        let r = w.step(&[Action::Stay; 4]).unwrap();
        assert_eq!(r.reward, -0.01);
        assert_eq!(&w.positions()[..4], &before[..4]);
        assert!(!r.terminal);
    }

    #[test]
    fn contested_cell_goes_to_lower_index() {
        let mut w = world(3);
        w.set_position(0, (3, 3));
        w.set_position(1, (5, 3));
        w.set_position(2, (0, 0));
        for t in 0..3 {
            w.set_position(3 + t, (7, t as i32));
        }
        w.patrols[0] = ((0, 5), 0);
        w.set_position(6, (0, 5));
        w.step(&[Action::Right, Action::Left, Action::Stay])
            .unwrap();
        assert_eq!(w.positions()[0], (4, 3));
        assert_eq!(w.positions()[1], (5, 3));
    }

    #[test]
    fn capture_needs_same_team_and_last_one_ends_episode() {
        let mut w = world(4);
        // one target left next to leader 0 and follower 2
        w.captured = 2;
        w.set_alive(5, false);
        w.set_alive(6, false);
        w.set_position(4, (3, 3));
        w.set_position(0, (2, 3));
        w.set_position(2, (4, 3));
        w.set_position(1, (0, 7));
        w.set_position(3, (7, 7));
        w.patrols[0] = ((5, 0), 0);
        w.set_position(7, (5, 0));
        let acts = [
            Action::Interact,
            Action::Stay,
            Action::Interact,
            Action::Stay,
        ];

        // follower 2 on the other leader's team: nothing happens
        w.set_grouping(Grouping::new(vec![
            Team {
                leader: 0,
                followers: vec![3],
            },
            Team {
                leader: 1,
                followers: vec![2],
            },
        ]));
        let r = w.step(&acts).unwrap();
        assert_eq!(r.captured, 0);

        w.set_grouping(Grouping::new(vec![
            Team {
                leader: 0,
                followers: vec![2],
            },
            Team {
                leader: 1,
                followers: vec![3],
            },
        ]));
        let r = w.step(&acts).unwrap();
        assert_eq!(r.captured, 1);
        assert!(r.terminal);
        assert!((r.reward - (-0.01 + 1.0 + 5.0)).abs() < 1e-12);
    }

    #[test]
    fn hazard_eliminates_agents_on_its_path() {
        let mut w = world(3);
        w.patrols[0] = ((2, 2), 0);
        let hazard = w.entity_count() - 1;
        w.set_position(hazard, (2, 2));
        w.set_position(0, (3, 2));
        w.set_position(1, (0, 7));
        w.set_position(2, (7, 7));
        for t in 0..3 {
            w.set_position(3 + t, (7, t as i32));
        }
        w.step(&[Action::Stay; 3]).unwrap();
        assert!(!w.alive()[0]);
        assert!(!w.observe().observability.get(1, 0));
    }

    #[test]
    fn chebyshev_visibility() {
        let mut w = world(3);
        w.set_position(0, (0, 0));
        w.set_position(3, (2, 1));
        assert!(w.observation_mask(2).get(0, 3));
        assert!(!w.observation_mask(1).get(0, 3));
        let m = w.observation_mask(0);
        assert_eq!(m.count(), 3);
        let m = w.observation_mask(8);
        assert_eq!(m.count(), 3 * w.entity_count());
    }

    #[test]
    fn feature_width_is_fixed_across_populations() {
        for agents in 3..=8 {
            let cfg = WorldConfig::with_population(agents, 2);
            let w = World::reset(&cfg, &mut ChaCha8Rng::seed_from_u64(agents as u64)).unwrap();
            assert_eq!(w.entity_matrix().feature_dim(), FEATURE_DIM);
        }
    }
}
