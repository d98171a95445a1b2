use std::collections::VecDeque;

use rand::seq::index::sample;
use rand::Rng;

use crate::env::Observation;
use crate::error::{Error, Result};
use crate::matching::Grouping;

/// One environment step as seen by the learner.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub episode: u64,
    pub step: usize,
    /// Observation before the step.
    pub observation: Observation,
    /// Observation after the step.
    pub next_observation: Observation,
    /// Teams in force during the step.
    pub grouping: Grouping,
    pub actions: Vec<usize>,
    pub reward: f64,
    pub terminal: bool,
}

/// A full episode, in step order.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: u64,
    /// Embedding slot assigned to each group label for this episode.
    pub group_slots: Vec<usize>,
    pub transitions: Vec<Transition>,
    /// Targets captured over the episode.
    pub captured: usize,
    /// Team formations performed (start of episode and after eliminations).
    pub matchings: usize,
    /// Formations whose result admitted at least one blocking pair.
    pub unstable_matchings: usize,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }

    pub fn agents(&self) -> usize {
        self.transitions
            .first()
            .map_or(0, |t| t.observation.alive.len())
    }
}

/// FIFO store of whole episodes.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Episode>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("replay capacity must be positive"));
        }
        Ok(Self {
            capacity,
            episodes: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Stores `episode`, evicting the oldest when full.
    pub fn push(&mut self, episode: Episode) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
    }

    /// `batch` distinct episodes drawn uniformly.
    pub fn sample(&self, batch: usize, rng: &mut impl Rng) -> Result<Vec<&Episode>> {
        if batch > self.episodes.len() {
            return Err(Error::contract(format!(
                "batch of {batch} requested from {} stored episodes",
                self.episodes.len()
            )));
        }
        Ok(sample(rng, self.episodes.len(), batch)
            .into_iter()
            .map(|i| &self.episodes[i])
            .collect())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn empty(id: u64) -> Episode {
        Episode {
            id,
            group_slots: vec![0, 1, 2, 3],
            transitions: Vec::new(),
            captured: 0,
            matchings: 0,
            unstable_matchings: 0,
        }
    }

    #[test]
    fn evicts_oldest() {
        let mut b = ReplayBuffer::new(2).unwrap();
        for id in 0..3 {
            b.push(empty(id));
        }
        let ids: Vec<u64> = b.iter().map(|e| e.id).collect();
        assert_eq!(ids, vec![1, 2]);
    }

    #[test]
    fn sample_is_distinct() {
        let mut b = ReplayBuffer::new(8).unwrap();
        for id in 0..8 {
            b.push(empty(id));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ids: Vec<u64> = b
            .sample(8, &mut rng)
            .unwrap()
            .iter()
            .map(|e| e.id)
            .collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..8).collect::<Vec<_>>());
        assert!(b.sample(9, &mut rng).is_err());
    }
}
