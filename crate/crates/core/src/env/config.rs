use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::error::{Error, Result};

/// Scenario parameters for the escort grid world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub grid: usize,
    pub min_agents: usize,
    pub max_agents: usize,
    pub leaders: usize,
    pub targets: usize,
    pub hazards: usize,
    pub horizon: usize,
    pub observation_radius: usize,
    pub step_penalty: f64,
    pub capture_reward: f64,
    pub completion_bonus: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            grid: 8,
            min_agents: 3,
            max_agents: 5,
            leaders: 2,
            targets: 3,
            hazards: 1,
            horizon: 50,
            observation_radius: 3,
            step_penalty: -0.01,
            capture_reward: 1.0,
            completion_bonus: 5.0,
        }
    }
}

impl WorldConfig {
    /// The default scenario with a fixed population.
    pub fn with_population(agents: usize, leaders: usize) -> Self {
        Self {
            min_agents: agents,
            max_agents: agents,
            leaders,
            ..Self::default()
        }
    }

    pub fn agent_range(&self) -> RangeInclusive<usize> {
        self.min_agents..=self.max_agents
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.leaders) {
            return Err(Error::config(format!(
                "leader count {} outside 2..=4",
                self.leaders
            )));
        }
        if self.min_agents > self.max_agents {
            return Err(Error::config("min_agents exceeds max_agents"));
        }
        if self.min_agents <= self.leaders {
            return Err(Error::config(format!(
                "{} agents leave no follower for {} leaders",
                self.min_agents, self.leaders
            )));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon must be positive"));
        }
        if self.hazards > 0 && self.grid < 3 {
            return Err(Error::config("hazard patrols need a grid of at least 3"));
        }
        let needed = self.max_agents + self.targets + self.hazards;
        if needed + 8 * self.hazards > self.grid * self.grid {
            return Err(Error::config(format!(
                "grid {}×{} too small for {needed} entities",
                self.grid, self.grid
            )));
        }
        Ok(())
    }

    /// Overrides fields from `kv`, consuming the keys it recognises.
    pub fn apply(&mut self, kv: &mut KvConfig) -> Result<()> {
        kv.take_into("grid", &mut self.grid)?;
        kv.take_into("min_agents", &mut self.min_agents)?;
        kv.take_into("max_agents", &mut self.max_agents)?;
        kv.take_into("leaders", &mut self.leaders)?;
        kv.take_into("targets", &mut self.targets)?;
        kv.take_into("hazards", &mut self.hazards)?;
        kv.take_into("horizon", &mut self.horizon)?;
        kv.take_into("observation_radius", &mut self.observation_radius)?;
        kv.take_into("step_penalty", &mut self.step_penalty)?;
        kv.take_into("capture_reward", &mut self.capture_reward)?;
        kv.take_into("completion_bonus", &mut self.completion_bonus)?;
        Ok(())
    }
}
