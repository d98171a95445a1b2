//! Utility network, group-aware hypernetwork and monotonic mixer.

mod hyper;
mod utility;

pub use hyper::{mix_forward, GroupLayout, HyperNet, HyperOutput, MixingWeights};
pub use utility::{Branches, Gru, UtilityMasks, UtilityNet, UtilityOutput};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{HEADS, HIDDEN_DIM};
use crate::diffcore::{ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::matching::Grouping;

pub const EMBED_DIM: usize = 16;
pub const GROUP_SLOTS: usize = 4;
pub const MIX_HIDDEN: usize = 32;
pub const HYPER_HIDDEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Raw entity feature width, before role tags.
    pub feature_dim: usize,
    pub actions: usize,
    pub hidden: usize,
    pub heads: usize,
    pub embed: usize,
    pub group_slots: usize,
    pub hyper_hidden: usize,
    pub mix_hidden: usize,
}

impl ModelConfig {
    pub fn new(feature_dim: usize, actions: usize) -> Self {
        Self {
            feature_dim,
            actions,
            hidden: HIDDEN_DIM,
            heads: HEADS,
            embed: EMBED_DIM,
            group_slots: GROUP_SLOTS,
            hyper_hidden: HYPER_HIDDEN,
            mix_hidden: MIX_HIDDEN,
        }
    }
}

/// Layout of every learnable component. Values live in a
/// [`ParameterStore`], so the same layout serves online and target copies.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub utility: UtilityNet,
    pub hyper: HyperNet,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<(Self, ParameterStore)> {
        let mut store = ParameterStore::new();
        let utility = UtilityNet::register(&mut store, &config, rng)?;
        let hyper = HyperNet::register(&mut store, &config, rng)?;
        Ok((
            Self {
                config,
                utility,
                hyper,
            },
            store,
        ))
    }

    pub fn initial_hidden(&self, agents: usize) -> Tensor {
        Tensor::zeros(&[agents, self.config.hidden])
    }
}

/// Group label per agent: the index of its team, or one shared extra label
/// for alive agents left outside every team (only when no leader is alive).
/// Dead agents get `None`.
pub fn team_labels(grouping: &Grouping, alive: &[bool]) -> Vec<Option<usize>> {
    let extra = grouping.teams.len();
    alive
        .iter()
        .enumerate()
        .map(|(a, &live)| live.then(|| grouping.team_index(a).unwrap_or(extra)))
        .collect()
}

/// Pooling layout for the hypernetwork: one group per label, and each dead
/// agent pooled on its own.
pub fn group_layout(labels: &[Option<usize>]) -> Result<GroupLayout> {
    let top = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); top];
    let mut dead = Vec::new();
    for (a, l) in labels.iter().enumerate() {
        match l {
            Some(k) => groups[*k].push(a),
            None => dead.push(vec![a]),
        }
    }
    groups.retain(|g| !g.is_empty());
    groups.extend(dead);
    GroupLayout::new(groups, labels.len())
}

/// |A|×slots one-hot of each agent's group through the episode's slot
/// permutation. Dead agents get an all-zero row.
pub fn group_one_hot(labels: &[Option<usize>], slots: &[usize]) -> Result<Tensor> {
    let width = slots.len();
    let mut data = vec![0.0; labels.len() * width];
    for (a, l) in labels.iter().enumerate() {
        if let Some(k) = l {
            let slot = *slots.get(*k).ok_or_else(|| {
                Error::contract(format!("group {k} exceeds the {width} supported groups"))
            })?;
            data[a * width + slot] = 1.0;
        }
    }
    Tensor::new(vec![labels.len(), width], data)
}
