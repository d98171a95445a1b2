//! Group-aware hypernetwork and the monotonic mixer it parameterises.

use rand::Rng;

use super::ModelConfig;
use crate::attention::{EntityFeedForward, Linear, Mask, MaskSet, MultiHeadAttention};
use crate::diffcore::{Graph, ParameterStore, Tensor, Var};
use crate::error::{Error, Result};

/// Which group each agent row pools with. Every agent belongs to exactly one
/// entry of `groups`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupLayout {
    pub groups: Vec<Vec<usize>>,
    pub group_of: Vec<usize>,
}

impl GroupLayout {
    pub fn new(groups: Vec<Vec<usize>>, agents: usize) -> Result<Self> {
        let mut group_of = vec![usize::MAX; agents];
        for (k, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::contract(format!("group {k} is empty")));
            }
            for &a in members {
                if a >= agents || group_of[a] != usize::MAX {
                    return Err(Error::contract(format!(
                        "agent {a} misplaced in group layout"
                    )));
                }
                group_of[a] = k;
            }
        }
        if let Some(a) = group_of.iter().position(|&k| k == usize::MAX) {
            return Err(Error::contract(format!("agent {a} has no group")));
        }
        Ok(Self { groups, group_of })
    }

    /// Every agent in one group.
    pub fn single(agents: usize) -> Self {
        Self {
            groups: vec![(0..agents).collect()],
            group_of: vec![0; agents],
        }
    }
}

/// Mixer parameters for one state. `w1` holds one nonnegative row per
/// mixed utility.
#[derive(Debug, Clone, Copy)]
pub struct MixingWeights {
    pub w1: Var,
    pub b1: Var,
    /// Nonnegative, 1×hidden.
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone)]
pub struct HyperOutput {
    /// Weights for mixing the |A| main utilities.
    pub main: MixingWeights,
    /// Weights for mixing the 2|A| in/out utilities.
    pub aux: Option<MixingWeights>,
}

#[derive(Debug, Clone)]
pub struct HyperNet {
    entity_ff: EntityFeedForward,
    attention: MultiHeadAttention,
    agent_ff: EntityFeedForward,
    decoder: Linear,
    bias1: Linear,
    weight2: Linear,
    bias2_hidden: EntityFeedForward,
    bias2: Linear,
    agent_hidden: usize,
}

impl HyperNet {
    pub fn register(
        store: &mut ParameterStore,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let h = cfg.hidden;
        let k = cfg.hyper_hidden;
        let m = cfg.mix_hidden;
        Ok(Self {
            entity_ff: EntityFeedForward::register(
                store,
                "hyper.entity_ff",
                cfg.feature_dim,
                h,
                rng,
            )?,
            attention: MultiHeadAttention::register(store, "hyper.attention", h, cfg.heads, rng)?,
            agent_ff: EntityFeedForward::register(store, "hyper.agent_ff", h, k, rng)?,
            decoder: Linear::register(store, "hyper.decoder", cfg.embed, (k + 1) * m, rng)?,
            bias1: Linear::register(store, "hyper.bias1", h, m, rng)?,
            weight2: Linear::register(store, "hyper.weight2", h, m, rng)?,
            bias2_hidden: EntityFeedForward::register(store, "hyper.bias2_hidden", h, m, rng)?,
            bias2: Linear::register(store, "hyper.bias2", m, 1, rng)?,
            agent_hidden: k,
        })
    }

    /// Max-pools embeddings within each group, one row per group.
    pub fn group_states(g: &mut Graph, embeddings: Var, layout: &GroupLayout) -> Result<Var> {
        let rows = layout
            .groups
            .iter()
            .map(|members| g.max_rows(embeddings, members))
            .collect::<Result<Vec<_>>>()?;
        g.concat_rows(&rows)
    }

    /// First-layer rows for each agent from its attention output and the
    /// weights decoded from the pooled state of its group.
    fn first_layer(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        agent_rows: Var,
        generated: Var,
    ) -> Result<Var> {
        let z = self.agent_ff.forward(g, store, agent_rows)?;
        let rows = g.value(z).rows();
        let ones = g.constant(Tensor::full(&[rows, 1], 1.0));
        let z1 = g.concat_cols(&[z, ones])?;
        let w = g.row_bilinear(z1, generated)?;
        g.abs(w)
    }

    /// `state` is the |E|×d entity matrix (no role tags), `embeddings` the
    /// encoder output of this step and `split` the in/out assignment when
    /// the auxiliary mixer is needed. Visibility is never restricted here.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        state: Var,
        agents: usize,
        embeddings: Var,
        layout: &GroupLayout,
        split: Option<&MaskSet>,
    ) -> Result<HyperOutput> {
        if layout.group_of.len() != agents {
            return Err(Error::contract("group layout does not match agent count"));
        }
        let x = self.entity_ff.forward(g, store, state)?;
        let entities = g.value(x).rows();
        let queries = g.slice_rows(x, 0, agents)?;
        let projected = self.attention.project(g, store, queries, x)?;
        let full = self
            .attention
            .attend(g, store, &projected, &Mask::ones(agents, entities))?;

        let pooled = Self::group_states(g, embeddings, layout)?;
        let decoded = self.decoder.forward(g, store, pooled)?;
        let generated = g.gather_rows(decoded, &layout.group_of)?;

        let w1 = self.first_layer(g, store, full.output, generated)?;
        let global = mean_rows(g, full.output)?;
        let b1 = self.bias1.forward(g, store, global)?;
        let w2 = self.weight2.forward(g, store, global)?;
        let w2 = g.abs(w2)?;
        let v = self.bias2_hidden.forward(g, store, global)?;
        let b2 = self.bias2.forward(g, store, v)?;
        let main = MixingWeights { w1, b1, w2, b2 };

        let aux = match split {
            Some(split) => {
                let split = split.unrestricted()?;
                let mut blocks = Vec::with_capacity(2);
                for mask in [&split.in_mask, &split.out_mask] {
                    let pass =
                        self.attention
                            .attend(g, store, &projected, &mask.with_diagonal())?;
                    blocks.push(self.first_layer(g, store, pass.output, generated)?);
                }
                let w1 = g.concat_rows(&blocks)?;
                Some(MixingWeights { w1, b1, w2, b2 })
            }
            None => None,
        };
        Ok(HyperOutput { main, aux })
    }

    pub fn agent_hidden(&self) -> usize {
        self.agent_hidden
    }
}

fn mean_rows(g: &mut Graph, x: Var) -> Result<Var> {
    let rows = g.value(x).rows();
    let w = g.constant(Tensor::full(&[1, rows], 1.0 / rows as f64));
    g.matmul(w, x)
}

/// Two-layer monotone mixer: `ELU(q W1 + b1) · W2ᵀ + b2` for a 1×n row of
/// utilities.
pub fn mix_forward(g: &mut Graph, utilities: Var, w: &MixingWeights) -> Result<Var> {
    let h = g.matmul(utilities, w.w1)?;
    let h = g.add(h, w.b1)?;
    let h = g.elu(h)?;
    let out = g.matmul_t(h, w.w2)?;
    g.add(out, w.b2)
}
