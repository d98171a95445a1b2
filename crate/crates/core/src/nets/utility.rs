//! Agent utility network: entity attention under three masks, a recurrent
//! cell, a group-aware encoder and a decoder that writes each agent's
//! output layer.

use rand::Rng;

use super::ModelConfig;
use crate::attention::{pooled_agent_scores, EntityFeedForward, Linear, Mask, MultiHeadAttention};
use crate::diffcore::{Graph, ParamId, ParameterStore, Tensor, Var};
use crate::error::Result;

/// Gated recurrent cell.
#[derive(Debug, Clone)]
pub struct Gru {
    /// Input to update/reset/candidate pre-activations, in×3h.
    input: ParamId,
    /// Hidden to update/reset pre-activations, h×2h.
    recurrent: ParamId,
    /// Reset-gated hidden to candidate, h×h.
    candidate: ParamId,
    bias: ParamId,
    hidden: usize,
}

impl Gru {
    pub fn register(
        store: &mut ParameterStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            input: store.register(
                format!("{prefix}.input"),
                Tensor::glorot(input, 3 * hidden, rng),
            )?,
            recurrent: store.register(
                format!("{prefix}.recurrent"),
                Tensor::glorot(hidden, 2 * hidden, rng),
            )?,
            candidate: store.register(
                format!("{prefix}.candidate"),
                Tensor::glorot(hidden, hidden, rng),
            )?,
            bias: store.register(format!("{prefix}.bias"), Tensor::zeros(&[1, 3 * hidden]))?,
            hidden,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var, h: Var) -> Result<Var> {
        let n = self.hidden;
        let wi = g.param(store, self.input);
        let wh = g.param(store, self.recurrent);
        let wc = g.param(store, self.candidate);
        let b = g.param(store, self.bias);
        let xi = g.matmul(x, wi)?;
        let xi = g.add_row(xi, b)?;
        let hh = g.matmul(h, wh)?;
        let xg = g.slice_cols(xi, 0, 2 * n)?;
        let gates = g.add(xg, hh)?;
        let gates = g.sigmoid(gates)?;
        let update = g.slice_cols(gates, 0, n)?;
        let reset = g.slice_cols(gates, n, n)?;
        let rh = g.mul(reset, h)?;
        let rc = g.matmul(rh, wc)?;
        let xc = g.slice_cols(xi, 2 * n, n)?;
        let cand = g.add(xc, rc)?;
        let cand = g.tanh(cand)?;
        // h' = cand + update * (h - cand)
        let diff = g.sub(h, cand)?;
        let keep = g.mul(update, diff)?;
        g.add(cand, keep)
    }
}

/// Which optional branches a forward pass computes.
#[derive(Debug, Clone, Copy, Default)]
pub struct Branches {
    /// Utilities under the in/out masks.
    pub counterfactual: bool,
    /// Agent preference scores from the all-visible attention pass.
    pub preferences: bool,
}

/// Masks for one utility step. Every mask must let each agent see itself.
#[derive(Debug, Clone, Copy)]
pub struct UtilityMasks<'a> {
    pub observability: &'a Mask,
    pub counterfactual: Option<(&'a Mask, &'a Mask)>,
}

#[derive(Debug, Clone)]
pub struct UtilityOutput {
    /// Agents × actions.
    pub q: Var,
    pub q_in: Option<Var>,
    pub q_out: Option<Var>,
    /// Agents × embedding width, unit rows.
    pub embeddings: Var,
    pub hidden: Var,
    /// Row-major |A|×|A| scores, when requested.
    pub preferences: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct UtilityNet {
    entity_ff: EntityFeedForward,
    attention: MultiHeadAttention,
    post: EntityFeedForward,
    gru: Gru,
    encoder: Linear,
    decoder: Linear,
    hidden: usize,
    actions: usize,
}

impl UtilityNet {
    pub fn register(
        store: &mut ParameterStore,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let h = cfg.hidden;
        Ok(Self {
            entity_ff: EntityFeedForward::register(
                store,
                "utility.entity_ff",
                cfg.feature_dim + 3,
                h,
                rng,
            )?,
            attention: MultiHeadAttention::register(store, "utility.attention", h, cfg.heads, rng)?,
            post: EntityFeedForward::register(store, "utility.post", h, h, rng)?,
            gru: Gru::register(store, "utility.gru", h, h, rng)?,
            encoder: Linear::register(
                store,
                "utility.encoder",
                h + cfg.group_slots,
                cfg.embed,
                rng,
            )?,
            decoder: Linear::register(
                store,
                "utility.decoder",
                cfg.embed,
                (h + 1) * cfg.actions,
                rng,
            )?,
            hidden: h,
            actions: cfg.actions,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    /// Unit-norm embedding of each agent's hidden state augmented with its
    /// group one-hot.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        hidden: Var,
        groups: Var,
    ) -> Result<Var> {
        let x = g.concat_cols(&[hidden, groups])?;
        let e = self.encoder.forward(g, store, x)?;
        let e = g.tanh(e)?;
        g.row_normalize(e)
    }

    /// Applies each agent's generated output layer to `hidden`.
    pub fn head(&self, g: &mut Graph, generated: Var, hidden: Var) -> Result<Var> {
        let rows = g.value(hidden).rows();
        let ones = g.constant(Tensor::full(&[rows, 1], 1.0));
        let h1 = g.concat_cols(&[hidden, ones])?;
        g.row_bilinear(h1, generated)
    }

    /// One step. `entities` is the augmented |E|×(d+3) matrix, `hidden` the
    /// previous |A|×h state and `groups` the |A|×slots group one-hot.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        entities: Var,
        agents: usize,
        masks: UtilityMasks<'_>,
        hidden: Var,
        groups: Var,
        branches: Branches,
    ) -> Result<UtilityOutput> {
        let x = self.entity_ff.forward(g, store, entities)?;
        let queries = g.slice_rows(x, 0, agents)?;
        let projected = self.attention.project(g, store, queries, x)?;

        let main = self
            .attention
            .attend(g, store, &projected, masks.observability)?;
        let inp = self.post.forward(g, store, main.output)?;
        let new_hidden = self.gru.forward(g, store, inp, hidden)?;
        let embeddings = self.encode(g, store, new_hidden, groups)?;
        let generated = self.decoder.forward(g, store, embeddings)?;
        let q = self.head(g, generated, new_hidden)?;

        let (mut q_in, mut q_out) = (None, None);
        if branches.counterfactual {
            if let Some((m_in, m_out)) = masks.counterfactual {
                for (mask, slot) in [(m_in, &mut q_in), (m_out, &mut q_out)] {
                    let pass = self.attention.attend(g, store, &projected, mask)?;
                    let inp = self.post.forward(g, store, pass.output)?;
                    let h = self.gru.forward(g, store, inp, hidden)?;
                    *slot = Some(self.head(g, generated, h)?);
                }
            }
        }

        let preferences = if branches.preferences {
            let all = Mask::ones(agents, g.value(x).rows());
            let pass = self.attention.attend(g, store, &projected, &all)?;
            Some(pooled_agent_scores(g, &pass, agents))
        } else {
            None
        };

        Ok(UtilityOutput {
            q,
            q_in,
            q_out,
            embeddings,
            hidden: new_hidden,
            preferences,
        })
    }

    /// Attention-pooled preference scores alone, row-major |A|×|A|. Matches
    /// the `preferences` branch of [`UtilityNet::forward`] without running
    /// the recurrent path.
    pub fn preferences(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        entities: Var,
        agents: usize,
    ) -> Result<Vec<f64>> {
        let x = self.entity_ff.forward(g, store, entities)?;
        let queries = g.slice_rows(x, 0, agents)?;
        let projected = self.attention.project(g, store, queries, x)?;
        let all = Mask::ones(agents, g.value(x).rows());
        let pass = self.attention.attend(g, store, &projected, &all)?;
        Ok(pooled_agent_scores(g, &pass, agents))
    }

    pub fn actions(&self) -> usize {
        self.actions
    }
}
