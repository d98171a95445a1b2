use rand::Rng;

use super::replay::Episode;
use crate::attention::sample_complementary_masks;
use crate::diffcore::{Graph, ParameterStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{argmax, combine, sd_loss, squared_error_sum, td_target, LossReport};
use crate::nets::mix_forward;
use crate::nets::Branches;
use crate::nets::{group_layout, group_one_hot, team_labels, Model, UtilityMasks};

/// Online and target parameters with the optimisation settings.
#[derive(Debug, Clone)]
pub struct Learner {
    pub model: Model,
    pub online: ParameterStore,
    pub target: ParameterStore,
    pub gamma: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    updates: usize,
}

/// Per-episode sums of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeLoss {
    pub l_q: f64,
    pub l_aux: f64,
    pub l_sd: f64,
}

/// Chosen utility per agent as a 1×|A| row, zero for dead agents.
fn chosen(g: &mut Graph, q: Var, actions: &[usize], alive: &[bool]) -> Result<Var> {
    let picked = g.pick(q, actions)?;
    let live = g.constant(Tensor::new(
        vec![alive.len(), 1],
        alive.iter().map(|&a| f64::from(u8::from(a))).collect(),
    )?);
    let picked = g.mul(picked, live)?;
    g.transpose(picked)
}

/// Graph nodes of an online pass over one episode.
#[derive(Debug, Clone)]
pub struct OnlinePass {
    /// Mixed values of the taken actions, T×1.
    pub q_tot: Var,
    /// Auxiliary in/out mixed values, T×1.
    pub q_aux: Var,
    /// Similarity-diversity term summed over steps.
    pub sd: Var,
    /// Per-step utilities, |A|×|U| each.
    pub utilities: Vec<Tensor>,
}

/// Unrolls the online networks along `ep` from a zero hidden state, with a
/// fresh in/out split per step drawn from `rng`.
pub fn online_pass(
    g: &mut Graph,
    model: &Model,
    store: &ParameterStore,
    ep: &Episode,
    rng: &mut impl Rng,
) -> Result<OnlinePass> {
    let agents = ep.agents();
    let mut hidden = g.constant(model.initial_hidden(agents));
    let (mut q_tot, mut q_aux, mut sd) = (Vec::new(), Vec::new(), Vec::new());
    let mut utilities = Vec::with_capacity(ep.len());
    for tr in &ep.transitions {
        let obs = &tr.observation;
        let split = sample_complementary_masks(&obs.observability, rng)?;
        let out_mask = split.out_mask.with_diagonal();
        let labels = team_labels(&tr.grouping, &obs.alive);
        let x = g.constant(obs.entities.augmented());
        let onehot = g.constant(group_one_hot(&labels, &ep.group_slots)?);
        let out = model.utility.forward(
            g,
            store,
            x,
            agents,
            UtilityMasks {
                observability: &obs.observability,
                counterfactual: Some((&split.in_mask, &out_mask)),
            },
            hidden,
            onehot,
            Branches {
                counterfactual: true,
                preferences: false,
            },
        )?;
        hidden = out.hidden;
        utilities.push(g.value(out.q).clone());

        let qa = chosen(g, out.q, &tr.actions, &obs.alive)?;
        let q_in = out
            .q_in
            .ok_or_else(|| Error::contract("missing in-branch utilities"))?;
        let q_out = out
            .q_out
            .ok_or_else(|| Error::contract("missing out-branch utilities"))?;
        let qi = chosen(g, q_in, &tr.actions, &obs.alive)?;
        let qo = chosen(g, q_out, &tr.actions, &obs.alive)?;

        let state = g.constant(obs.entities.features().clone());
        let layout = group_layout(&labels)?;
        let hyp = model.hyper.forward(
            g,
            store,
            state,
            agents,
            out.embeddings,
            &layout,
            Some(&split),
        )?;
        q_tot.push(mix_forward(g, qa, &hyp.main)?);
        let aux = hyp
            .aux
            .ok_or_else(|| Error::contract("missing auxiliary mixer"))?;
        let both = g.concat_cols(&[qi, qo])?;
        q_aux.push(mix_forward(g, both, &aux)?);
        // the embedding objective trains the encoder only: hidden states
        // enter it as constants
        let frozen_hidden = g.constant(g.value(out.hidden).clone());
        let sd_embeddings = model.utility.encode(g, store, frozen_hidden, onehot)?;
        sd.push(sd_loss(g, sd_embeddings, &labels)?);
    }
    let q_tot = g.concat_rows(&q_tot)?;
    let q_aux = g.concat_rows(&q_aux)?;
    let sd = g.concat_rows(&sd)?;
    let sd = g.sum(sd)?;
    Ok(OnlinePass {
        q_tot,
        q_aux,
        sd,
        utilities,
    })
}

/// Target-network mixed values of `greedy[t]` at every step; entry 0 is
/// never used as a bootstrap and is left at 0.
pub fn target_values(
    model: &Model,
    store: &ParameterStore,
    ep: &Episode,
    greedy: &[Vec<usize>],
) -> Result<Vec<f64>> {
    let agents = ep.agents();
    let mut g = Graph::frozen();
    let mut hidden = g.constant(model.initial_hidden(agents));
    let mut values = vec![0.0; ep.len()];
    for (t, tr) in ep.transitions.iter().enumerate() {
        let obs = &tr.observation;
        let labels = team_labels(&tr.grouping, &obs.alive);
        let x = g.constant(obs.entities.augmented());
        let onehot = g.constant(group_one_hot(&labels, &ep.group_slots)?);
        let out = model.utility.forward(
            &mut g,
            store,
            x,
            agents,
            UtilityMasks {
                observability: &obs.observability,
                counterfactual: None,
            },
            hidden,
            onehot,
            Branches::default(),
        )?;
        hidden = out.hidden;
        if t == 0 {
            continue;
        }
        let qa = chosen(&mut g, out.q, &greedy[t], &obs.alive)?;
        let state = g.constant(obs.entities.features().clone());
        let layout = group_layout(&labels)?;
        let hyp =
            model
                .hyper
                .forward(&mut g, store, state, agents, out.embeddings, &layout, None)?;
        let v = mix_forward(&mut g, qa, &hyp.main)?;
        values[t] = g.value(v).item();
    }
    Ok(values)
}

impl Learner {
    pub fn new(
        model: Model,
        online: ParameterStore,
        gamma: f64,
        lambda: f64,
        learning_rate: f64,
        grad_clip: f64,
    ) -> Self {
        let target = online.clone();
        Self {
            model,
            online,
            target,
            gamma,
            lambda,
            learning_rate,
            grad_clip,
            updates: 0,
        }
    }

    /// Optimiser steps taken so far.
    pub fn updates(&self) -> usize {
        self.updates
    }

    pub fn sync_target(&mut self) -> Result<()> {
        self.target.sync_from(&self.online)
    }

    /// Builds the loss graph of one episode, back-propagates
    /// `scale · ((1-λ)·l_q + λ·l_aux + l_sd)` into the online gradients and
    /// returns the unscaled sums.
    pub fn accumulate_episode(
        &mut self,
        ep: &Episode,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Result<EpisodeLoss> {
        if ep.is_empty() {
            return Err(Error::contract("empty episode"));
        }
        let mut g = Graph::new();
        let OnlinePass {
            q_tot,
            q_aux,
            sd,
            utilities,
        } = online_pass(&mut g, &self.model, &self.online, ep, rng)?;
        let greedy: Vec<Vec<usize>> = utilities
            .iter()
            .map(|q| (0..q.rows()).map(|a| argmax(q.row_slice(a))).collect())
            .collect();
        let next = target_values(&self.model, &self.target, ep, &greedy)?;
        let targets = ep
            .transitions
            .iter()
            .enumerate()
            .map(|(t, tr)| {
                let bootstrap = next.get(t + 1).copied().unwrap_or(0.0);
                td_target(tr.reward, tr.terminal, self.gamma, bootstrap)
            })
            .collect::<Result<Vec<f64>>>()?;
        let l_q = squared_error_sum(&mut g, q_tot, &targets)?;
        let l_aux = squared_error_sum(&mut g, q_aux, &targets)?;
        let total = combine(&mut g, l_q, l_aux, sd, self.lambda)?;
        let scaled = g.scale(total, scale)?;
        let loss = EpisodeLoss {
            l_q: g.value(l_q).item(),
            l_aux: g.value(l_aux).item(),
            l_sd: g.value(sd).item(),
        };
        if ![loss.l_q, loss.l_aux, loss.l_sd]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::NonFinite { op: "episode_loss" });
        }
        g.backward(scaled)?;
        g.accumulate_param_grads(&mut self.online);
        Ok(loss)
    }

    /// One optimiser step on a batch of episodes. Loss terms are averaged
    /// over every transition in the batch.
    pub fn update(&mut self, batch: &[&Episode], rng: &mut impl Rng) -> Result<LossReport> {
        let n: usize = batch.iter().map(|e| e.len()).sum();
        if n == 0 {
            return Err(Error::contract("empty batch"));
        }
        let scale = 1.0 / n as f64;
        self.online.zero_grads();
        let (mut l_q, mut l_aux, mut l_sd) = (0.0, 0.0, 0.0);
        for ep in batch {
            let l = self.accumulate_episode(ep, scale, rng)?;
            l_q += l.l_q;
            l_aux += l.l_aux;
            l_sd += l.l_sd;
        }
        if self.grad_clip > 0.0 {
            self.online.clip_grad_norm(self.grad_clip);
        }
        self.online.optimizer_step(self.learning_rate)?;
        self.updates += 1;
        LossReport::new(l_q * scale, l_aux * scale, l_sd * scale, self.lambda)
    }
}
