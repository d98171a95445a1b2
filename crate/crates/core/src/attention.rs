//! Entity matrices, observability and counterfactual masks, entity-wise
//! feedforward layers and masked multi-head attention.

use rand::Rng;

use crate::diffcore::{Graph, ParamId, ParameterStore, Tensor, Var};
use crate::error::{Error, Result};

pub const HIDDEN_DIM: usize = 32;
pub const HEADS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EntityRole {
    Leader,
    Follower,
    NonAgent,
}

impl EntityRole {
    pub fn one_hot_index(self) -> usize {
        match self {
            EntityRole::Leader => 0,
            EntityRole::Follower => 1,
            EntityRole::NonAgent => 2,
        }
    }
}

/// Per-entity feature rows with role tags. Agents come first, leaders first
/// among agents.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityMatrix {
    features: Tensor,
    roles: Vec<EntityRole>,
    agents: usize,
    leaders: usize,
}

impl EntityMatrix {
    pub fn new(features: Tensor, roles: Vec<EntityRole>) -> Result<Self> {
        if features.rank() != 2 || features.rows() != roles.len() {
            return Err(Error::Dimension {
                op: "entity_matrix",
                left: features.shape().to_vec(),
                right: vec![roles.len()],
            });
        }
        let leaders = roles
            .iter()
            .take_while(|r| **r == EntityRole::Leader)
            .count();
        let agents = leaders
            + roles[leaders..]
                .iter()
                .take_while(|r| **r == EntityRole::Follower)
                .count();
        if roles[agents..].iter().any(|r| *r != EntityRole::NonAgent) {
            return Err(Error::contract(
                "entity rows must be ordered leaders, followers, non-agents",
            ));
        }
        Ok(Self {
            features,
            roles,
            agents,
            leaders,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn roles(&self) -> &[EntityRole] {
        &self.roles
    }

    pub fn agent_count(&self) -> usize {
        self.agents
    }

    pub fn leader_count(&self) -> usize {
        self.leaders
    }

    pub fn entity_count(&self) -> usize {
        self.roles.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Features with a three-wide role one-hot appended, |E|×(d+3).
    pub fn augmented(&self) -> Tensor {
        let d = self.feature_dim();
        let mut data = Vec::with_capacity(self.entity_count() * (d + 3));
        for (e, role) in self.roles.iter().enumerate() {
            data.extend_from_slice(self.features.row_slice(e));
            let mut tag = [0.0; 3];
            tag[role.one_hot_index()] = 1.0;
            data.extend_from_slice(&tag);
        }
        Tensor::new(vec![self.entity_count(), d + 3], data).expect("consistent dims")
    }
}

/// Dense boolean matrix, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Self { rows, cols, data }
    }

    pub fn new(rows: usize, cols: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                op: "mask",
                left: vec![rows, cols],
                right: vec![data.len()],
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| true)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| false)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copy with every `(i, i)` entry set, so each query can attend to itself.
    pub fn with_diagonal(&self) -> Self {
        let mut m = self.clone();
        for i in 0..self.rows.min(self.cols) {
            m.set(i, i, true);
        }
        m
    }

    /// Columns reordered so that new column `j` is old column `perm[j]`.
    pub fn permute_cols(&self, perm: &[usize]) -> Self {
        Self::from_fn(self.rows, self.cols, |r, c| self.get(r, perm[c]))
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Observability mask and a complementary in/out split of it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    pub observability: Mask,
    pub in_mask: Mask,
    pub out_mask: Mask,
    /// The entity coin flips the split came from (`true` = in-subset).
    pub in_subset: Vec<bool>,
}

impl MaskSet {
    /// Builds the split from an explicit per-entity assignment. An agent
    /// always counts itself as in-subset.
    pub fn from_assignment(observability: &Mask, in_subset: Vec<bool>) -> Result<Self> {
        let (a, e) = (observability.rows(), observability.cols());
        if in_subset.len() != e {
            return Err(Error::Dimension {
                op: "mask_assignment",
                left: vec![a, e],
                right: vec![in_subset.len()],
            });
        }
        if let Some(i) = (0..a).find(|&i| !observability.get(i, i)) {
            return Err(Error::contract(format!(
                "agent {i} does not observe itself"
            )));
        }
        let same = |i: usize, j: usize| i == j || in_subset[j];
        let in_mask = Mask::from_fn(a, e, |i, j| observability.get(i, j) && same(i, j));
        let out_mask = Mask::from_fn(a, e, |i, j| observability.get(i, j) && !same(i, j));
        Ok(Self {
            observability: observability.clone(),
            in_mask,
            out_mask,
            in_subset,
        })
    }

    /// Checks restriction, disjointness, coverage and self-membership.
    pub fn validate(&self) -> Result<()> {
        let obs = &self.observability;
        for (name, m) in [("in", &self.in_mask), ("out", &self.out_mask)] {
            if m.rows() != obs.rows() || m.cols() != obs.cols() {
                return Err(Error::Dimension {
                    op: "mask_set",
                    left: vec![obs.rows(), obs.cols()],
                    right: vec![m.rows(), m.cols()],
                });
            }
            if m.data().iter().zip(obs.data()).any(|(&x, &o)| x && !o) {
                return Err(Error::contract(format!(
                    "{name} mask exceeds observability"
                )));
            }
        }
        for i in 0..obs.data().len() {
            let (x, y) = (self.in_mask.data()[i], self.out_mask.data()[i]);
            if x && y {
                return Err(Error::contract("in and out masks overlap"));
            }
            if (x || y) != obs.data()[i] {
                return Err(Error::contract(
                    "in and out masks do not cover observability",
                ));
            }
        }
        for a in 0..obs.rows().min(obs.cols()) {
            if obs.get(a, a) && !self.in_mask.get(a, a) {
                return Err(Error::contract(format!(
                    "agent {a} missing from its own in-subset"
                )));
            }
        }
        Ok(())
    }

    /// The same split applied to full visibility, as used by the mixing
    /// hypernetwork.
    pub fn unrestricted(&self) -> Result<MaskSet> {
        let full = Mask::ones(self.observability.rows(), self.observability.cols());
        MaskSet::from_assignment(&full, self.in_subset.clone())
    }
}

/// Draws a fair coin per entity and splits every agent's observable set.
pub fn sample_complementary_masks(observability: &Mask, rng: &mut impl Rng) -> Result<MaskSet> {
    let coins = (0..observability.cols())
        .map(|_| rng.gen_bool(0.5))
        .collect();
    MaskSet::from_assignment(observability, coins)
}

/// Row-wise affine map followed by ELU.
#[derive(Debug, Clone, Copy)]
pub struct EntityFeedForward {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl EntityFeedForward {
    pub fn register(
        store: &mut ParameterStore,
        prefix: &str,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.register(
                format!("{prefix}.weight"),
                Tensor::glorot(input, output, rng),
            )?,
            bias: store.register(format!("{prefix}.bias"), Tensor::zeros(&[1, output]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let h = g.matmul(x, w)?;
        let h = g.add_row(h, b)?;
        g.elu(h)
    }
}

/// Plain affine layer `x W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn register(
        store: &mut ParameterStore,
        prefix: &str,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.register(
                format!("{prefix}.weight"),
                Tensor::glorot(input, output, rng),
            )?,
            bias: store.register(format!("{prefix}.bias"), Tensor::zeros(&[1, output]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let h = g.matmul(x, w)?;
        g.add_row(h, b)
    }
}

/// Query/key/value projections computed once and reused across masks.
#[derive(Debug, Clone)]
pub struct Projected {
    values: Vec<Var>,
    logits: Vec<Var>,
    queries: usize,
    entities: usize,
}

/// Output of one masked attention pass.
#[derive(Debug, Clone)]
pub struct AttentionPass {
    /// Queries × hidden.
    pub output: Var,
    /// One queries × entities weight matrix per head.
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention with `heads` heads over a shared width.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn register(
        store: &mut ParameterStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "width {dim} not divisible into {heads} heads"
            )));
        }
        Ok(Self {
            query: store.register(format!("{prefix}.query"), Tensor::glorot(dim, dim, rng))?,
            key: store.register(format!("{prefix}.key"), Tensor::glorot(dim, dim, rng))?,
            value: store.register(format!("{prefix}.value"), Tensor::glorot(dim, dim, rng))?,
            out: Linear::register(store, &format!("{prefix}.out"), dim, dim, rng)?,
            heads,
            dim,
        })
    }

    /// Projects `queries` (Q×dim) and `entities` (E×dim) and forms the
    /// per-head scaled logits.
    pub fn project(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        queries: Var,
        entities: Var,
    ) -> Result<Projected> {
        let wq = g.param(store, self.query);
        let wk = g.param(store, self.key);
        let wv = g.param(store, self.value);
        let q = g.matmul(queries, wq)?;
        let k = g.matmul(entities, wk)?;
        let v = g.matmul(entities, wv)?;
        let dk = self.dim / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut values = Vec::with_capacity(self.heads);
        let mut logits = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dk, dk)?;
            let kh = g.slice_cols(k, h * dk, dk)?;
            let vh = g.slice_cols(v, h * dk, dk)?;
            let l = g.matmul_t(qh, kh)?;
            logits.push(g.scale(l, scale)?);
            values.push(vh);
        }
        Ok(Projected {
            values,
            logits,
            queries: g.value(queries).rows(),
            entities: g.value(entities).rows(),
        })
    }

    /// Masked softmax per head, weighted sum of values, heads concatenated
    /// and projected.
    pub fn attend(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        projected: &Projected,
        mask: &Mask,
    ) -> Result<AttentionPass> {
        if mask.rows() != projected.queries || mask.cols() != projected.entities {
            return Err(Error::Dimension {
                op: "attention_mask",
                left: vec![projected.queries, projected.entities],
                right: vec![mask.rows(), mask.cols()],
            });
        }
        let mut weights = Vec::with_capacity(self.heads);
        let mut heads = Vec::with_capacity(self.heads);
        for (l, v) in projected.logits.iter().zip(&projected.values) {
            let w = g.masked_softmax(*l, mask.data(), 1)?;
            heads.push(g.matmul(w, *v)?);
            weights.push(w);
        }
        let cat = g.concat_cols(&heads)?;
        let output = self.out.forward(g, store, cat)?;
        Ok(AttentionPass { output, weights })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        queries: Var,
        entities: Var,
        mask: &Mask,
    ) -> Result<AttentionPass> {
        let p = self.project(g, store, queries, entities)?;
        self.attend(g, store, &p, mask)
    }
}

/// Agent-to-agent block of an attention pass, pooled over heads by
/// elementwise maximum. Returns an |A|×|A| row-major score vector.
pub fn pooled_agent_scores(g: &Graph, pass: &AttentionPass, agents: usize) -> Vec<f64> {
    let mut scores = vec![f64::NEG_INFINITY; agents * agents];
    for w in &pass.weights {
        let t = g.value(*w);
        for i in 0..agents {
            for j in 0..agents {
                let s = &mut scores[i * agents + j];
                *s = s.max(t.get(i, j));
            }
        }
    }
    scores
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn augmented_appends_role_one_hot() {
        let f = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let m = EntityMatrix::new(
            f,
            vec![
                EntityRole::Leader,
                EntityRole::Follower,
                EntityRole::NonAgent,
            ],
        )
        .unwrap();
        assert_eq!(m.agent_count(), 2);
        let a = m.augmented();
        assert_eq!(a.shape(), &[3, 5]);
        assert_eq!(a.row_slice(0), &[1.0, 2.0, 1.0, 0.0, 0.0]);
        assert_eq!(a.row_slice(2), &[5.0, 6.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn misordered_roles_rejected() {
        let f = Tensor::zeros(&[2, 1]);
        assert!(EntityMatrix::new(f, vec![EntityRole::NonAgent, EntityRole::Leader]).is_err());
    }

    #[test]
    fn hand_evaluated_split() {
        let obs = Mask::ones(2, 3);
        let m = MaskSet::from_assignment(&obs, vec![true, false, true]).unwrap();
        m.validate().unwrap();
        assert_eq!(m.in_mask.row(0), &[true, false, true]);
        assert_eq!(m.out_mask.row(0), &[false, true, false]);
        // agent 1 sits in the out coin but counts itself as in-subset
        assert_eq!(m.in_mask.row(1), &[true, true, true]);
        assert_eq!(m.out_mask.row(1), &[false, false, false]);
    }

    #[test]
    fn all_in_draw_degenerates() {
        let obs = Mask::from_fn(2, 4, |a, e| a == e || e == 3);
        let m = MaskSet::from_assignment(&obs, vec![true; 4]).unwrap();
        assert_eq!(m.in_mask, obs);
        assert_eq!(m.out_mask.count(), 0);
    }

    #[test]
    fn missing_self_observation_rejected() {
        let obs = Mask::from_fn(2, 3, |a, e| a != e);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_complementary_masks(&obs, &mut rng).is_err());
    }

    #[test]
    fn overlapping_masks_fail_validation() {
        let obs = Mask::ones(1, 2);
        let mut m = MaskSet::from_assignment(&obs, vec![true, false]).unwrap();
        m.out_mask.set(0, 0, true);
        assert!(m.validate().is_err());
    }

    fn setup(entities: usize) -> (ParameterStore, MultiHeadAttention, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParameterStore::new();
        let mha = MultiHeadAttention::register(&mut store, "mha", 8, 4, &mut rng).unwrap();
        let x = Tensor::uniform(&[entities, 8], 1.0, &mut rng);
        (store, mha, x)
    }

    #[test]
    fn identical_entities_give_uniform_weights() {
        let (store, mha, _) = setup(5);
        let x = Tensor::full(&[5, 8], 0.3);
        let mut g = Graph::new();
        let e = g.constant(x);
        let q = g.slice_rows(e, 0, 2).unwrap();
        let pass = mha
            .forward(&mut g, &store, q, e, &Mask::ones(2, 5))
            .unwrap();
        for w in &pass.weights {
            assert!(g.value(*w).data().iter().all(|v| (v - 0.2).abs() < 1e-12));
        }
        let s = pooled_agent_scores(&g, &pass, 2);
        assert!(s.iter().all(|v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn forced_attention_returns_value_projection() {
        let (store, mha, x) = setup(4);
        let mut g = Graph::new();
        let e = g.constant(x);
        let q = g.slice_rows(e, 0, 2).unwrap();
        let mask = Mask::from_fn(2, 4, |a, c| c == a + 2);
        let pass = mha.forward(&mut g, &store, q, e, &mask).unwrap();
        for w in &pass.weights {
            let t = g.value(*w);
            assert_eq!(t.get(0, 2), 1.0);
            assert_eq!(t.get(1, 3), 1.0);
            assert_eq!(t.data().iter().filter(|v| **v != 0.0).count(), 2);
        }
        // output before the final projection equals value rows 2 and 3
        let wv = g.param(&store, mha.value);
        let v = g.matmul(e, wv).unwrap();
        let wo = g.param(&store, mha.out.weight);
        let bo = g.param(&store, mha.out.bias);
        let picked = g.gather_rows(v, &[2, 3]).unwrap();
        let expect = g.matmul(picked, wo).unwrap();
        let expect = g.add_row(expect, bo).unwrap();
        assert!(g.value(expect).max_abs_diff(g.value(pass.output)) < 1e-12);
    }

    #[test]
    fn weight_rows_sum_to_one_on_support() {
        let (store, mha, x) = setup(5);
        let mut g = Graph::new();
        let e = g.constant(x);
        let q = g.slice_rows(e, 0, 3).unwrap();
        let mask = Mask::from_fn(3, 5, |a, c| a == c || (a + c) % 2 == 0);
        let pass = mha.forward(&mut g, &store, q, e, &mask).unwrap();
        for w in &pass.weights {
            let t = g.value(*w);
            for r in 0..3 {
                let row = t.row_slice(r);
                let total: f64 = row.iter().sum();
                assert!((total - 1.0).abs() < 1e-9);
                for (c, v) in row.iter().enumerate() {
                    assert_eq!(*v == 0.0, !mask.get(r, c));
                }
            }
        }
    }
}
