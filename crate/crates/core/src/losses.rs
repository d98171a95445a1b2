//! Training objectives: squared TD error on the mixed value, the same error
//! on the in/out factorisation, and the similarity-diversity embedding loss.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const DEFAULT_GAMMA: f64 = 0.99;

/// Loss components of one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_q: f64,
    pub l_aux: f64,
    pub l_sd: f64,
    pub l_td: f64,
    pub total: f64,
    pub lambda: f64,
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::contract(format!(
            "trade-off {lambda} outside [0, 1]"
        )))
    }
}

impl LossReport {
    pub fn new(l_q: f64, l_aux: f64, l_sd: f64, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        let l_td = (1.0 - lambda) * l_q + lambda * l_aux;
        Ok(Self {
            l_q,
            l_aux,
            l_sd,
            l_td,
            total: l_td + l_sd,
            lambda,
        })
    }

    /// Absolute deviation from `total = (1-λ)·l_q + λ·l_aux + l_sd`.
    pub fn identity_error(&self) -> f64 {
        (self.total - ((1.0 - self.lambda) * self.l_q + self.lambda * self.l_aux + self.l_sd)).abs()
    }
}

/// `r` for terminal steps, otherwise `r + γ·next`.
pub fn td_target(reward: f64, terminal: bool, gamma: f64, next_value: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::contract(format!("discount {gamma} outside [0, 1)")));
    }
    Ok(if terminal {
        reward
    } else {
        reward + gamma * next_value
    })
}

/// Sum of squared differences between `predictions` (any shape) and
/// constant `targets`.
pub fn squared_error_sum(g: &mut Graph, predictions: Var, targets: &[f64]) -> Result<Var> {
    let shape = g.shape(predictions).to_vec();
    let y = g.constant(Tensor::new(shape, targets.to_vec())?);
    let d = g.sub(predictions, y)?;
    let sq = g.square(d)?;
    g.sum(sq)
}

/// Mean squared TD error.
pub fn td_loss(g: &mut Graph, predictions: Var, targets: &[f64]) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let s = squared_error_sum(g, predictions, targets)?;
    g.scale(s, 1.0 / targets.len() as f64)
}

/// Pair weights: −1 for ordered pairs in the same group, +1 across groups,
/// 0 on the diagonal.
pub fn pair_signs(labels: &[usize]) -> Tensor {
    let n = labels.len();
    let data = (0..n * n)
        .map(|i| {
            let (a, b) = (i / n, i % n);
            if a == b {
                0.0
            } else if labels[a] == labels[b] {
                -1.0
            } else {
                1.0
            }
        })
        .collect();
    Tensor::new(vec![n, n], data).expect("square")
}

/// Similarity-diversity loss for one set of embeddings: the sum over
/// ordered pairs `i ≠ j` of `±cosine(e_i, e_j)`. Rows whose label is `None`
/// (eliminated agents) are left out. Fewer than two rows gives 0.
pub fn sd_loss(g: &mut Graph, embeddings: Var, labels: &[Option<usize>]) -> Result<Var> {
    if g.value(embeddings).rows() != labels.len() {
        return Err(Error::Dimension {
            op: "sd_loss",
            left: g.shape(embeddings).to_vec(),
            right: vec![labels.len()],
        });
    }
    let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
    if rows.len() < 2 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let kept: Vec<usize> = rows.iter().map(|&i| labels[i].expect("filtered")).collect();
    let e = g.gather_rows(embeddings, &rows)?;
    let e = g.row_normalize(e)?;
    let cos = g.matmul_t(e, e)?;
    let signs = g.constant(pair_signs(&kept));
    let weighted = g.mul(cos, signs)?;
    g.sum(weighted)
}

/// `(1-λ)·l_q + λ·l_aux + l_sd` on the tape.
pub fn combine(g: &mut Graph, l_q: Var, l_aux: Var, l_sd: Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    let a = g.scale(l_q, 1.0 - lambda)?;
    let b = g.scale(l_aux, lambda)?;
    let td = g.add(a, b)?;
    g.add(td, l_sd)
}

/// Index of the largest entry, ties to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
