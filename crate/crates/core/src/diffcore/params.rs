use std::collections::HashMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParameterStore`]. Ids are positional, so a
/// cloned store (a target network) shares the id space of its source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

/// Adaptive moment optimiser settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

pub const DEFAULT_LEARNING_RATE: f64 = 5e-4;

/// Named parameters, their gradient buffers and optimiser state.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    slots: Vec<Slot>,
    index: HashMap<String, ParamId>,
    step: u64,
    adam: AdamConfig,
}

impl Default for ParameterStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self {
            slots: Vec::new(),
            index: HashMap::new(),
            step: 0,
            adam: AdamConfig::default(),
        }
    }

    pub fn with_adam(mut self, adam: AdamConfig) -> Self {
        self.adam = adam;
        self
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        let n = value.len();
        let id = ParamId(self.slots.len());
        self.index.insert(name.clone(), id);
        self.slots.push(Slot {
            name,
            value,
            grad: vec![0.0; n],
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.slots[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.slots[id.0].grad
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn scalar_count(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let slot = &mut self.slots[id.0];
        slot.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for slot in &mut self.slots {
            slot.grad.iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn zero_grads(&mut self) {
        for slot in &mut self.slots {
            slot.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.slots
            .iter()
            .flat_map(|s| s.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale_grads(max_norm / norm);
        }
        norm
    }

    /// One bias-corrected adaptive-moment update; increments the step counter
    /// and clears gradients. A NaN gradient aborts before any parameter is
    /// touched.
    pub fn optimizer_step(&mut self, learning_rate: f64) -> Result<()> {
        if let Some(slot) = self
            .slots
            .iter()
            .find(|s| s.grad.iter().any(|g| g.is_nan()))
        {
            return Err(Error::NanGradient(slot.name.clone()));
        }
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.adam;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for slot in &mut self.slots {
            let values = slot.value.data_mut();
            for i in 0..values.len() {
                let g = slot.grad[i];
                let m = beta1 * slot.first_moment[i] + (1.0 - beta1) * g;
                let v = beta2 * slot.second_moment[i] + (1.0 - beta2) * g * g;
                slot.first_moment[i] = m;
                slot.second_moment[i] = v;
                let m_hat = m / c1;
                let v_hat = v / c2;
                values[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
                slot.grad[i] = 0.0;
            }
        }
        Ok(())
    }

    /// Copies every parameter value from `source` (same layout required).
    /// Optimiser state of `self` is left untouched.
    pub fn sync_from(&mut self, source: &ParameterStore) -> Result<()> {
        if self.slots.len() != source.slots.len() {
            return Err(Error::contract("parameter stores have different layouts"));
        }
        for (dst, src) in self.slots.iter_mut().zip(&source.slots) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::contract(format!(
                    "parameter `{}` does not match `{}`",
                    dst.name, src.name
                )));
            }
            dst.value.data_mut().copy_from_slice(src.value.data());
        }
        Ok(())
    }

    /// True when names, shapes and every value bit agree.
    pub fn values_bit_equal(&self, other: &ParameterStore) -> bool {
        self.slots.len() == other.slots.len()
            && self.slots.iter().zip(&other.slots).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// `(name, shape)` for every parameter, in registration order.
    pub fn describe(&self) -> Vec<(String, Vec<usize>)> {
        self.slots
            .iter()
            .map(|s| (s.name.clone(), s.value.shape().to_vec()))
            .collect()
    }
}
