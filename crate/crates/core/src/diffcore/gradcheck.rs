//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::graph::{Graph, Var};
use super::params::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so that gradients that are
/// essentially zero are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `(label, max relative error)` per checked input or parameter.
    pub entries: Vec<(String, f64)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|e| e.1).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.1 < self.tolerance)
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.entries.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn scalar_output(g: &Graph, out: Var) -> Result<f64> {
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Checks the gradient of a scalar function with respect to each input
/// tensor against central differences.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_output(&g, out)?;
    g.backward(out)?;

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = probe.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_output(&g, out)
    };

    let mut probe = inputs.to_vec();
    let mut entries = Vec::with_capacity(inputs.len());
    for (k, var) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[k].len()];
        let analytic = g.grad(*var).unwrap_or(&zeros).to_vec();
        let mut worst: f64 = 0.0;
        for i in 0..inputs[k].len() {
            let orig = probe[k].data()[i];
            probe[k].data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
        entries.push((format!("input {k}"), worst));
    }
    Ok(GradCheckReport { entries, tolerance })
}

/// Checks parameter gradients of a scalar loss built from `store`.
///
/// With `coords_per_param = Some(n)`, at most `n` randomly chosen
/// coordinates of each parameter are differenced; `None` checks all of them.
pub fn grad_check_params<F>(
    store: &ParameterStore,
    f: F,
    step: f64,
    tolerance: f64,
    coords_per_param: Option<usize>,
    rng: &mut impl Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<Var>,
{
    grad_check_selected(store, f, step, tolerance, coords_per_param, |_| true, rng)
}

/// [`grad_check_params`] restricted to parameters whose name satisfies
/// `select`.
pub fn grad_check_selected<F, S>(
    store: &ParameterStore,
    f: F,
    step: f64,
    tolerance: f64,
    coords_per_param: Option<usize>,
    select: S,
    rng: &mut impl Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<Var>,
    S: Fn(&str) -> bool,
{
    if step <= 0.0 {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let mut analytic_store = store.clone();
    analytic_store.zero_grads();
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    scalar_output(&g, out)?;
    g.backward(out)?;
    g.accumulate_param_grads(&mut analytic_store);

    let mut probe = store.clone();
    let eval = |probe: &ParameterStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, probe)?;
        scalar_output(&g, out)
    };

    let mut entries = Vec::new();
    for id in store.ids().filter(|&id| select(store.name(id))) {
        let n = store.value(id).len();
        let coords: Vec<usize> = match coords_per_param {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        for i in coords {
            let orig = store.value(id).data()[i];
            probe.value_mut(id).data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(analytic_store.grad(id)[i], numeric));
        }
        entries.push((store.name(id).to_string(), worst));
    }
    Ok(GradCheckReport { entries, tolerance })
}
