//! Python bindings: offline team formation, the grid world, training,
//! evaluation and the self-check suite.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::Value;

use teamform_core::env::{Action, World, WorldConfig};
use teamform_core::harness::{self, check, Composition, EvalSettings, Population};
use teamform_core::matching::{self, Grouping, MatchAlgorithm, PreferenceMatrix, Team};
use teamform_core::training::{
    self, init_model, run_episodes, EpisodeOptions, Policy, TrainConfig,
};
use teamform_core::Error;

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::NonFinite { .. } | Error::NanGradient(_) => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, json_to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

fn algorithm(name: &str) -> PyResult<MatchAlgorithm> {
    name.parse().map_err(to_py_err)
}

fn preferences(scores: Vec<Vec<f64>>, leaders: usize) -> PyResult<PreferenceMatrix> {
    PreferenceMatrix::from_rows(&scores, leaders).map_err(to_py_err)
}

fn teams_out(g: &Grouping) -> Vec<(usize, Vec<usize>)> {
    g.teams
        .iter()
        .map(|t| (t.leader, t.followers.clone()))
        .collect()
}

fn teams_in(teams: Vec<(usize, Vec<usize>)>) -> Grouping {
    Grouping::new(
        teams
            .into_iter()
            .map(|(leader, followers)| Team { leader, followers })
            .collect(),
    )
}

/// Follower counts per leader, as even as possible.
#[pyfunction]
fn balance_capacities(leaders: usize, followers: usize) -> PyResult<Vec<usize>> {
    Ok(matching::balance_capacities(leaders, followers)
        .map_err(to_py_err)?
        .capacities()
        .to_vec())
}

/// Forms teams from a square score matrix whose first `leaders` rows are
/// leaders. Returns `(leader, followers)` pairs.
#[pyfunction]
#[pyo3(signature = (scores, leaders, algorithm="oom"))]
fn match_teams(
    scores: Vec<Vec<f64>>,
    leaders: usize,
    algorithm: &str,
) -> PyResult<Vec<(usize, Vec<usize>)>> {
    let prefs = preferences(scores, leaders)?;
    let algo = self::algorithm(algorithm)?;
    let g = matching::form_teams(&prefs, algo).map_err(to_py_err)?;
    Ok(teams_out(&g))
}

/// `(leader, follower)` pairs that would both rather be together.
#[pyfunction]
fn blocking_pairs(
    scores: Vec<Vec<f64>>,
    leaders: usize,
    teams: Vec<(usize, Vec<usize>)>,
) -> PyResult<Vec<(usize, usize)>> {
    let prefs = preferences(scores, leaders)?;
    let plan =
        matching::balance_capacities(prefs.leaders(), prefs.followers()).map_err(to_py_err)?;
    let g = teams_in(teams);
    g.validate(&prefs, &plan).map_err(to_py_err)?;
    Ok(matching::find_blocking_pairs(&g, &prefs, &plan))
}

/// Every stable grouping of a small instance, by exhaustive search.
#[pyfunction]
fn stable_matchings(
    scores: Vec<Vec<f64>>,
    leaders: usize,
) -> PyResult<Vec<Vec<(usize, Vec<usize>)>>> {
    let prefs = preferences(scores, leaders)?;
    let plan =
        matching::balance_capacities(prefs.leaders(), prefs.followers()).map_err(to_py_err)?;
    let all = matching::enumerate_stable_matchings(&prefs, &plan).map_err(to_py_err)?;
    Ok(all.iter().map(teams_out).collect())
}

/// The cooperative capture grid world with its own random stream.
#[pyclass(name = "World")]
struct PyWorld {
    world: World,
}

#[pymethods]
impl PyWorld {
    #[new]
    #[pyo3(signature = (seed=0, agents=None, leaders=2))]
    fn new(seed: u64, agents: Option<usize>, leaders: usize) -> PyResult<Self> {
        let config = WorldConfig {
            leaders,
            ..WorldConfig::default()
        };
        config.validate().map_err(to_py_err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let world = match agents {
            Some(n) => World::reset_with_agents(&config, n, &mut rng),
            None => World::reset(&config, &mut rng),
        }
        .map_err(to_py_err)?;
        Ok(Self { world })
    }

    /// `(features, observability, alive)`: per-entity feature rows, the
    /// agent × entity visibility mask and an alive flag per agent.
    fn observe(&self) -> (Vec<Vec<f64>>, Vec<Vec<bool>>, Vec<bool>) {
        let obs = self.world.observe();
        let mask = (0..obs.observability.rows())
            .map(|r| obs.observability.row(r).to_vec())
            .collect();
        (obs.entities.features().to_rows(), mask, obs.alive)
    }

    /// Applies one action index per agent (0 stay, 1 up, 2 down, 3 left,
    /// 4 right, 5 interact); returns `(reward, terminal)`.
    fn step(&mut self, actions: Vec<usize>) -> PyResult<(f64, bool)> {
        let acts = actions
            .into_iter()
            .map(Action::from_index)
            .collect::<teamform_core::Result<Vec<_>>>()
            .map_err(to_py_err)?;
        let r = self.world.step(&acts).map_err(to_py_err)?;
        Ok((r.reward, r.terminal))
    }

    /// Installs the teams used by the capture rule.
    fn set_teams(&mut self, teams: Vec<(usize, Vec<usize>)>) {
        self.world.set_grouping(teams_in(teams));
    }

    fn teams(&self) -> Vec<(usize, Vec<usize>)> {
        teams_out(self.world.grouping())
    }

    fn positions(&self) -> Vec<(i32, i32)> {
        self.world.positions().to_vec()
    }

    fn digest(&self) -> u64 {
        self.world.digest()
    }

    #[getter]
    fn agents(&self) -> usize {
        self.world.agent_count()
    }

    #[getter]
    fn leaders(&self) -> usize {
        self.world.leader_count()
    }

    #[getter]
    fn timestep(&self) -> usize {
        self.world.timestep()
    }

    #[getter]
    fn captured(&self) -> usize {
        self.world.captured()
    }

    #[getter]
    fn done(&self) -> bool {
        self.world.is_done()
    }
}

/// Mean, standard deviation and standard error of the uniform-random
/// policy's return on the default scenario.
#[pyfunction]
#[pyo3(signature = (episodes=1000, seed=0))]
fn random_baseline(py: Python<'_>, episodes: usize, seed: u64) -> PyResult<(f64, f64, f64)> {
    py.detach(|| {
        let (model, store) = init_model(0)?;
        let options = EpisodeOptions {
            policy: Policy::Random,
            algorithm: MatchAlgorithm::Oom,
            rematch_interval: 0,
            agents: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stats = run_episodes(
            &model,
            &store,
            &WorldConfig::default(),
            &options,
            episodes,
            &mut rng,
        )?;
        Ok((
            stats.mean_return(),
            stats.std_return(),
            stats.standard_error(),
        ))
    })
    .map_err(to_py_err)
}

/// Trains on the default scenario and returns the metrics rows. With
/// `out`, the run directory receives the metrics log and checkpoints.
#[pyfunction]
#[pyo3(signature = (steps=50_000, seed=0, algorithm="oom", out=None, eval_episodes=32))]
fn train<'py>(
    py: Python<'py>,
    steps: usize,
    seed: u64,
    algorithm: &str,
    out: Option<PathBuf>,
    eval_episodes: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let config = TrainConfig {
        total_steps: steps,
        seed,
        algorithm: self::algorithm(algorithm)?,
        eval_episodes,
        ..TrainConfig::default()
    };
    config.validate().map_err(to_py_err)?;
    let outcome = py
        .detach(|| training::train(&config, out.as_deref()))
        .map_err(to_py_err)?;
    to_py(py, &outcome.metrics)
}

/// Greedy evaluation of a checkpoint on one composition. `agents=None`
/// uses the training population.
#[pyfunction]
#[pyo3(signature = (checkpoint, algorithm="oom", agents=None, leaders=2, episodes=200, seeds=5, seed=0))]
#[allow(clippy::too_many_arguments)]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    algorithm: &str,
    agents: Option<usize>,
    leaders: usize,
    episodes: usize,
    seeds: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let algo = self::algorithm(algorithm)?;
    let base = WorldConfig::default();
    let population = match agents {
        Some(n) => Population::Fixed(n),
        None => Population::Range(base.min_agents, base.max_agents),
    };
    let composition = Composition::new(population, leaders).map_err(to_py_err)?;
    let settings = EvalSettings {
        episodes,
        seeds,
        base_seed: seed,
        world: base,
    };
    let report = py
        .detach(|| {
            let (model, store) = harness::load_model(&checkpoint)?;
            harness::evaluate_cell(&model, &store, algo, &composition, &settings)
        })
        .map_err(to_py_err)?;
    to_py(py, &report)
}

/// Runs every self-check sweep; returns `(name, passed, detail)` triples.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn run_checks(py: Python<'_>, seed: u64) -> PyResult<Vec<(String, bool, String)>> {
    let suite = py.detach(|| check::run_all(seed)).map_err(to_py_err)?;
    Ok(suite
        .results
        .into_iter()
        .map(|r| (r.name.to_string(), r.passed, r.detail))
        .collect())
}

#[pymodule]
fn teamform(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(balance_capacities, m)?)?;
    m.add_function(wrap_pyfunction!(match_teams, m)?)?;
    m.add_function(wrap_pyfunction!(blocking_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(stable_matchings, m)?)?;
    m.add_function(wrap_pyfunction!(random_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_checks, m)?)?;
    m.add_class::<PyWorld>()?;
    Ok(())
}
