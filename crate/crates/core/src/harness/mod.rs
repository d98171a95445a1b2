//! Evaluation protocol over agent/leader compositions, the composition
//! table, and the self-check suite behind the `check` subcommand.

pub mod check;

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{checkpoint, ParameterStore};
use crate::env::WorldConfig;
use crate::error::{Error, Result};
use crate::matching::MatchAlgorithm;
use crate::nets::Model;
use crate::training::{init_model, run_episodes, EpisodeOptions, EpisodeStats, Policy};

pub const DEFAULT_EVAL_EPISODES: usize = 200;
pub const DEFAULT_EVAL_SEEDS: usize = 5;

/// Loads parameters saved by `train` into a freshly built model.
pub fn load_model(path: impl AsRef<Path>) -> Result<(Model, ParameterStore)> {
    let (model, mut store) = init_model(0)?;
    checkpoint::load_into(&mut store, path)?;
    Ok((model, store))
}

/// Agent population of an evaluation cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Population {
    Fixed(usize),
    /// Uniform over an inclusive range, as during training.
    Range(usize, usize),
}

impl Population {
    pub fn label(self) -> String {
        match self {
            Population::Fixed(n) => n.to_string(),
            Population::Range(lo, hi) => format!("{lo}-{hi}"),
        }
    }

    fn bounds(self) -> (usize, usize) {
        match self {
            Population::Fixed(n) => (n, n),
            Population::Range(lo, hi) => (lo, hi),
        }
    }
}

/// One (population, leader count) cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Composition {
    pub population: Population,
    pub leaders: usize,
}

impl Composition {
    pub fn new(population: Population, leaders: usize) -> Result<Self> {
        let (lo, _) = population.bounds();
        if leaders < 2 || leaders > 4 || leaders > lo.saturating_sub(leaders) {
            return Err(Error::config(format!(
                "composition with {leaders} leaders and {} agents is not allowed",
                population.label()
            )));
        }
        Ok(Self {
            population,
            leaders,
        })
    }

    /// World settings for this cell on top of `base`.
    pub fn world(&self, base: &WorldConfig) -> WorldConfig {
        let (lo, hi) = self.population.bounds();
        WorldConfig {
            min_agents: lo,
            max_agents: hi,
            leaders: self.leaders,
            ..base.clone()
        }
    }
}

/// The held-out evaluation cells: 6 and 7 agents with 2 or 3 leaders, and
/// 8 agents with 2, 3 or 4 leaders.
pub fn evaluation_compositions() -> Vec<Composition> {
    let mut cells = Vec::new();
    for (agents, leaders) in [(6, 2..=3), (7, 2..=3), (8, 2..=4)] {
        for l in leaders {
            cells.push(Composition {
                population: Population::Fixed(agents),
                leaders: l,
            });
        }
    }
    cells
}

/// The training population with its leader count.
pub fn training_composition(world: &WorldConfig) -> Composition {
    Composition {
        population: Population::Range(world.min_agents, world.max_agents),
        leaders: world.leaders,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub episodes: usize,
    pub seeds: usize,
    pub base_seed: u64,
    pub world: WorldConfig,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            episodes: DEFAULT_EVAL_EPISODES,
            seeds: DEFAULT_EVAL_SEEDS,
            base_seed: 0,
            world: WorldConfig::default(),
        }
    }
}

/// Aggregates of one cell. Return statistics are taken over the per-seed
/// means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub algorithm: MatchAlgorithm,
    pub composition: Composition,
    pub seed_means: Vec<f64>,
    pub mean_return: f64,
    pub std_return: f64,
    /// Mean fraction of targets captured.
    pub capture_rate: f64,
    /// Fraction of episodes that captured every target.
    pub win_rate: f64,
    pub groupings_per_episode: f64,
    pub blocking_pair_rate: f64,
}

pub const EVAL_CSV_HEADER: &str =
    "algo,leaders,agents,mean_return,std_return,capture_rate,blocking_pair_rate";

impl CellReport {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6}",
            self.algorithm,
            self.composition.leaders,
            self.composition.population.label(),
            self.mean_return,
            self.std_return,
            self.capture_rate,
            self.blocking_pair_rate
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cells: Vec<CellReport>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(EVAL_CSV_HEADER);
        out.push('\n');
        for c in &self.cells {
            out.push_str(&c.to_csv());
            out.push('\n');
        }
        out
    }

    pub fn cell(
        &self,
        algorithm: MatchAlgorithm,
        composition: &Composition,
    ) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.algorithm == algorithm && c.composition == *composition)
    }
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn cell_seed(base: u64, seed: usize, composition: &Composition) -> u64 {
    let (lo, hi) = composition.population.bounds();
    let mut h = base ^ 0xa076_1d64_78bd_642f;
    for v in [seed, lo, hi, composition.leaders] {
        h = (h ^ v as u64)
            .wrapping_mul(0x0000_0100_0000_01b3)
            .rotate_left(29);
    }
    h
}

/// Greedy evaluation of one cell over `settings.seeds` independent streams.
pub fn evaluate_cell(
    model: &Model,
    store: &ParameterStore,
    algorithm: MatchAlgorithm,
    composition: &Composition,
    settings: &EvalSettings,
) -> Result<CellReport> {
    if settings.seeds == 0 || settings.episodes == 0 {
        return Err(Error::config(
            "evaluation needs at least one seed and one episode",
        ));
    }
    let world = composition.world(&settings.world);
    world.validate()?;
    let options = EpisodeOptions {
        policy: Policy::Greedy,
        algorithm,
        rematch_interval: 0,
        agents: None,
    };
    let mut all = EpisodeStats {
        targets: world.targets,
        ..EpisodeStats::default()
    };
    let mut seed_means = Vec::with_capacity(settings.seeds);
    for seed in 0..settings.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(settings.base_seed, seed, composition));
        let stats = run_episodes(model, store, &world, &options, settings.episodes, &mut rng)?;
        seed_means.push(stats.mean_return());
        all.returns.extend(stats.returns);
        all.captured.extend(stats.captured);
        all.matchings += stats.matchings;
        all.unstable_matchings += stats.unstable_matchings;
    }
    let episodes = all.returns.len() as f64;
    let wins = all.captured.iter().filter(|&&c| c == world.targets).count();
    Ok(CellReport {
        algorithm,
        composition: *composition,
        mean_return: seed_means.iter().sum::<f64>() / seed_means.len() as f64,
        std_return: sample_std(&seed_means),
        seed_means,
        capture_rate: all.capture_rate(),
        win_rate: wins as f64 / episodes,
        groupings_per_episode: all.matchings as f64 / episodes,
        blocking_pair_rate: all.blocking_pair_rate(),
    })
}

/// Evaluates every cell in `compositions`, one thread per cell. Each cell
/// owns its random streams, so the report does not depend on scheduling.
pub fn evaluate_grid(
    model: &Model,
    store: &ParameterStore,
    algorithm: MatchAlgorithm,
    compositions: &[Composition],
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let cells = std::thread::scope(|scope| {
        let handles: Vec<_> = compositions
            .iter()
            .map(|c| scope.spawn(move || evaluate_cell(model, store, algorithm, c, settings)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation thread panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(EvalReport { cells })
}

/// Plain-text table with one row per (algorithm, leader count) and one
/// column per population: the training range first, then 6, 7 and 8
/// agents. Cells read `mean±std`; compositions that were not evaluated
/// render as `-`. Rows whose cells all show a zero blocking-pair rate are
/// marked `stable`.
pub fn composition_table(reports: &[EvalReport]) -> String {
    let cells: Vec<&CellReport> = reports.iter().flat_map(|r| r.cells.iter()).collect();
    let mut columns: Vec<Population> = cells
        .iter()
        .map(|c| c.composition.population)
        .filter(|p| matches!(p, Population::Range(..)))
        .collect();
    columns.sort();
    columns.dedup();
    columns.extend([6, 7, 8].map(Population::Fixed));

    let mut out = String::new();
    let _ = write!(out, "{:<14}", "algo/leaders");
    for p in &columns {
        let _ = write!(out, "{:>16}", p.label());
    }
    out.push_str("  blocking\n");

    let mut rows: Vec<(MatchAlgorithm, usize)> = cells
        .iter()
        .map(|c| (c.algorithm, c.composition.leaders))
        .collect();
    rows.sort_by_key(|(a, l)| (a.as_str(), *l));
    rows.dedup();
    for (algo, leaders) in rows {
        let _ = write!(out, "{:<14}", format!("{algo} L={leaders}"));
        let mut rates = Vec::new();
        for p in &columns {
            let hit = cells.iter().find(|c| {
                c.algorithm == algo
                    && c.composition.leaders == leaders
                    && c.composition.population == *p
            });
            match hit {
                Some(c) => {
                    rates.push(c.blocking_pair_rate);
                    let _ = write!(
                        out,
                        "{:>16}",
                        format!("{:.3}±{:.3}", c.mean_return, c.std_return)
                    );
                }
                None => {
                    let _ = write!(out, "{:>16}", "-");
                }
            }
        }
        let worst = rates.iter().copied().fold(0.0, f64::max);
        if worst == 0.0 {
            out.push_str("  stable\n");
        } else {
            let _ = writeln!(out, "  {worst:.3}");
        }
    }
    out
}
