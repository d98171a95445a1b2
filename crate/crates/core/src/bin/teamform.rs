//! Command-line front door: training, composition evaluation, offline
//! matching, self-checks and trace replay.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use teamform_core::config::KvConfig;
use teamform_core::env::trace::{read_trace, render, TraceWriter};
use teamform_core::harness::check::run_all;
use teamform_core::harness::{
    composition_table, evaluate_grid, evaluation_compositions, load_model, training_composition,
    Composition, EvalReport, EvalSettings, Population,
};
use teamform_core::matching::{
    balance_capacities, enumerate_stable_matchings, find_blocking_pairs, MatchAlgorithm,
    PreferenceMatrix,
};
use teamform_core::training::{
    init_model, run_episode, train_with_progress, EpisodeOptions, Policy, TrainConfig,
};
use teamform_core::Error;

#[derive(Debug, Parser)]
#[command(
    name = "teamform",
    version,
    about = "Bilateral team formation for cooperative multi-agent learning"
)]
struct Cli {
    /// Print the model layout and default configuration as JSON and exit.
    #[arg(long)]
    describe: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv, checkpoints and final.tfrm.
    Train(TrainArgs),
    /// Evaluate checkpoints on the composition grid.
    Eval(EvalArgs),
    /// Match a preference file offline.
    Match(MatchArgs),
    /// Run the self-check sweeps.
    Check(CheckArgs),
    /// Render an episode trace as text frames.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    algo: Option<MatchAlgorithm>,
    /// Fixed training population.
    #[arg(long)]
    agents: Option<usize>,
    #[arg(long)]
    leaders: Option<usize>,
    /// Greedy episodes per evaluation.
    #[arg(long)]
    episodes: Option<usize>,
    /// Environment steps to collect.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Suppress per-evaluation progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Parameters to evaluate with `--algo`; a fresh model when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "oom")]
    algo: MatchAlgorithm,
    /// Evaluate this checkpoint with the stable matcher (pairs with `--som`).
    #[arg(long, conflicts_with = "checkpoint")]
    oom: Option<PathBuf>,
    /// Evaluate this checkpoint with the greedy matcher (pairs with `--oom`).
    #[arg(long, conflicts_with = "checkpoint")]
    som: Option<PathBuf>,
    /// World settings shared by every cell.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Episodes per seed and cell.
    #[arg(long, default_value_t = teamform_core::harness::DEFAULT_EVAL_EPISODES)]
    episodes: usize,
    #[arg(long, default_value_t = teamform_core::harness::DEFAULT_EVAL_SEEDS)]
    seeds: usize,
    /// Evaluate a single composition instead of the grid.
    #[arg(long, requires = "leaders")]
    agents: Option<usize>,
    #[arg(long, requires = "agents")]
    leaders: Option<usize>,
    /// Skip the training-population column.
    #[arg(long)]
    no_training_column: bool,
    /// Also record one greedy episode of the first cell as a trace.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MatchArgs {
    /// Preference record `{"agents", "leaders", "scores"}`.
    input: PathBuf,
    #[arg(long, visible_alias = "algo", default_value = "oom")]
    algorithm: MatchAlgorithm,
    /// Override the leader count of the record.
    #[arg(long)]
    leaders: Option<usize>,
    /// Verify the result against the brute-force stable set.
    #[arg(long)]
    certify: bool,
}

#[derive(Debug, Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    /// Line-delimited trace written by `eval --trace`.
    input: PathBuf,
}

/// Failures mapped to exit codes: bad input is a usage error.
enum Failure {
    Usage(String),
    Check(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Parse(_) | Error::Json(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = if cli.describe {
        describe()
    } else {
        match cli.command {
            Some(Command::Train(a)) => train(a),
            Some(Command::Eval(a)) => eval(a),
            Some(Command::Match(a)) => run_match(a),
            Some(Command::Check(a)) => check(a),
            Some(Command::Replay(a)) => replay(a),
            None => Err(Failure::Usage(
                "a subcommand is required (see --help)".into(),
            )),
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Check(m)) | Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn describe() -> Result<(), Failure> {
    let (model, store) = init_model(0)?;
    let params: Vec<_> = store
        .describe()
        .into_iter()
        .map(|(name, shape)| json!({ "name": name, "shape": shape }))
        .collect();
    let out = json!({
        "model": model.config,
        "parameters": params,
        "scalars": store.scalar_count(),
        "train_defaults": TrainConfig::default(),
        "eval_compositions": evaluation_compositions(),
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&out).map_err(Error::from)?
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &a.config {
        let mut kv = KvConfig::load(path)?;
        cfg.apply(&mut kv)?;
        kv.finish()?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(algo) = a.algo {
        cfg.algorithm = algo;
    }
    if let Some(n) = a.agents {
        cfg.world.min_agents = n;
        cfg.world.max_agents = n;
    }
    if let Some(l) = a.leaders {
        cfg.world.leaders = l;
    }
    if let Some(e) = a.episodes {
        cfg.eval_episodes = e;
    }
    if let Some(s) = a.steps {
        cfg.total_steps = s;
    }
    cfg.validate()?;
    let quiet = a.quiet;
    let outcome = train_with_progress(&cfg, Some(&a.out), |row| {
        if !quiet {
            eprintln!(
                "step {:>7}  episodes {:>5}  eps {:.3}  return {:>8.4}  loss {:.5}",
                row.step, row.episodes, row.epsilon, row.mean_return, row.total_loss
            );
        }
    })?;
    println!(
        "trained {} steps over {} episodes ({} updates); parameters in {}",
        outcome.env_steps,
        outcome.episodes,
        outcome.learner.updates(),
        outcome
            .checkpoint
            .as_deref()
            .map(Path::display)
            .map(|d| d.to_string())
            .unwrap_or_default()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let mut settings = EvalSettings {
        episodes: a.episodes,
        seeds: a.seeds,
        base_seed: a.seed,
        ..EvalSettings::default()
    };
    if let Some(path) = &a.config {
        let mut kv = KvConfig::load(path)?;
        settings.world.apply(&mut kv)?;
        kv.finish()?;
    }
    let compositions = match (a.agents, a.leaders) {
        (Some(n), Some(l)) => vec![Composition::new(Population::Fixed(n), l)?],
        _ => {
            let mut cells = Vec::new();
            if !a.no_training_column {
                cells.push(training_composition(&settings.world));
            }
            cells.extend(evaluation_compositions());
            cells
        }
    };

    let mut runs: Vec<(MatchAlgorithm, Option<PathBuf>)> = Vec::new();
    if a.oom.is_some() || a.som.is_some() {
        runs.extend(a.oom.map(|p| (MatchAlgorithm::Oom, Some(p))));
        runs.extend(a.som.map(|p| (MatchAlgorithm::Som, Some(p))));
    } else {
        runs.push((a.algo, a.checkpoint.clone()));
    }

    let mut reports = Vec::new();
    for (algo, path) in &runs {
        let (model, store) = match path {
            Some(p) => load_model(p)?,
            None => init_model(a.seed)?,
        };
        if let (Some(trace_path), Some(first)) = (&a.trace, compositions.first()) {
            let options = EpisodeOptions {
                policy: Policy::Greedy,
                algorithm: *algo,
                rematch_interval: 0,
                agents: None,
            };
            let mut records = Vec::new();
            let world = first.world(&settings.world);
            run_episode(
                &model,
                &store,
                &world,
                &options,
                0,
                &mut ChaCha8Rng::seed_from_u64(a.seed),
                Some(&mut records),
            )?;
            let mut w = TraceWriter::new(fs::File::create(trace_path)?);
            for r in &records {
                w.write(r)?;
            }
        }
        reports.push(evaluate_grid(
            &model,
            &store,
            *algo,
            &compositions,
            &settings,
        )?);
    }

    let merged = EvalReport {
        cells: reports.iter().flat_map(|r| r.cells.clone()).collect(),
    };
    let table = composition_table(&reports);
    print!("{table}");
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("eval.csv"), merged.to_csv())?;
        fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&merged).map_err(Error::from)?,
        )?;
        fs::write(dir.join("table.txt"), &table)?;
    }
    Ok(())
}

fn run_match(a: MatchArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&a.input)?;
    let prefs = PreferenceMatrix::from_json_with_leaders(&text, a.leaders)?;
    let plan = balance_capacities(prefs.leaders(), prefs.followers())?;
    let grouping = a.algorithm.run(&prefs, &plan)?;
    let blocking = find_blocking_pairs(&grouping, &prefs, &plan);
    let mut out = json!({
        "algorithm": a.algorithm,
        "capacities": plan.capacities(),
        "teams": grouping.teams,
        "blocking_pairs": blocking,
    });
    if a.certify {
        let stable = enumerate_stable_matchings(&prefs, &plan)?;
        let certified = blocking.is_empty() && stable.contains(&grouping);
        out["certified"] = json!(certified);
        out["stable_matchings"] = json!(stable.len());
        println!(
            "{}",
            serde_json::to_string_pretty(&out).map_err(Error::from)?
        );
        if !certified {
            return Err(Failure::Check("grouping is not stable".into()));
        }
        return Ok(());
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&out).map_err(Error::from)?
    );
    Ok(())
}

fn check(a: CheckArgs) -> Result<(), Failure> {
    let suite = run_all(a.seed)?;
    for r in &suite.results {
        println!(
            "{} {:<24} {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
    }
    println!(
        "{}/{} checks passed",
        suite.pass_count(),
        suite.results.len()
    );
    if suite.passed() {
        Ok(())
    } else {
        Err(Failure::Check("self-checks failed".into()))
    }
}

fn replay(a: ReplayArgs) -> Result<(), Failure> {
    let records = read_trace(BufReader::new(fs::File::open(&a.input)?))?;
    print!("{}", render(&records)?);
    Ok(())
}
