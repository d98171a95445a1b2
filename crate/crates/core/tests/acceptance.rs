//! Acceptance suite: one PASS/FAIL line per criterion, with the measured
//! quantity and wall time. Tolerances and budgets are fixed constants.
//!
//! The learning and generalisation criteria train two 50k-step models, so a
//! full run takes tens of minutes on one core.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use teamform_core::diffcore::{Graph, ParameterStore};
use teamform_core::env::WorldConfig;
use teamform_core::harness::check::{
    greedy_consistency, loss_gradient_sweep, mask_sweep, monotonicity_sweep, oom_order_invariance,
    som_affine_invariance, som_instability_fixture, stability_sweep, GRADIENT_TOLERANCE,
};
use teamform_core::harness::{
    composition_table, evaluate_cell, evaluate_grid, evaluation_compositions, training_composition,
    EvalReport, EvalSettings,
};
use teamform_core::losses::{combine, LossReport};
use teamform_core::matching::{balance_capacities, find_blocking_pairs, som_match, MatchAlgorithm};
use teamform_core::nets::Model;
use teamform_core::training::{
    init_model, run_episodes, train_with_progress, EpisodeOptions, Policy, TrainConfig,
};

const SEED: u64 = 0;
const BASELINE_SEED: u64 = 20_240;
const BASELINE_EPISODES: usize = 1000;
const LEARNING_MARGIN_SE: f64 = 3.0;
const IDENTITY_TOLERANCE: f64 = 1e-12;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

struct Ledger {
    failures: usize,
}

impl Ledger {
    fn run(&mut self, id: usize, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let out = f();
        let elapsed = start.elapsed();
        let in_budget = elapsed <= budget;
        let passed = out.passed && in_budget;
        if !passed {
            self.failures += 1;
        }
        let budget_note = if in_budget { "" } else { " (over budget)" };
        println!(
            "{} {id:>2} {name:<28} {} [{:.1}s / {}s{budget_note}]",
            if passed { "PASS" } else { "FAIL" },
            out.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
}

fn rng(stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(SEED ^ (stream << 32))
}

/// Trained checkpoints shared by the learning, generalisation and
/// determinism criteria.
struct Trained {
    model: Model,
    initial: ParameterStore,
    oom: Option<ParameterStore>,
    som: Option<ParameterStore>,
}

fn progress(tag: &'static str) -> impl FnMut(&teamform_core::training::MetricsRow) {
    move |row| {
        eprintln!(
            "    [{tag}] step {:>6} return {:>8.4} loss {:>9.5}",
            row.step, row.mean_return, row.total_loss
        )
    }
}

fn train_default(algorithm: MatchAlgorithm) -> teamform_core::Result<ParameterStore> {
    let config = TrainConfig {
        algorithm,
        seed: SEED,
        ..TrainConfig::default()
    };
    let tag = if algorithm == MatchAlgorithm::Oom {
        "oom"
    } else {
        "som"
    };
    Ok(train_with_progress(&config, None, progress(tag))?
        .learner
        .online)
}

fn stability(l: &mut Ledger) {
    l.run(
        1,
        "oom stability",
        Duration::from_secs(10),
        || match stability_sweep(1000, &mut rng(1)) {
            Ok(s) => Outcome::new(
                s.oom_ok(),
                format!(
                    "{} instances: {} with blocking pairs, {} outside the stable set",
                    s.instances, s.oom_unstable, s.oom_outside_stable_set
                ),
            ),
            Err(e) => Outcome::new(false, e.to_string()),
        },
    );
}

fn som_instability(l: &mut Ledger) {
    l.run(2, "som instability", Duration::from_secs(10), || {
        let fixture = som_instability_fixture();
        let plan = match balance_capacities(2, 2) {
            Ok(p) => p,
            Err(e) => return Outcome::new(false, e.to_string()),
        };
        let pairs = match som_match(&fixture, &plan) {
            Ok(g) => find_blocking_pairs(&g, &fixture, &plan),
            Err(e) => return Outcome::new(false, e.to_string()),
        };
        // same stream as criterion 1, so the same 1000 instances
        match stability_sweep(1000, &mut rng(1)) {
            Ok(s) => Outcome::new(
                !pairs.is_empty() && s.som_blocking_rate() > 0.0,
                format!(
                    "fixture blocking pairs {pairs:?}; aggregate rate {:.3} ({} pairs over {} instances)",
                    s.som_blocking_rate(),
                    s.som_blocking_pairs,
                    s.instances
                ),
            ),
            Err(e) => Outcome::new(false, e.to_string()),
        }
    });
}

fn invariances(l: &mut Ledger) {
    l.run(3, "matching invariances", Duration::from_secs(10), || {
        let mut r = rng(3);
        match (
            oom_order_invariance(500, &mut r),
            som_affine_invariance(500, &mut r),
        ) {
            (Ok(a), Ok(b)) => Outcome::new(
                a == 0 && b == 0,
                format!("oom order changes {a}/500, som affine changes {b}/500"),
            ),
            (Err(e), _) | (_, Err(e)) => Outcome::new(false, e.to_string()),
        }
    });
}

fn monotonic_mixing(l: &mut Ledger) {
    l.run(4, "monotonic mixing", Duration::from_secs(30), || {
        let mut r = rng(4);
        match (
            monotonicity_sweep(1000, &mut r),
            greedy_consistency(10, &mut r),
        ) {
            (Ok(m), Ok(g)) => Outcome::new(
                m.passed() && g.failures == 0,
                format!(
                    "min partial {:.3e} over {}; greedy vs exhaustive {}/{} disagree",
                    m.min_partial, m.instances, g.failures, g.instances
                ),
            ),
            (Err(e), _) | (_, Err(e)) => Outcome::new(false, e.to_string()),
        }
    });
}

fn gradients(l: &mut Ledger) {
    l.run(
        5,
        "loss gradients",
        Duration::from_secs(120),
        || match loss_gradient_sweep(20, 6, &mut rng(5)) {
            Ok(s) => {
                let worst = s
                    .worst
                    .iter()
                    .map(|(t, e)| format!("{} {e:.2e}", t.name()))
                    .collect::<Vec<_>>()
                    .join(", ");
                Outcome::new(
                    s.passed(),
                    format!(
                        "{} instances, worst relative error {worst} (< {GRADIENT_TOLERANCE:e})",
                        s.instances
                    ),
                )
            }
            Err(e) => Outcome::new(false, e.to_string()),
        },
    );
}

fn masks(l: &mut Ledger) {
    l.run(
        6,
        "mask contract",
        Duration::from_secs(5),
        || match mask_sweep(1000, &mut rng(6)) {
            Ok(f) => Outcome::new(f == 0, format!("{f}/1000 draws violate an invariant")),
            Err(e) => Outcome::new(false, e.to_string()),
        },
    );
}

fn learning(l: &mut Ledger, trained: &mut Trained) {
    l.run(7, "learning smoke", Duration::from_secs(30 * 60), || {
        let world = WorldConfig::default();
        let random = EpisodeOptions {
            policy: Policy::Random,
            algorithm: MatchAlgorithm::Oom,
            rematch_interval: 0,
            agents: None,
        };
        let baseline = match run_episodes(
            &trained.model,
            &trained.initial,
            &world,
            &random,
            BASELINE_EPISODES,
            &mut ChaCha8Rng::seed_from_u64(BASELINE_SEED),
        ) {
            Ok(s) => s,
            Err(e) => return Outcome::new(false, e.to_string()),
        };
        let store = match train_default(MatchAlgorithm::Oom) {
            Ok(s) => s,
            Err(e) => return Outcome::new(false, format!("training failed: {e}")),
        };
        let settings = EvalSettings {
            episodes: BASELINE_EPISODES / 5,
            seeds: 5,
            base_seed: SEED,
            world: world.clone(),
        };
        let cell = evaluate_cell(
            &trained.model,
            &store,
            MatchAlgorithm::Oom,
            &training_composition(&world),
            &settings,
        );
        trained.oom = Some(store);
        let cell = match cell {
            Ok(c) => c,
            Err(e) => return Outcome::new(false, e.to_string()),
        };
        let threshold = baseline.mean_return() + LEARNING_MARGIN_SE * baseline.standard_error();
        Outcome::new(
            cell.mean_return >= threshold,
            format!(
                "greedy {:.4} over {} episodes vs random {:.4} ± {:.4} (SE, {} episodes); threshold {:.4}",
                cell.mean_return,
                settings.episodes * settings.seeds,
                baseline.mean_return(),
                baseline.standard_error(),
                BASELINE_EPISODES,
                threshold
            ),
        )
    });
}

fn generalisation(l: &mut Ledger, trained: &mut Trained) {
    let start = Instant::now();
    match train_default(MatchAlgorithm::Som) {
        Ok(s) => trained.som = Some(s),
        Err(e) => eprintln!("    som training failed: {e}"),
    }
    eprintln!(
        "    som checkpoint trained in {:.0}s",
        start.elapsed().as_secs_f64()
    );

    l.run(8, "generalisation grid", Duration::from_secs(15 * 60), || {
        let (Some(oom), Some(som)) = (&trained.oom, &trained.som) else {
            return Outcome::new(false, "missing oom or som checkpoint");
        };
        let world = WorldConfig::default();
        let mut cells = vec![training_composition(&world)];
        cells.extend(evaluation_compositions());
        let settings = EvalSettings {
            base_seed: SEED,
            world,
            ..EvalSettings::default()
        };
        let reports = match (
            evaluate_grid(&trained.model, oom, MatchAlgorithm::Oom, &cells, &settings),
            evaluate_grid(&trained.model, som, MatchAlgorithm::Som, &cells, &settings),
        ) {
            (Ok(a), Ok(b)) => [a, b],
            (Err(e), _) | (_, Err(e)) => return Outcome::new(false, e.to_string()),
        };
        for line in composition_table(&reports).lines() {
            eprintln!("    {line}");
        }
        let [oom_report, som_report]: &[EvalReport; 2] = &reports;
        let complete = cells.iter().all(|c| {
            [(oom_report, MatchAlgorithm::Oom), (som_report, MatchAlgorithm::Som)]
                .iter()
                .all(|(r, a)| r.cell(*a, c).is_some_and(|x| x.seed_means.len() == settings.seeds))
        });
        let oom_stable = oom_report.cells.iter().all(|c| c.blocking_pair_rate == 0.0);
        let held_out = evaluation_compositions();
        let oom_ahead = held_out
            .iter()
            .filter(|c| {
                match (oom_report.cell(MatchAlgorithm::Oom, c), som_report.cell(MatchAlgorithm::Som, c)) {
                    (Some(a), Some(b)) => a.mean_return > b.mean_return,
                    _ => false,
                }
            })
            .count();
        let worst_som = som_report
            .cells
            .iter()
            .map(|c| c.blocking_pair_rate)
            .fold(0.0, f64::max);
        Outcome::new(
            complete && oom_stable,
            format!(
                "{} cells x {} seeds; oom blocking rate {}; som worst {:.3}; oom ahead in {}/{} held-out cells",
                cells.len(),
                settings.seeds,
                if oom_stable { "0 everywhere" } else { "NONZERO" },
                worst_som,
                oom_ahead,
                held_out.len()
            ),
        )
    });
}

fn loss_arithmetic(l: &mut Ledger) {
    l.run(9, "loss arithmetic", Duration::from_secs(1), || {
        let mut r = rng(9);
        let mut worst: f64 = 0.0;
        let mut boundaries = true;
        for _ in 0..1000 {
            let (q, aux, sd) = (r.gen_range(0.0..10.0), r.gen_range(0.0..10.0), r.gen_range(-20.0..20.0));
            let lambda = r.gen_range(0.0..=1.0);
            let report = match LossReport::new(q, aux, sd, lambda) {
                Ok(rep) => rep,
                Err(e) => return Outcome::new(false, e.to_string()),
            };
            worst = worst.max(report.identity_error());
            let mut g = Graph::frozen();
            let vars = [q, aux, sd].map(|v| g.constant(teamform_core::diffcore::Tensor::scalar(v)));
            if let Ok(t) = combine(&mut g, vars[0], vars[1], vars[2], lambda) {
                worst = worst.max((g.value(t).item() - report.total).abs());
            } else {
                boundaries = false;
            }
            let zero = LossReport::new(q, aux, sd, 0.0);
            let one = LossReport::new(q, aux, sd, 1.0);
            boundaries &= zero.is_ok_and(|z| z.total == q + sd)
                && one.is_ok_and(|o| o.total == aux + sd);
        }
        let rejects = LossReport::new(1.0, 1.0, 0.0, 1.5).is_err() && LossReport::new(1.0, 1.0, 0.0, -0.1).is_err();
        Outcome::new(
            worst <= IDENTITY_TOLERANCE && boundaries && rejects,
            format!(
                "max identity error {worst:.1e}; lambda 0/1 collapse {}; out-of-range lambda rejected {rejects}",
                if boundaries { "exact" } else { "WRONG" }
            ),
        )
    });
}

fn determinism(l: &mut Ledger, trained: &Trained) {
    l.run(10, "determinism", Duration::from_secs(15 * 60), || {
        let config = TrainConfig {
            total_steps: 5000,
            eval_interval: 1000,
            eval_episodes: 8,
            seed: 7,
            ..TrainConfig::default()
        };
        let dirs = match (tempfile::tempdir(), tempfile::tempdir()) {
            (Ok(a), Ok(b)) => [a, b],
            _ => return Outcome::new(false, "cannot create run directories"),
        };
        let mut runs = Vec::new();
        for d in &dirs {
            match train_with_progress(&config, Some(d.path()), |_| {}) {
                Ok(o) => runs.push(o),
                Err(e) => return Outcome::new(false, e.to_string()),
            }
        }
        let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join(f)).unwrap_or_default();
        let files_equal = ["metrics.csv", "final.tfrm", "config.json"]
            .iter()
            .all(|f| read(&dirs[0], f) == read(&dirs[1], f) && !read(&dirs[0], f).is_empty());
        let train_equal = runs[0].metrics == runs[1].metrics
            && runs[0].learner.online.values_bit_equal(&runs[1].learner.online)
            && files_equal;

        let Some(store) = trained.oom.as_ref() else {
            return Outcome::new(false, "no trained checkpoint to evaluate");
        };
        let settings = EvalSettings {
            episodes: 50,
            seeds: 3,
            base_seed: 11,
            world: WorldConfig::default(),
        };
        let cells = evaluation_compositions();
        let evals: Vec<_> = (0..2)
            .map(|_| evaluate_grid(&trained.model, store, MatchAlgorithm::Oom, &cells, &settings))
            .collect();
        let eval_equal = match (&evals[0], &evals[1]) {
            (Ok(a), Ok(b)) => a == b && a.to_csv() == b.to_csv(),
            _ => false,
        };
        Outcome::new(
            train_equal && eval_equal,
            format!(
                "train metrics/checkpoint identical {train_equal} ({} rows, {} steps); eval grid identical {eval_equal}",
                runs[0].metrics.len(),
                config.total_steps
            ),
        )
    });
}

fn main() -> ExitCode {
    println!("acceptance suite, seed {SEED}");
    let mut ledger = Ledger { failures: 0 };
    let (model, initial) = match init_model(SEED) {
        Ok(pair) => pair,
        Err(e) => {
            eprintln!("cannot build the model: {e}");
            return ExitCode::FAILURE;
        }
    };
    let mut trained = Trained {
        model,
        initial,
        oom: None,
        som: None,
    };
    stability(&mut ledger);
    som_instability(&mut ledger);
    invariances(&mut ledger);
    monotonic_mixing(&mut ledger);
    gradients(&mut ledger);
    masks(&mut ledger);
    loss_arithmetic(&mut ledger);
    learning(&mut ledger, &mut trained);
    generalisation(&mut ledger, &mut trained);
    determinism(&mut ledger, &trained);
    println!("{}/10 criteria passed", 10 - ledger.failures);
    if ledger.failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
