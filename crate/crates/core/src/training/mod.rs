//! Episode collection, replay and the optimisation loop.
//!
//! Each optimiser step samples whole episodes, unrolls the recurrent
//! utilities along them and regresses the mixed value (and its in/out
//! counterpart) onto double-Q targets from a periodically copied target
//! network.

mod collect;
mod config;
mod learner;
mod replay;

pub use collect::{
    match_survivors, run_episode, run_episodes, select_actions, EpisodeOptions, EpisodeStats,
    MatchEvent, Policy,
};
pub use config::TrainConfig;
pub use learner::{online_pass, target_values, EpisodeLoss, Learner, OnlinePass};
pub use replay::{Episode, ReplayBuffer, Transition};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::checkpoint;
use crate::env::{ACTION_COUNT, FEATURE_DIM};
use crate::error::Result;
use crate::losses::LossReport;
use crate::matching::MatchAlgorithm;
use crate::nets::{Model, ModelConfig};

pub const METRICS_HEADER: &str =
    "step,episodes,epsilon,mean_return,l_q,l_aux,l_sd,total_loss,match_algo,seed";

/// One line of the metrics log, written at every evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub episodes: usize,
    pub epsilon: f64,
    pub mean_return: f64,
    pub l_q: f64,
    pub l_aux: f64,
    pub l_sd: f64,
    pub total_loss: f64,
    pub match_algo: MatchAlgorithm,
    pub seed: u64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
            self.step,
            self.episodes,
            self.epsilon,
            self.mean_return,
            self.l_q,
            self.l_aux,
            self.l_sd,
            self.total_loss,
            self.match_algo,
            self.seed
        )
    }
}

/// Independent random streams derived from the run seed.
struct Streams {
    collect: ChaCha8Rng,
    replay: ChaCha8Rng,
    masks: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let mut s = ChaCha8Rng::seed_from_u64(seed);
        Self {
            collect: ChaCha8Rng::from_rng(&mut s).expect("chacha"),
            replay: ChaCha8Rng::from_rng(&mut s).expect("chacha"),
            masks: ChaCha8Rng::from_rng(&mut s).expect("chacha"),
        }
    }
}

/// Model and parameter store for `seed`, identical for every run with that
/// seed.
pub fn init_model(seed: u64) -> Result<(Model, crate::diffcore::ParameterStore)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_1a7e_u64);
    Model::new(ModelConfig::new(FEATURE_DIM, ACTION_COUNT), &mut rng)
}

/// Evaluation stream for the checkpoint taken at `step`.
fn eval_rng(seed: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ step as u64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub learner: Learner,
    pub metrics: Vec<MetricsRow>,
    pub env_steps: usize,
    pub episodes: usize,
    pub last_loss: Option<LossReport>,
    /// Final parameter file, when an output directory was given.
    pub checkpoint: Option<PathBuf>,
}

/// Output files of a training run.
struct RunFiles {
    dir: PathBuf,
    metrics: fs::File,
}

impl RunFiles {
    fn create(dir: &Path, config: &TrainConfig) -> Result<Self> {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("config.json"),
            serde_json::to_string_pretty(config)?,
        )?;
        let mut metrics = fs::File::create(dir.join("metrics.csv"))?;
        writeln!(metrics, "{METRICS_HEADER}")?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics,
        })
    }
}

/// Runs a full training job. With `out`, writes `config.json`,
/// `metrics.csv`, a checkpoint per evaluation and `final.tfrm`; a NaN loss
/// leaves `diagnostic.tfrm` behind before the error is returned.
pub fn train(config: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    train_with_progress(config, out, |_| {})
}

pub fn train_with_progress(
    config: &TrainConfig,
    out: Option<&Path>,
    mut progress: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut files = out.map(|d| RunFiles::create(d, config)).transpose()?;
    let (model, store) = init_model(config.seed)?;
    let mut learner = Learner::new(
        model,
        store,
        config.gamma,
        config.lambda,
        config.learning_rate,
        config.grad_clip,
    );
    let mut streams = Streams::new(config.seed);
    let mut buffer = ReplayBuffer::new(config.buffer_capacity)?;
    let (mut env_steps, mut episodes) = (0usize, 0usize);
    let mut next_eval = config.eval_interval;
    let mut last_loss: Option<LossReport> = None;
    let mut metrics = Vec::new();

    while env_steps < config.total_steps {
        let epsilon = config.epsilon_at(env_steps);
        let options = EpisodeOptions {
            policy: Policy::EpsilonGreedy(epsilon),
            algorithm: config.algorithm,
            rematch_interval: config.rematch_interval,
            agents: None,
        };
        let ep = run_episode(
            &learner.model,
            &learner.online,
            &config.world,
            &options,
            episodes as u64,
            &mut streams.collect,
            None,
        )?;
        env_steps += ep.len();
        episodes += 1;
        buffer.push(ep);

        if buffer.len() >= config.batch_size {
            let batch = buffer.sample(config.batch_size, &mut streams.replay)?;
            match learner.update(&batch, &mut streams.masks) {
                Ok(report) => last_loss = Some(report),
                Err(e) => {
                    if let Some(f) = &files {
                        checkpoint::save(&learner.online, f.dir.join("diagnostic.tfrm"))?;
                    }
                    return Err(e);
                }
            }
            if learner.updates() % config.target_sync == 0 {
                learner.sync_target()?;
            }
        }

        if env_steps >= next_eval || env_steps >= config.total_steps {
            while next_eval <= env_steps {
                next_eval += config.eval_interval;
            }
            let stats = evaluate(&learner, config, env_steps)?;
            let loss = last_loss.unwrap_or(LossReport::new(0.0, 0.0, 0.0, config.lambda)?);
            let row = MetricsRow {
                step: env_steps,
                episodes,
                epsilon,
                mean_return: stats.mean_return(),
                l_q: loss.l_q,
                l_aux: loss.l_aux,
                l_sd: loss.l_sd,
                total_loss: loss.total,
                match_algo: config.algorithm,
                seed: config.seed,
            };
            if let Some(f) = files.as_mut() {
                writeln!(f.metrics, "{}", row.to_csv())?;
                f.metrics.flush()?;
                checkpoint::save(
                    &learner.online,
                    f.dir.join(format!("checkpoint_{env_steps:07}.tfrm")),
                )?;
            }
            progress(&row);
            metrics.push(row);
        }
    }

    let checkpoint = match &files {
        Some(f) => {
            let path = f.dir.join("final.tfrm");
            checkpoint::save(&learner.online, &path)?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutcome {
        learner,
        metrics,
        env_steps,
        episodes,
        last_loss,
        checkpoint,
    })
}

fn evaluate(learner: &Learner, config: &TrainConfig, step: usize) -> Result<EpisodeStats> {
    let options = EpisodeOptions {
        policy: Policy::Greedy,
        algorithm: config.algorithm,
        rematch_interval: config.rematch_interval,
        agents: None,
    };
    run_episodes(
        &learner.model,
        &learner.online,
        &config.world,
        &options,
        config.eval_episodes,
        &mut eval_rng(config.seed, step),
    )
}
