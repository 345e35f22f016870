//! Experiment orchestration: seeded training and evaluation runs, metrics, significance
//! tests, hyperparameter search and exports.

mod metrics;
mod report;
mod search;
mod stats;

pub use metrics::{compute_metrics, format_triple, time_to_threshold, MetricsRow, Stat};
pub use report::{read_csv, read_jsonl, trajectory_svg, write_csv, write_jsonl};
pub use search::{
    halving_search, sample_candidates, successive_halving, training_evaluator, with_overrides, Candidate,
    HalvingConfig, ParamSpec, Rung, SearchResult, SearchSpace, SearchSpec,
};
pub use stats::{ln_gamma, regularized_incomplete_beta, student_t_two_sided, welch_t_test, WelchResult};

use std::collections::{HashSet, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::HandlerKind;
use crate::agents::{build_agent, load_agent, preset, Agent, AgentCheckpoint, AgentHyperparams, Algorithm, StepRecord};
use crate::env::{Env, EnvConfig, ObstacleLayout, TrajectoryStep};
use crate::error::{Error, Result};
use crate::geometry::{Obstacle, Point2};
use crate::intervals::IntervalSet;
use crate::rng::{stream, Role};

/// Steps between metric snapshots.
pub const DEFAULT_ITERATION_STEPS: u64 = 2_000;

fn default_iteration_steps() -> u64 {
    DEFAULT_ITERATION_STEPS
}

fn default_env_seeds() -> Vec<u64> {
    (0..40).collect()
}

/// Stop training once enough of the most recent episodes were solved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub window: usize,
    pub solved_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub handler: HandlerKind,
    /// Falls back to the shipped preset for the configured obstacle setting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyperparams: Option<AgentHyperparams>,
    pub agent_seeds: Vec<u64>,
    /// Evaluation environment seeds.
    #[serde(default = "default_env_seeds")]
    pub env_seeds: Vec<u64>,
    pub total_steps: u64,
    #[serde(default = "default_iteration_steps")]
    pub iteration_steps: u64,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub early_stop: Option<EarlyStop>,
}

fn distinct(name: &str, seeds: &[u64]) -> Result<()> {
    let mut seen = HashSet::new();
    if let Some(dup) = seeds.iter().find(|s| !seen.insert(**s)) {
        return Err(Error::InvalidArgument(format!("duplicate {name} {dup}")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn new(algorithm: Algorithm, handler: HandlerKind, agent_seeds: Vec<u64>, total_steps: u64) -> Self {
        Self {
            algorithm,
            handler,
            hyperparams: None,
            agent_seeds,
            env_seeds: default_env_seeds(),
            total_steps,
            iteration_steps: DEFAULT_ITERATION_STEPS,
            env: EnvConfig::default(),
            early_stop: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.algorithm.check_handler(self.handler)?;
        if self.agent_seeds.is_empty() {
            return Err(Error::InvalidArgument("at least one agent seed is required".into()));
        }
        distinct("agent seed", &self.agent_seeds)?;
        distinct("env seed", &self.env_seeds)?;
        if self.total_steps == 0 || self.iteration_steps == 0 {
            return Err(Error::InvalidArgument(
                "total_steps and iteration_steps must be > 0".into(),
            ));
        }
        if let Some(es) = self.early_stop {
            if es.window == 0 || !(0.0..=1.0).contains(&es.solved_fraction) {
                return Err(Error::InvalidArgument(
                    "early_stop needs window > 0 and a fraction in [0, 1]".into(),
                ));
            }
        }
        self.env.validate()?;
        let hp = self.resolved_hyperparams()?;
        if hp.algorithm() != self.algorithm {
            return Err(Error::InvalidArgument(format!(
                "hyperparameters are for {}, config says {}",
                hp.algorithm(),
                self.algorithm
            )));
        }
        hp.validate()
    }

    pub fn resolved_hyperparams(&self) -> Result<AgentHyperparams> {
        match &self.hyperparams {
            Some(hp) => Ok(hp.clone()),
            None => preset(self.algorithm, self.handler, self.env.obstacles != ObstacleLayout::None),
        }
    }
}

/// One finished episode. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub algorithm: String,
    pub handler: String,
    pub agent_seed: u64,
    pub env_seed: u64,
    #[serde(rename = "return")]
    pub episode_return: f64,
    /// Steps to the goal, or the step cap `T` for unsolved episodes.
    pub steps: usize,
    pub solved: bool,
    pub collided: bool,
    pub allowed_fraction: f64,
    pub interval_count_mean: f64,
    pub interval_len_mean: f64,
    pub interval_len_min: f64,
    pub interval_len_max: f64,
    pub interval_len_var: f64,
}

/// Accumulates the per-step allowed-set statistics of one episode.
#[derive(Debug, Default)]
struct EpisodeTally {
    reward: f64,
    steps: usize,
    fraction_sum: f64,
    count_sum: usize,
    lengths: Vec<f64>,
}

impl EpisodeTally {
    fn allowed(&mut self, allowed: &IntervalSet, width: f64) {
        self.fraction_sum += allowed.total_length() / width;
        self.count_sum += allowed.len();
        self.lengths.extend(allowed.iter().map(|i| i.length()));
    }

    fn finish(
        self,
        algorithm: Algorithm,
        handler: HandlerKind,
        agent_seed: u64,
        env_seed: u64,
        env: &Env,
    ) -> EpisodeRow {
        let st = env.state();
        let n = self.steps.max(1) as f64;
        let (mean, min, max, var) = if self.lengths.is_empty() {
            (0.0, 0.0, 0.0, 0.0)
        } else {
            let k = self.lengths.len() as f64;
            let mean = self.lengths.iter().sum::<f64>() / k;
            let var = self.lengths.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / k;
            let min = self.lengths.iter().copied().fold(f64::INFINITY, f64::min);
            let max = self.lengths.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (mean, min, max, var)
        };
        EpisodeRow {
            algorithm: algorithm.name().to_string(),
            handler: handler.name().to_string(),
            agent_seed,
            env_seed,
            episode_return: self.reward,
            steps: if st.goal_reached {
                self.steps
            } else {
                env.config().max_steps
            },
            solved: st.goal_reached,
            collided: st.collided,
            allowed_fraction: self.fraction_sum / n,
            interval_count_mean: self.count_sum as f64 / n,
            interval_len_mean: mean,
            interval_len_min: min,
            interval_len_max: max,
            interval_len_var: var,
        }
    }
}

/// Metrics of the episodes that ended inside one training iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub agent_seed: u64,
    pub iteration: u64,
    /// Environment steps at the iteration boundary.
    pub steps: u64,
    pub episodes: usize,
    pub solved_fraction: f64,
    pub return_mean: f64,
    pub collisions: usize,
}

impl Snapshot {
    fn from_window(agent_seed: u64, iteration: u64, steps: u64, rows: &[EpisodeRow]) -> Self {
        let n = rows.len();
        let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
        Self {
            agent_seed,
            iteration,
            steps,
            episodes: n,
            solved_fraction: frac(rows.iter().filter(|r| r.solved).count()),
            return_mean: if n == 0 {
                0.0
            } else {
                rows.iter().map(|r| r.episode_return).sum::<f64>() / n as f64
            },
            collisions: rows.iter().filter(|r| r.collided).count(),
        }
    }
}

/// Output of one agent seed's training run.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub agent_seed: u64,
    pub episodes: Vec<EpisodeRow>,
    pub snapshots: Vec<Snapshot>,
    /// Environment steps actually taken.
    pub steps: u64,
    /// Collisions forced by an empty allowed set.
    pub dead_end_collisions: usize,
    pub early_stopped: bool,
    pub checkpoint: AgentCheckpoint,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingReport {
    /// Successful runs in agent-seed order.
    pub runs: Vec<SeedRun>,
    /// Seeds whose run failed, with the error message.
    pub failures: Vec<(u64, String)>,
}

impl TrainingReport {
    pub fn episodes(&self) -> Vec<EpisodeRow> {
        self.runs.iter().flat_map(|r| r.episodes.iter().cloned()).collect()
    }

    pub fn snapshots(&self) -> Vec<Snapshot> {
        self.runs.iter().flat_map(|r| r.snapshots.iter().cloned()).collect()
    }
}

/// Trains one agent seed. Episodes use env seeds 0, 1, 2, …; the episode in progress when
/// the step budget runs out is finished.
pub fn train_seed(cfg: &ExperimentConfig, agent_seed: u64) -> Result<SeedRun> {
    cfg.validate()?;
    let hp = cfg.resolved_hyperparams()?;
    let mut agent = build_agent(cfg.handler, &hp, &cfg.env, agent_seed)?;
    let mut env = Env::new(cfg.env.clone())?;
    let width = env.action_space().width();
    let mut rng = stream(agent_seed, Role::Exploration);

    let mut episodes = Vec::new();
    let mut snapshots = Vec::new();
    let mut window_start = 0;
    let mut recent: VecDeque<bool> = VecDeque::new();
    let mut total = 0u64;
    let mut early_stopped = false;
    let mut dead_end_collisions = 0;
    let mut env_seed = 0u64;

    while total < cfg.total_steps {
        let (mut obs, mut allowed) = env.reset(env_seed)?;
        let mut tally = EpisodeTally::default();
        loop {
            tally.allowed(&allowed, width);
            let output = agent.act(&obs, &allowed, true, &mut rng)?;
            let res = env.step(output.executed)?;
            if res.info.collided && allowed.is_empty() {
                dead_end_collisions += 1;
            }
            total += 1;
            tally.steps += 1;
            tally.reward += res.reward;
            let done = res.done();
            let (next_obs, next_allowed) = (res.observation, res.allowed);
            agent.observe(StepRecord {
                observation: obs,
                allowed,
                output,
                reward: res.reward,
                next_observation: next_obs,
                next_allowed: next_allowed.clone(),
                terminated: res.terminated,
                truncated: res.truncated,
            })?;
            if done {
                break;
            }
            obs = next_obs;
            allowed = next_allowed;
        }
        let row = tally.finish(cfg.algorithm, cfg.handler, agent_seed, env_seed, &env);
        log::debug!(
            "seed {agent_seed} episode {env_seed}: return {:.2} solved {}",
            row.episode_return,
            row.solved
        );
        recent.push_back(row.solved);
        episodes.push(row);
        env_seed += 1;

        while (snapshots.len() as u64 + 1) * cfg.iteration_steps <= total {
            let iteration = snapshots.len() as u64 + 1;
            snapshots.push(Snapshot::from_window(
                agent_seed,
                iteration,
                iteration * cfg.iteration_steps,
                &episodes[window_start..],
            ));
            window_start = episodes.len();
        }

        if let Some(es) = cfg.early_stop {
            if recent.len() > es.window {
                recent.pop_front();
            }
            let solved = recent.iter().filter(|s| **s).count() as f64;
            if recent.len() == es.window && solved / es.window as f64 >= es.solved_fraction {
                early_stopped = true;
                break;
            }
        }
    }
    log::info!("seed {agent_seed}: {} episodes, {total} steps", episodes.len());
    Ok(SeedRun {
        agent_seed,
        episodes,
        snapshots,
        steps: total,
        dead_end_collisions,
        early_stopped,
        checkpoint: agent.checkpoint(),
    })
}

/// Trains every agent seed in parallel. A failing seed is reported without stopping the others.
pub fn run_training(cfg: &ExperimentConfig) -> Result<TrainingReport> {
    cfg.validate()?;
    let results: Vec<(u64, Result<SeedRun>)> = cfg
        .agent_seeds
        .par_iter()
        .map(|&seed| (seed, train_seed(cfg, seed)))
        .collect();
    let mut report = TrainingReport::default();
    for (seed, res) in results {
        match res {
            Ok(run) => report.runs.push(run),
            Err(e) => {
                log::error!("seed {seed} failed: {e}");
                report.failures.push((seed, e.to_string()));
            }
        }
    }
    Ok(report)
}

/// One evaluation rollout, with the obstacles as placed at the start of the episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrajectory {
    pub algorithm: String,
    pub handler: String,
    pub agent_seed: u64,
    pub env_seed: u64,
    pub width: f64,
    pub height: f64,
    pub goal: Point2,
    pub goal_threshold: f64,
    pub obstacles: Vec<Obstacle>,
    /// `t = 0` is the start pose; later entries carry the action taken and its reward.
    pub steps: Vec<TrajectoryStep>,
}

#[derive(Debug, Clone, Default)]
pub struct Evaluation {
    pub rows: Vec<EpisodeRow>,
    pub trajectories: Vec<EpisodeTrajectory>,
}

fn evaluate_episode(
    agent: &dyn Agent,
    cfg: &EnvConfig,
    agent_seed: u64,
    env_seed: u64,
) -> Result<(EpisodeRow, EpisodeTrajectory)> {
    let mut env = Env::new(cfg.clone())?;
    let width = env.action_space().width();
    let mut rng = stream(env_seed, Role::Evaluation);
    let (mut obs, mut allowed) = env.reset(env_seed)?;
    let obstacles = env.state().obstacles.clone();
    let pose = env.state().pose;
    let mut steps = vec![TrajectoryStep {
        t: 0,
        x: pose.position.x,
        y: pose.position.y,
        perspective: pose.perspective,
        action: 0.0,
        reward: 0.0,
        allowed: allowed.clone(),
    }];
    let mut tally = EpisodeTally::default();
    loop {
        tally.allowed(&allowed, width);
        let out = agent.act(&obs, &allowed, false, &mut rng)?;
        let res = env.step(out.executed)?;
        tally.steps += 1;
        tally.reward += res.reward;
        let pose = env.state().pose;
        steps.push(TrajectoryStep {
            t: res.observation.t,
            x: pose.position.x,
            y: pose.position.y,
            perspective: pose.perspective,
            action: out.executed,
            reward: res.reward,
            allowed: res.allowed.clone(),
        });
        if res.done() {
            break;
        }
        obs = res.observation;
        allowed = res.allowed;
    }
    let algorithm = agent.algorithm();
    let handler = agent.handler().kind;
    let row = tally.finish(algorithm, handler, agent_seed, env_seed, &env);
    let traj = EpisodeTrajectory {
        algorithm: algorithm.name().to_string(),
        handler: handler.name().to_string(),
        agent_seed,
        env_seed,
        width: cfg.width,
        height: cfg.height,
        goal: cfg.goal,
        goal_threshold: cfg.goal_threshold,
        obstacles,
        steps,
    };
    Ok((row, traj))
}

/// Deterministic rollouts of a trained agent, one per environment seed.
///
/// `env` overrides the training environment (e.g. to evaluate on a different scenario).
pub fn run_evaluation(cp: &AgentCheckpoint, env: Option<&EnvConfig>, env_seeds: &[u64]) -> Result<Evaluation> {
    distinct("env seed", env_seeds)?;
    let agent = load_agent(cp)?;
    let cfg = env.unwrap_or(&cp.env);
    cfg.validate()?;
    let results: Vec<(EpisodeRow, EpisodeTrajectory)> = env_seeds
        .par_iter()
        .map(|&s| evaluate_episode(agent.as_ref(), cfg, cp.seed, s))
        .collect::<Result<_>>()?;
    let (rows, trajectories) = results.into_iter().unzip();
    Ok(Evaluation { rows, trajectories })
}
