//! Learning agents and the restriction handlers that wrap them.
//!
//! Every agent follows the same loop: [`Agent::act`] proposes and repairs an
//! action for the current observation and allowed set, the caller executes
//! `executed` in the environment, then hands the outcome back through
//! [`Agent::observe`], which stores it and runs whatever updates are due.

mod dqn;
mod handler;
mod mps;
mod pam;
mod ppo;
mod presets;
mod schedule;
mod td3;

use ndarray::{Array2, ArrayView2};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::env::{EnvConfig, Observation};
use crate::error::{Error, Result};
use crate::intervals::{Interval, IntervalSet};
use crate::nn::Mlp;
use crate::replay::Action;

pub use dqn::{dqn_select, dqn_targets, DqnAgent};
pub use handler::{augment_with_interval, HandlerKind, InputScaler, RestrictionHandler, ANGLE_SCALE};
pub use mps::{mps_target_values, MpsAgent};
pub use pam::PamAgent;
pub use ppo::{gae, ppo_policy_terms, PpoAgent, PpoTerms};
pub use presets::{preset, preset_names, PRESETS_JSON};
pub use schedule::Linear;
pub use td3::{Td3Agent, TwinCritics};

/// Discount factor used throughout the experiments.
pub const GAMMA: f64 = 0.99;

/// Number of discrete actions or parameter bins.
pub const DISCRETE_ACTIONS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Dqn,
    Td3,
    Ppo,
    Pam,
    MpsTd3,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::Dqn,
        Algorithm::Td3,
        Algorithm::Ppo,
        Algorithm::Pam,
        Algorithm::MpsTd3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Dqn => "dqn",
            Algorithm::Td3 => "td3",
            Algorithm::Ppo => "ppo",
            Algorithm::Pam => "pam",
            Algorithm::MpsTd3 => "mps-td3",
        }
    }

    /// Handlers this algorithm can be combined with.
    pub fn handlers(self) -> &'static [HandlerKind] {
        use HandlerKind::*;
        match self {
            Algorithm::Dqn => &[DiscreteMasking],
            Algorithm::Td3 => &[Penalty, Projection, RandomReplacement, ContinuousMasking],
            Algorithm::Ppo => &[
                Penalty,
                Projection,
                RandomReplacement,
                ContinuousMasking,
                DiscreteMasking,
            ],
            Algorithm::Pam | Algorithm::MpsTd3 => &[Native],
        }
    }

    pub fn check_handler(self, handler: HandlerKind) -> Result<()> {
        if self.handlers().contains(&handler) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "{self} does not support the {handler} handler"
            )))
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        let norm = if norm == "mps" { "mps-td3".to_string() } else { norm };
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == norm)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown algorithm {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DqnParams {
    pub lr: f64,
    pub hidden: Vec<usize>,
    pub epsilon: Linear,
    pub buffer: usize,
    pub alpha: f64,
    pub beta: f64,
    pub batch: usize,
    /// Polyak rate, applied after every update.
    pub tau: f64,
    pub dueling: bool,
    pub double_q: bool,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_learning_starts")]
    pub learning_starts: usize,
    /// Environment steps between gradient updates.
    #[serde(default = "default_train_every_discrete")]
    pub train_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Td3Params {
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub tau: f64,
    pub policy_delay: usize,
    /// Target smoothing noise std, as a fraction of the half-width of the action range.
    pub target_noise: f64,
    /// Smoothing noise clip, same units as `target_noise`.
    pub noise_clip: f64,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub l2: f64,
    /// Exploration noise std in degrees.
    pub noise: Linear,
    pub buffer: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Learner steps between Polyak updates of the target networks.
    pub target_update_freq: usize,
    pub batch: usize,
    /// Interval-level ε-greedy (multi-pass agent only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<Linear>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_learning_starts")]
    pub learning_starts: usize,
    #[serde(default = "default_train_every")]
    pub train_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoParams {
    pub clip: f64,
    pub vf_clip: f64,
    pub vf_coef: f64,
    pub entropy_coef: f64,
    pub lr: f64,
    pub lambda: f64,
    pub hidden: Vec<usize>,
    pub minibatch: usize,
    pub sgd_iters: usize,
    /// Environment steps collected per update.
    pub batch: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PamParams {
    pub lr: f64,
    pub param_lr: f64,
    pub hidden: Vec<usize>,
    pub param_hidden: Vec<usize>,
    pub epsilon: Linear,
    pub buffer: usize,
    pub alpha: f64,
    pub beta: f64,
    pub batch: usize,
    pub dueling: bool,
    pub double_q: bool,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_learning_starts")]
    pub learning_starts: usize,
    #[serde(default = "default_train_every_discrete")]
    pub train_every: usize,
}

fn default_gamma() -> f64 {
    GAMMA
}

fn default_tau() -> f64 {
    0.005
}

fn default_learning_starts() -> usize {
    1000
}

fn default_train_every() -> usize {
    1
}

fn default_train_every_discrete() -> usize {
    4
}

/// Hyperparameters of one algorithm, tagged by algorithm name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algorithm", rename_all = "kebab-case")]
pub enum AgentHyperparams {
    Dqn(DqnParams),
    Td3(Td3Params),
    Ppo(PpoParams),
    Pam(PamParams),
    MpsTd3(Td3Params),
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")))
    }
}

fn unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} must lie in [0, 1], got {v}")))
    }
}

fn nonzero(name: &str, v: usize) -> Result<()> {
    if v > 0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} must be at least 1")))
    }
}

fn layers(name: &str, hidden: &[usize]) -> Result<()> {
    if hidden.iter().all(|&h| h > 0) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} contains an empty layer")))
    }
}

impl AgentHyperparams {
    pub fn algorithm(&self) -> Algorithm {
        match self {
            AgentHyperparams::Dqn(_) => Algorithm::Dqn,
            AgentHyperparams::Td3(_) => Algorithm::Td3,
            AgentHyperparams::Ppo(_) => Algorithm::Ppo,
            AgentHyperparams::Pam(_) => Algorithm::Pam,
            AgentHyperparams::MpsTd3(_) => Algorithm::MpsTd3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AgentHyperparams::Dqn(p) => {
                positive("lr", p.lr)?;
                positive("tau", p.tau)?;
                unit("tau", p.tau)?;
                unit("alpha", p.alpha)?;
                unit("beta", p.beta)?;
                unit("gamma", p.gamma)?;
                p.epsilon.validate()?;
                unit("epsilon", p.epsilon.initial)?;
                nonzero("buffer", p.buffer)?;
                nonzero("batch", p.batch)?;
                nonzero("train_every", p.train_every)?;
                layers("hidden", &p.hidden)
            }
            AgentHyperparams::Td3(p) | AgentHyperparams::MpsTd3(p) => {
                positive("actor_lr", p.actor_lr)?;
                positive("critic_lr", p.critic_lr)?;
                positive("tau", p.tau)?;
                unit("tau", p.tau)?;
                unit("alpha", p.alpha)?;
                unit("beta", p.beta)?;
                unit("gamma", p.gamma)?;
                if p.target_noise < 0.0 || p.noise_clip < 0.0 || p.l2 < 0.0 {
                    return Err(Error::InvalidArgument(
                        "noise and l2 settings must be non-negative".into(),
                    ));
                }
                p.noise.validate()?;
                if let Some(e) = &p.epsilon {
                    e.validate()?;
                    unit("epsilon", e.initial)?;
                }
                nonzero("policy_delay", p.policy_delay)?;
                nonzero("target_update_freq", p.target_update_freq)?;
                nonzero("buffer", p.buffer)?;
                nonzero("batch", p.batch)?;
                nonzero("train_every", p.train_every)?;
                layers("actor_hidden", &p.actor_hidden)?;
                layers("critic_hidden", &p.critic_hidden)
            }
            AgentHyperparams::Ppo(p) => {
                positive("clip", p.clip)?;
                positive("vf_clip", p.vf_clip)?;
                positive("vf_coef", p.vf_coef)?;
                positive("lr", p.lr)?;
                if p.entropy_coef < 0.0 {
                    return Err(Error::InvalidArgument("entropy_coef must be non-negative".into()));
                }
                unit("lambda", p.lambda)?;
                unit("gamma", p.gamma)?;
                nonzero("minibatch", p.minibatch)?;
                nonzero("sgd_iters", p.sgd_iters)?;
                nonzero("batch", p.batch)?;
                layers("hidden", &p.hidden)
            }
            AgentHyperparams::Pam(p) => {
                positive("lr", p.lr)?;
                positive("param_lr", p.param_lr)?;
                positive("tau", p.tau)?;
                unit("tau", p.tau)?;
                unit("alpha", p.alpha)?;
                unit("beta", p.beta)?;
                unit("gamma", p.gamma)?;
                p.epsilon.validate()?;
                unit("epsilon", p.epsilon.initial)?;
                nonzero("buffer", p.buffer)?;
                nonzero("batch", p.batch)?;
                nonzero("train_every", p.train_every)?;
                layers("hidden", &p.hidden)?;
                layers("param_hidden", &p.param_hidden)
            }
        }
    }
}

/// What an agent decided for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutput {
    /// The policy's own proposal in degrees, before any handler.
    pub raw: f64,
    /// The action to send to the environment.
    pub executed: f64,
    /// The executed action lies outside the allowed set.
    pub violated: bool,
    /// Action representation the learner trains on.
    pub stored: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_values: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen_interval: Option<Interval>,
}

/// One environment transition as seen by the agent.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub observation: Observation,
    pub allowed: IntervalSet,
    pub output: PolicyOutput,
    pub reward: f64,
    pub next_observation: Observation,
    pub next_allowed: IntervalSet,
    pub terminated: bool,
    pub truncated: bool,
}

impl StepRecord {
    /// Bootstrapping stops at terminal and truncated steps alike.
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

/// Losses of the updates triggered by one [`Agent::observe`] call.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LearnStats {
    pub value_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy_loss: Option<f64>,
}

/// Serializable bundle of everything needed to rebuild an agent for evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentCheckpoint {
    pub algorithm: Algorithm,
    pub handler: HandlerKind,
    pub hyperparams: AgentHyperparams,
    pub env: EnvConfig,
    pub seed: u64,
    pub steps: u64,
    pub nets: BTreeMap<String, Mlp>,
    #[serde(default)]
    pub scalars: BTreeMap<String, f64>,
}

impl AgentCheckpoint {
    pub(crate) fn net(&self, name: &str) -> Result<Mlp> {
        self.nets
            .get(name)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks network {name:?}")))
    }

    pub(crate) fn scalar(&self, name: &str) -> Result<f64> {
        self.scalars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks value {name:?}")))
    }
}

pub trait Agent: Send + Sync {
    fn algorithm(&self) -> Algorithm;

    fn handler(&self) -> &RestrictionHandler;

    /// Environment steps observed so far; drives exploration schedules.
    fn steps(&self) -> u64;

    /// Chooses an action. `explore = false` gives the deterministic evaluation policy.
    fn act(
        &self,
        obs: &Observation,
        allowed: &IntervalSet,
        explore: bool,
        rng: &mut dyn RngCore,
    ) -> Result<PolicyOutput>;

    /// Stores a transition and performs any due updates.
    fn observe(&mut self, record: StepRecord) -> Result<Option<LearnStats>>;

    fn checkpoint(&self) -> AgentCheckpoint;
}

/// Builds a freshly initialized agent. `seed` fixes weight init and learner randomness.
pub fn build_agent(
    handler: HandlerKind,
    hyperparams: &AgentHyperparams,
    env: &EnvConfig,
    seed: u64,
) -> Result<Box<dyn Agent>> {
    hyperparams.validate()?;
    env.validate()?;
    let algorithm = hyperparams.algorithm();
    algorithm.check_handler(handler)?;
    let h = RestrictionHandler::new(handler, env.action_space()?);
    Ok(match hyperparams {
        AgentHyperparams::Dqn(p) => Box::new(DqnAgent::new(h, p.clone(), env, seed)?),
        AgentHyperparams::Td3(p) => Box::new(Td3Agent::new(h, p.clone(), env, seed)?),
        AgentHyperparams::Ppo(p) => Box::new(PpoAgent::new(h, p.clone(), env, seed)?),
        AgentHyperparams::Pam(p) => Box::new(PamAgent::new(h, p.clone(), env, seed)?),
        AgentHyperparams::MpsTd3(p) => Box::new(MpsAgent::new(h, p.clone(), env, seed)?),
    })
}

/// Rebuilds an agent from a checkpoint. Optimizer state and replay contents are not restored.
pub fn load_agent(cp: &AgentCheckpoint) -> Result<Box<dyn Agent>> {
    cp.hyperparams.validate()?;
    if cp.hyperparams.algorithm() != cp.algorithm {
        return Err(Error::InvalidArgument(
            "checkpoint algorithm does not match its hyperparameters".into(),
        ));
    }
    cp.algorithm.check_handler(cp.handler)?;
    let h = RestrictionHandler::new(cp.handler, cp.env.action_space()?);
    Ok(match &cp.hyperparams {
        AgentHyperparams::Dqn(p) => Box::new(DqnAgent::restore(h, p.clone(), cp)?),
        AgentHyperparams::Td3(p) => Box::new(Td3Agent::restore(h, p.clone(), cp)?),
        AgentHyperparams::Ppo(p) => Box::new(PpoAgent::restore(h, p.clone(), cp)?),
        AgentHyperparams::Pam(p) => Box::new(PamAgent::restore(h, p.clone(), cp)?),
        AgentHyperparams::MpsTd3(p) => Box::new(MpsAgent::restore(h, p.clone(), cp)?),
    })
}

/// Dueling aggregation `Q = V + (A − mean A)` over a raw network output `[V, A_1..A_k]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QHead {
    pub actions: usize,
    pub dueling: bool,
}

impl QHead {
    pub fn new(actions: usize, dueling: bool) -> Self {
        Self { actions, dueling }
    }

    /// Width of the network output feeding this head.
    pub fn raw_width(&self) -> usize {
        self.actions + usize::from(self.dueling)
    }

    pub fn q_values(&self, raw: ArrayView2<f64>) -> Array2<f64> {
        if !self.dueling {
            return raw.to_owned();
        }
        let k = self.actions as f64;
        let mut q = Array2::zeros((raw.nrows(), self.actions));
        for (mut qr, rr) in q.outer_iter_mut().zip(raw.outer_iter()) {
            let v = rr[0];
            let mean = rr.iter().skip(1).sum::<f64>() / k;
            for j in 0..self.actions {
                qr[j] = v + rr[j + 1] - mean;
            }
        }
        q
    }

    /// Maps `dL/dQ` back to `dL/d raw`.
    pub fn backward(&self, dq: ArrayView2<f64>) -> Array2<f64> {
        if !self.dueling {
            return dq.to_owned();
        }
        let k = self.actions as f64;
        let mut draw = Array2::zeros((dq.nrows(), self.raw_width()));
        for (mut dr, g) in draw.outer_iter_mut().zip(dq.outer_iter()) {
            let total: f64 = g.sum();
            dr[0] = total;
            for j in 0..self.actions {
                dr[j + 1] = g[j] - total / k;
            }
        }
        draw
    }
}

/// Stacks equally long rows into a matrix.
pub(crate) fn stack(rows: &[&[f64]]) -> Array2<f64> {
    let width = rows.first().map_or(0, |r| r.len());
    let mut m = Array2::zeros((rows.len(), width));
    for (mut dst, src) in m.outer_iter_mut().zip(rows) {
        dst.assign(&ndarray::ArrayView1::from(*src));
    }
    m
}

/// `layer_sizes = [input, hidden..., output]`.
pub(crate) fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut v = Vec::with_capacity(hidden.len() + 2);
    v.push(input);
    v.extend_from_slice(hidden);
    v.push(output);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{apply_mask, argmax};
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn dueling_constant_advantage_gives_value() {
        let head = QHead::new(3, true);
        let q = head.q_values(array![[2.5, 7.0, 7.0, 7.0]].view());
        assert_eq!(q, array![[2.5, 2.5, 2.5]]);
    }

    #[test]
    fn dueling_backward_matches_finite_differences() {
        let head = QHead::new(3, true);
        let raw = array![[0.3, 1.0, -2.0, 0.5]];
        let w = array![[0.7, -1.1, 2.0]];
        let loss = |r: &Array2<f64>| (head.q_values(r.view()) * &w).sum();
        let analytic = head.backward(w.view());
        for j in 0..4 {
            let mut p = raw.clone();
            p[[0, j]] += 1e-6;
            let mut m = raw.clone();
            m[[0, j]] -= 1e-6;
            let fd = (loss(&p) - loss(&m)) / 2e-6;
            assert!((fd - analytic[[0, j]]).abs() < 1e-8);
        }
    }

    #[test]
    fn names_roundtrip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
            for &h in a.handlers() {
                assert!(a.check_handler(h).is_ok());
            }
        }
        assert!(Algorithm::Dqn.check_handler(HandlerKind::Projection).is_err());
    }

    proptest! {
        #[test]
        fn mask_never_changes_unmasked_argmax(
            q in prop::collection::vec(-1e6..1e6f64, 2..16),
            bits in prop::collection::vec(any::<bool>(), 16),
        ) {
            let mask: Vec<bool> = bits[..q.len()].to_vec();
            prop_assume!(mask.iter().any(|&b| b));
            let mut masked = q.clone();
            apply_mask(&mut masked, &mask);
            let oracle = (0..q.len()).filter(|&i| mask[i]).fold(None, |best: Option<usize>, i| match best {
                Some(b) if q[b] >= q[i] => Some(b),
                _ => Some(i),
            });
            prop_assert_eq!(Some(argmax(&masked)), oracle);
        }
    }
}
