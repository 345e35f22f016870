use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::handler::{HandlerKind, InputScaler, RestrictionHandler};
use super::td3::gaussian;
use super::{
    stack, Agent, AgentCheckpoint, AgentHyperparams, Algorithm, LearnStats, PolicyOutput, PpoParams, StepRecord,
    DISCRETE_ACTIONS,
};
use crate::env::{EnvConfig, Observation};
use crate::error::Result;
use crate::intervals::{discrete_mask, discretize, IntervalSet};
use crate::nn::{apply_mask, argmax, log_softmax, softmax, Adam, Mlp, OutputActivation};
use crate::replay::Action;
use crate::rng::{stream, Role};

/// Generalized advantage estimates and value targets for one contiguous rollout.
///
/// `last_value` bootstraps the final step when it is not terminal.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let next_v = if t + 1 < n { values[t + 1] } else { last_value };
        let delta = rewards[t] + gamma * next_v * live - values[t];
        running = delta + gamma * lambda * live * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Value and ratio-derivative of the clipped surrogate `min(rA, clip(r, 1−ε, 1+ε)A)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoTerms {
    pub objective: f64,
    pub grad_ratio: f64,
    pub clipped: bool,
}

pub fn ppo_policy_terms(ratio: f64, advantage: f64, clip: f64) -> PpoTerms {
    let clipped = (advantage > 0.0 && ratio > 1.0 + clip) || (advantage < 0.0 && ratio < 1.0 - clip);
    if clipped {
        PpoTerms {
            objective: ratio.clamp(1.0 - clip, 1.0 + clip) * advantage,
            grad_ratio: 0.0,
            clipped,
        }
    } else {
        PpoTerms {
            objective: ratio * advantage,
            grad_ratio: advantage,
            clipped,
        }
    }
}

fn normal_log_pdf(x: f64, mean: f64, log_std: f64) -> f64 {
    let z = (x - mean) / log_std.exp();
    -0.5 * z * z - log_std - 0.5 * (2.0 * PI).ln()
}

/// Adam for a single free parameter.
#[derive(Debug, Clone, Copy, Default)]
struct ScalarAdam {
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarAdam {
    fn step(&mut self, x: &mut f64, g: f64, lr: f64) {
        self.t += 1;
        self.m = 0.9 * self.m + 0.1 * g;
        self.v = 0.999 * self.v + 0.001 * g * g;
        let m_hat = self.m / (1.0 - 0.9f64.powi(self.t));
        let v_hat = self.v / (1.0 - 0.999f64.powi(self.t));
        *x -= lr * m_hat / (v_hat.sqrt() + 1e-8);
    }
}

#[derive(Debug, Clone)]
struct RolloutItem {
    state: Vec<f64>,
    /// Unclipped Gaussian sample in normalized units, or the discrete index.
    action: f64,
    log_prob: f64,
    value: f64,
    reward: f64,
    done: bool,
    mask: Vec<bool>,
    next_state: Vec<f64>,
}

/// On-policy actor-critic with a clipped surrogate objective.
///
/// The continuous policy is a Gaussian over the normalized range `[−1, 1]` whose
/// mean comes from the network and whose log-std is a free parameter; samples are
/// clipped before being mapped to degrees. With the discrete-masking handler the
/// policy is categorical over nine evenly spaced headings.
#[derive(Debug, Clone)]
pub struct PpoAgent {
    handler: RestrictionHandler,
    params: PpoParams,
    scaler: InputScaler,
    actions: Vec<f64>,
    policy: Mlp,
    value: Mlp,
    log_std: f64,
    policy_opt: Adam,
    value_opt: Adam,
    log_std_opt: ScalarAdam,
    rollout: Vec<RolloutItem>,
    rng: ChaCha8Rng,
    env: EnvConfig,
    seed: u64,
    steps: u64,
}

impl PpoAgent {
    pub fn new(handler: RestrictionHandler, params: PpoParams, env: &EnvConfig, seed: u64) -> Result<Self> {
        let mut init = stream(seed, Role::AgentInit);
        let input = handler.input_len();
        let discrete = handler.kind == HandlerKind::DiscreteMasking;
        let actions = if discrete {
            discretize(&handler.space, DISCRETE_ACTIONS)?
        } else {
            Vec::new()
        };
        let policy = if discrete {
            Mlp::new(
                &super::sizes(input, &params.hidden, actions.len()),
                OutputActivation::Linear,
                &mut init,
            )?
        } else {
            Mlp::new(
                &super::sizes(input, &params.hidden, 1),
                OutputActivation::TanhScaled { min: -1.0, max: 1.0 },
                &mut init,
            )?
        };
        let value = Mlp::new(
            &super::sizes(input, &params.hidden, 1),
            OutputActivation::Linear,
            &mut init,
        )?;
        Ok(Self {
            handler,
            scaler: InputScaler::new(env),
            actions,
            policy_opt: Adam::new(&policy, params.lr, 0.0),
            value_opt: Adam::new(&value, params.lr, 0.0),
            policy,
            value,
            log_std: 0.0,
            log_std_opt: ScalarAdam::default(),
            rollout: Vec::with_capacity(params.batch),
            rng: stream(seed, Role::Replay),
            env: env.clone(),
            seed,
            steps: 0,
            params,
        })
    }

    pub(crate) fn restore(handler: RestrictionHandler, params: PpoParams, cp: &AgentCheckpoint) -> Result<Self> {
        let mut agent = Self::new(handler, params, &cp.env, cp.seed)?;
        agent.policy = cp.net("policy")?;
        agent.value = cp.net("value")?;
        agent.log_std = cp.scalar("log_std")?;
        agent.policy_opt = Adam::new(&agent.policy, agent.params.lr, 0.0);
        agent.value_opt = Adam::new(&agent.value, agent.params.lr, 0.0);
        agent.steps = cp.steps;
        Ok(agent)
    }

    fn discrete(&self) -> bool {
        !self.actions.is_empty()
    }

    fn input(&self, obs: &Observation, allowed: &IntervalSet) -> Result<Vec<f64>> {
        Ok(self.scaler.scale(self.handler.augment_observation(obs, allowed)?))
    }

    fn to_degrees(&self, u: f64) -> f64 {
        let s = self.handler.space;
        0.5 * (s.min + s.max) + 0.5 * s.width() * u.clamp(-1.0, 1.0)
    }

    fn log_prob(&self, policy_out: &[f64], action: f64, mask: &[bool]) -> f64 {
        if self.discrete() {
            let mut logits = policy_out.to_vec();
            apply_mask(&mut logits, mask);
            log_softmax(&logits)[action as usize]
        } else {
            normal_log_pdf(action, policy_out[0], self.log_std)
        }
    }

    /// Probability ratios of the stored rollout under the current policy.
    pub fn rollout_ratios(&self) -> Result<Vec<f64>> {
        self.rollout
            .iter()
            .map(|it| {
                let out = self.policy.predict_one(&it.state)?;
                Ok((self.log_prob(&out, it.action, &it.mask) - it.log_prob).exp())
            })
            .collect()
    }

    pub fn rollout_len(&self) -> usize {
        self.rollout.len()
    }

    fn learn(&mut self) -> Result<LearnStats> {
        let p = self.params.clone();
        let last = self.rollout.last().expect("nonempty rollout");
        let last_value = if last.done {
            0.0
        } else {
            self.value.predict_one(&last.next_state)?[0]
        };
        let rewards: Vec<f64> = self.rollout.iter().map(|i| i.reward).collect();
        let values: Vec<f64> = self.rollout.iter().map(|i| i.value).collect();
        let dones: Vec<bool> = self.rollout.iter().map(|i| i.done).collect();
        let (adv, returns) = gae(&rewards, &values, &dones, last_value, p.gamma, p.lambda);
        let n = adv.len() as f64;
        let mean = adv.iter().sum::<f64>() / n;
        let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        let norm: Vec<f64> = adv.iter().map(|a| (a - mean) / std.max(1e-8)).collect();

        let mut order: Vec<usize> = (0..self.rollout.len()).collect();
        let (mut policy_loss, mut value_loss, mut batches) = (0.0, 0.0, 0.0);
        for _ in 0..p.sgd_iters {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(p.minibatch) {
                let m = chunk.len() as f64;
                let states = stack(
                    &chunk
                        .iter()
                        .map(|&i| self.rollout[i].state.as_slice())
                        .collect::<Vec<_>>(),
                );

                let (out, cache) = self.policy.forward(states.view())?;
                let mut dout = Array2::zeros(out.dim());
                let mut d_log_std = 0.0;
                let mut pl = 0.0;
                for (row, &i) in chunk.iter().enumerate() {
                    let it = &self.rollout[i];
                    let o = out.row(row).to_vec();
                    let ratio = (self.log_prob(&o, it.action, &it.mask) - it.log_prob).exp();
                    let terms = ppo_policy_terms(ratio, norm[i], p.clip);
                    pl -= terms.objective / m;
                    // d(−objective)/d log π = −grad_ratio · ratio
                    let coef = -terms.grad_ratio * ratio / m;
                    if self.discrete() {
                        let mut logits = o;
                        apply_mask(&mut logits, &it.mask);
                        let probs = softmax(&logits);
                        let logp = log_softmax(&logits);
                        let a = it.action as usize;
                        let entropy: f64 = probs
                            .iter()
                            .zip(&logp)
                            .filter(|(&q, _)| q > 0.0)
                            .map(|(q, l)| -q * l)
                            .sum();
                        pl -= p.entropy_coef * entropy / m;
                        for j in 0..probs.len() {
                            let dlogp = if j == a { 1.0 - probs[j] } else { -probs[j] };
                            let dentropy = if probs[j] > 0.0 {
                                -probs[j] * (logp[j] + entropy)
                            } else {
                                0.0
                            };
                            dout[[row, j]] = coef * dlogp - p.entropy_coef * dentropy / m;
                        }
                    } else {
                        let var = (2.0 * self.log_std).exp();
                        let diff = it.action - o[0];
                        dout[[row, 0]] = coef * diff / var;
                        d_log_std += coef * (diff * diff / var - 1.0);
                    }
                }
                let (g, _) = self.policy.backward(&cache, dout.view())?;
                self.policy_opt.step(&mut self.policy, &g)?;
                if !self.discrete() {
                    let entropy = self.log_std + 0.5 * (2.0 * PI * std::f64::consts::E).ln();
                    pl -= p.entropy_coef * entropy;
                    d_log_std -= p.entropy_coef;
                    self.log_std_opt.step(&mut self.log_std, d_log_std, p.lr);
                }

                let (v, vcache) = self.value.forward(states.view())?;
                let mut dv = Array2::zeros(v.dim());
                let mut vl = 0.0;
                for (row, &i) in chunk.iter().enumerate() {
                    let (old, target, cur) = (self.rollout[i].value, returns[i], v[[row, 0]]);
                    let step = (cur - old).clamp(-p.vf_clip, p.vf_clip);
                    let clipped = old + step;
                    let (l1, l2) = ((cur - target).powi(2), (clipped - target).powi(2));
                    if l1 >= l2 {
                        vl += p.vf_coef * l1 / m;
                        dv[[row, 0]] = 2.0 * p.vf_coef * (cur - target) / m;
                    } else {
                        vl += p.vf_coef * l2 / m;
                        let inside = (cur - old).abs() < p.vf_clip;
                        dv[[row, 0]] = if inside {
                            2.0 * p.vf_coef * (clipped - target) / m
                        } else {
                            0.0
                        };
                    }
                }
                let (g, _) = self.value.backward(&vcache, dv.view())?;
                self.value_opt.step(&mut self.value, &g)?;
                policy_loss += pl;
                value_loss += vl;
                batches += 1.0;
            }
        }
        self.rollout.clear();
        Ok(LearnStats {
            value_loss: value_loss / batches,
            policy_loss: Some(policy_loss / batches),
        })
    }
}

impl Agent for PpoAgent {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Ppo
    }

    fn handler(&self) -> &RestrictionHandler {
        &self.handler
    }

    fn steps(&self) -> u64 {
        self.steps
    }

    fn act(
        &self,
        obs: &Observation,
        allowed: &IntervalSet,
        explore: bool,
        rng: &mut dyn RngCore,
    ) -> Result<PolicyOutput> {
        let input = self.input(obs, allowed)?;
        let out = self.policy.predict_one(&input)?;
        let value = self.value.predict_one(&input)?[0];
        if self.discrete() {
            let mask = discrete_mask(&self.actions, allowed);
            let mut logits = out.clone();
            apply_mask(&mut logits, &mask);
            let idx = if explore {
                let probs = softmax(&logits);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = probs.len() - 1;
                for (j, q) in probs.iter().enumerate() {
                    acc += q;
                    if u < acc {
                        pick = j;
                        break;
                    }
                }
                pick
            } else {
                argmax(&logits)
            };
            let a = self.actions[idx];
            return Ok(PolicyOutput {
                raw: a,
                executed: a,
                violated: !allowed.contains(a),
                stored: Action::Discrete(idx),
                log_prob: Some(log_softmax(&logits)[idx]),
                value: Some(value),
                q_values: None,
                chosen_interval: None,
            });
        }
        let mean = out[0];
        let u = if explore {
            mean + gaussian(self.log_std.exp(), rng)
        } else {
            mean
        };
        let raw = self.to_degrees(u);
        let (executed, violated) = self.handler.apply(raw, allowed, rng)?;
        Ok(PolicyOutput {
            raw,
            executed,
            violated,
            stored: Action::Continuous(u),
            log_prob: Some(normal_log_pdf(u, mean, self.log_std)),
            value: Some(value),
            q_values: None,
            chosen_interval: None,
        })
    }

    fn observe(&mut self, r: StepRecord) -> Result<Option<LearnStats>> {
        self.steps += 1;
        let done = r.done();
        let action = match r.output.stored {
            Action::Continuous(u) => u,
            Action::Discrete(i) => i as f64,
            Action::Parameterized { .. } => {
                return Err(crate::error::Error::InvalidArgument(
                    "PPO cannot learn parameterized actions".into(),
                ))
            }
        };
        let mask = if self.discrete() {
            discrete_mask(&self.actions, &r.allowed)
        } else {
            Vec::new()
        };
        let item = RolloutItem {
            state: self.input(&r.observation, &r.allowed)?,
            next_state: self.input(&r.next_observation, &r.next_allowed)?,
            action,
            log_prob: r.output.log_prob.unwrap_or(0.0),
            value: r.output.value.unwrap_or(0.0),
            reward: r.reward,
            done,
            mask,
        };
        self.rollout.push(item);
        if self.rollout.len() >= self.params.batch {
            return self.learn().map(Some);
        }
        Ok(None)
    }

    fn checkpoint(&self) -> AgentCheckpoint {
        let mut nets = BTreeMap::new();
        nets.insert("policy".into(), self.policy.clone());
        nets.insert("value".into(), self.value.clone());
        AgentCheckpoint {
            algorithm: Algorithm::Ppo,
            handler: self.handler.kind,
            hyperparams: AgentHyperparams::Ppo(self.params.clone()),
            env: self.env.clone(),
            seed: self.seed,
            steps: self.steps,
            nets,
            scalars: [("log_std".to_string(), self.log_std)].into_iter().collect(),
        }
    }
}
