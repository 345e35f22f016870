use ndarray::Array2;
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

use super::handler::{uniform_full, InputScaler, RestrictionHandler, ANGLE_SCALE};
use super::td3::{gaussian, smoothing_noise, with_actions, TwinCritics};
use super::{
    stack, Agent, AgentCheckpoint, AgentHyperparams, Algorithm, LearnStats, PolicyOutput, StepRecord, Td3Params,
};
use crate::env::{EnvConfig, Observation};
use crate::error::{Error, Result};
use crate::intervals::{scale_to_interval, Interval, IntervalSet};
use crate::nn::{argmax, Adam, Mlp, OutputActivation};
use crate::replay::{Action, ReplayBuffer, SampleMode, Transition};
use crate::rng::{stream, Role};

/// Best interval under the pessimistic twin estimate: `argmax_j min(q1_j, q2_j)`,
/// lowest index on ties. `None` for an empty list.
pub fn mps_target_values(q1: &[f64], q2: &[f64]) -> Option<(usize, f64)> {
    if q1.is_empty() {
        return None;
    }
    let mins: Vec<f64> = q1.iter().zip(q2).map(|(a, b)| a.min(*b)).collect();
    let j = argmax(&mins);
    Some((j, mins[j]))
}

/// Multi-pass scaled TD3: one actor pass per allowed interval, scaled into that
/// interval, with the critic picking which interval to act in.
#[derive(Debug, Clone)]
pub struct MpsAgent {
    handler: RestrictionHandler,
    params: Td3Params,
    scaler: InputScaler,
    actor: Mlp,
    actor_target: Mlp,
    actor_opt: Adam,
    critics: TwinCritics,
    buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    env: EnvConfig,
    seed: u64,
    steps: u64,
    updates: u64,
}

/// Scaled state followed by the interval bounds in network units.
fn encode(state: &[f64], interval: &Interval) -> Vec<f64> {
    let mut v = state.to_vec();
    v.push(interval.low * ANGLE_SCALE);
    v.push(interval.high * ANGLE_SCALE);
    v
}

impl MpsAgent {
    pub fn new(handler: RestrictionHandler, params: Td3Params, env: &EnvConfig, seed: u64) -> Result<Self> {
        let mut init = stream(seed, Role::AgentInit);
        let input = Observation::LEN + 2;
        let actor = Mlp::new(
            &super::sizes(input, &params.actor_hidden, 1),
            OutputActivation::TanhScaled {
                min: handler.space.min,
                max: handler.space.max,
            },
            &mut init,
        )?;
        let critics = TwinCritics::new(
            &super::sizes(input + 1, &params.critic_hidden, 1),
            params.critic_lr,
            params.l2,
            &mut init,
        )?;
        Ok(Self {
            handler,
            scaler: InputScaler::new(env),
            actor_target: actor.clone(),
            actor_opt: Adam::new(&actor, params.actor_lr, params.l2),
            actor,
            critics,
            buffer: ReplayBuffer::new(params.buffer, params.alpha, params.beta)?,
            rng: stream(seed, Role::Replay),
            env: env.clone(),
            seed,
            steps: 0,
            updates: 0,
            params,
        })
    }

    pub(crate) fn restore(handler: RestrictionHandler, params: Td3Params, cp: &AgentCheckpoint) -> Result<Self> {
        let mut agent = Self::new(handler, params, &cp.env, cp.seed)?;
        agent.actor = cp.net("actor")?;
        agent.actor_target = cp.net("actor_target")?;
        agent.actor_opt = Adam::new(&agent.actor, agent.params.actor_lr, agent.params.l2);
        agent.critics = TwinCritics::import(cp, agent.params.critic_lr, agent.params.l2)?;
        agent.steps = cp.steps;
        Ok(agent)
    }

    pub fn critics(&self) -> &TwinCritics {
        &self.critics
    }

    fn epsilon(&self) -> f64 {
        self.params.epsilon.map_or(0.0, |e| e.value(self.steps))
    }

    /// Scaled action of `net` for every interval, in one batched forward pass.
    pub fn interval_actions(&self, target: bool, state: &[f64], intervals: &[Interval]) -> Result<Vec<f64>> {
        let net = if target { &self.actor_target } else { &self.actor };
        let rows: Vec<Vec<f64>> = intervals.iter().map(|iv| encode(state, iv)).collect();
        let raw = net.predict(stack(&rows.iter().map(Vec::as_slice).collect::<Vec<_>>()).view())?;
        Ok(intervals
            .iter()
            .enumerate()
            .map(|(j, iv)| scale_to_interval(&self.handler.space, iv, raw[[j, 0]]))
            .collect())
    }

    /// Same as [`MpsAgent::interval_actions`] with one forward call per interval.
    pub fn interval_actions_looped(&self, target: bool, state: &[f64], intervals: &[Interval]) -> Result<Vec<f64>> {
        let net = if target { &self.actor_target } else { &self.actor };
        intervals
            .iter()
            .map(|iv| {
                Ok(scale_to_interval(
                    &self.handler.space,
                    iv,
                    net.predict_one(&encode(state, iv))?[0],
                ))
            })
            .collect()
    }

    /// Per-interval scaled actions and their `Q₁` scores for an observation.
    pub fn interval_scores(&self, obs: &Observation, allowed: &IntervalSet) -> Result<(Vec<f64>, Vec<f64>)> {
        let state = self.scaler.observation(obs);
        let intervals = allowed.intervals();
        let actions = self.interval_actions(false, &state, intervals)?;
        let rows: Vec<Vec<f64>> = intervals.iter().map(|iv| encode(&state, iv)).collect();
        let inputs = stack(&rows.iter().map(Vec::as_slice).collect::<Vec<_>>());
        let q = self.critics.q1.predict(with_actions(inputs.view(), &actions).view())?;
        Ok((actions, q.column(0).to_vec()))
    }

    /// Target-side interval choice for a batch of next states.
    ///
    /// Rows are enumerated transition by transition, interval by interval; `noise`
    /// holds one smoothing perturbation (degrees) per row in that order. The whole
    /// enumeration goes through the target nets in one pass.
    pub fn next_targets(
        &self,
        next_states: &[&[f64]],
        allowed_next: &[&IntervalSet],
        noise: &[f64],
    ) -> Result<Vec<Option<(usize, f64)>>> {
        let mut rows = Vec::new();
        let mut raw_index = Vec::new();
        for (i, (s, set)) in next_states.iter().zip(allowed_next).enumerate() {
            for iv in set.intervals() {
                rows.push(encode(s, iv));
                raw_index.push((i, *iv));
            }
        }
        if rows.is_empty() {
            return Ok(vec![None; next_states.len()]);
        }
        if noise.len() != rows.len() {
            return Err(Error::ShapeMismatch {
                expected: rows.len(),
                got: noise.len(),
            });
        }
        let inputs = stack(&rows.iter().map(Vec::as_slice).collect::<Vec<_>>());
        let raw = self.actor_target.predict(inputs.view())?;
        let actions: Vec<f64> = raw_index
            .iter()
            .enumerate()
            .map(|(r, (_, iv))| {
                let a = scale_to_interval(&self.handler.space, iv, raw[[r, 0]]);
                (a + noise[r]).clamp(iv.low, iv.high)
            })
            .collect();
        let with = with_actions(inputs.view(), &actions);
        let q1 = self.critics.target1.predict(with.view())?;
        let q2 = self.critics.target2.predict(with.view())?;
        let mut out = Vec::with_capacity(next_states.len());
        let mut r = 0;
        for set in allowed_next {
            let m = set.len();
            let a: Vec<f64> = (r..r + m).map(|k| q1[[k, 0]]).collect();
            let b: Vec<f64> = (r..r + m).map(|k| q2[[k, 0]]).collect();
            out.push(mps_target_values(&a, &b));
            r += m;
        }
        Ok(out)
    }

    fn learn(&mut self) -> Result<LearnStats> {
        let p = self.params.clone();
        let space = self.handler.space;
        let full = space.as_interval();
        let batch = self.buffer.sample(p.batch, SampleMode::Prioritized, &mut self.rng)?;
        let n = batch.transitions.len();
        let mut actions = Vec::with_capacity(n);
        let mut rows = Vec::with_capacity(n);
        let mut intervals = Vec::with_capacity(n);
        for t in &batch.transitions {
            let Action::Continuous(a) = t.action else {
                return Err(Error::InvalidArgument(
                    "MPS transition without a continuous action".into(),
                ));
            };
            let iv = t.chosen_interval.unwrap_or(full);
            actions.push(a);
            rows.push(encode(&t.state, &iv));
            intervals.push(iv);
        }
        let inputs = stack(&rows.iter().map(Vec::as_slice).collect::<Vec<_>>());

        let live: Vec<usize> = (0..n).filter(|&i| !batch.transitions[i].done).collect();
        let next_states: Vec<&[f64]> = live
            .iter()
            .map(|&i| batch.transitions[i].next_state.as_slice())
            .collect();
        let next_sets: Vec<&IntervalSet> = live.iter().map(|&i| &batch.transitions[i].allowed_next).collect();
        let row_count: usize = next_sets.iter().map(|s| s.len()).sum();
        let noise: Vec<f64> = (0..row_count)
            .map(|_| smoothing_noise(&p, &space, &mut self.rng))
            .collect();
        let targets = self.next_targets(&next_states, &next_sets, &noise)?;
        let mut y: Vec<f64> = batch.transitions.iter().map(|t| t.reward).collect();
        for (&i, tgt) in live.iter().zip(&targets) {
            if let Some((_, v)) = tgt {
                y[i] += p.gamma * v;
            }
        }
        let (value_loss, td) = self
            .critics
            .update(with_actions(inputs.view(), &actions).view(), &y, &batch.weights)?;
        self.updates += 1;

        let mut policy_loss = None;
        if self.updates.is_multiple_of(p.policy_delay as u64) {
            let (raw, cache) = self.actor.forward(inputs.view())?;
            let scaled: Vec<f64> = (0..n)
                .map(|i| scale_to_interval(&space, &intervals[i], raw[[i, 0]]))
                .collect();
            let col = inputs.ncols();
            let (q, dq) = self
                .critics
                .q1_input_gradient(with_actions(inputs.view(), &scaled).view(), col)?;
            let draw = Array2::from_shape_fn((n, 1), |(i, _)| {
                -dq[i] * ANGLE_SCALE * intervals[i].length() / space.width() / n as f64
            });
            let (g, _) = self.actor.backward(&cache, draw.view())?;
            self.actor_opt.step(&mut self.actor, &g)?;
            policy_loss = Some(-q.iter().sum::<f64>() / n as f64);
        }
        if self.updates.is_multiple_of(p.target_update_freq as u64) {
            self.actor_target.soft_update(&self.actor, p.tau);
            self.critics.soft_update(p.tau);
        }
        let indices = batch.indices.clone();
        self.buffer.update_priorities(&indices, &td)?;
        Ok(LearnStats {
            value_loss,
            policy_loss,
        })
    }
}

impl Agent for MpsAgent {
    fn algorithm(&self) -> Algorithm {
        Algorithm::MpsTd3
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
        if allowed.is_empty() {
            let a = uniform_full(&self.handler.space, rng);
            return Ok(PolicyOutput {
                raw: a,
                executed: a,
                violated: true,
                stored: Action::Continuous(a),
                log_prob: None,
                value: None,
                q_values: None,
                chosen_interval: None,
            });
        }
        let (actions, q) = self.interval_scores(obs, allowed)?;
        let eps = if explore { self.epsilon() } else { 0.0 };
        let j = if eps > 0.0 && rng.random::<f64>() < eps {
            rng.random_range(0..actions.len())
        } else {
            argmax(&q)
        };
        let iv = allowed.intervals()[j];
        let a = if explore {
            (actions[j] + gaussian(self.params.noise.value(self.steps), rng)).clamp(iv.low, iv.high)
        } else {
            actions[j]
        };
        Ok(PolicyOutput {
            raw: actions[j],
            executed: a,
            violated: !allowed.contains(a),
            stored: Action::Continuous(a),
            log_prob: None,
            value: None,
            q_values: Some(q),
            chosen_interval: Some(iv),
        })
    }

    fn observe(&mut self, r: StepRecord) -> Result<Option<LearnStats>> {
        self.steps += 1;
        let done = r.done();
        self.buffer.push(Transition {
            state: self.scaler.observation(&r.observation),
            action: r.output.stored,
            reward: r.reward,
            next_state: self.scaler.observation(&r.next_observation),
            done,
            allowed: r.allowed,
            allowed_next: r.next_allowed,
            chosen_interval: r.output.chosen_interval,
        });
        let ready = self.buffer.len() >= self.params.learning_starts.max(self.params.batch);
        if ready && self.steps.is_multiple_of(self.params.train_every as u64) {
            return self.learn().map(Some);
        }
        Ok(None)
    }

    fn checkpoint(&self) -> AgentCheckpoint {
        let mut nets = BTreeMap::new();
        nets.insert("actor".into(), self.actor.clone());
        nets.insert("actor_target".into(), self.actor_target.clone());
        self.critics.export(&mut nets);
        AgentCheckpoint {
            algorithm: Algorithm::MpsTd3,
            handler: self.handler.kind,
            hyperparams: AgentHyperparams::MpsTd3(self.params.clone()),
            env: self.env.clone(),
            seed: self.seed,
            steps: self.steps,
            nets,
            scalars: Default::default(),
        }
    }
}
