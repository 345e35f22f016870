use ndarray::{Array2, ArrayView2};
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;

use super::handler::{InputScaler, RestrictionHandler};
use super::{
    stack, Agent, AgentCheckpoint, AgentHyperparams, Algorithm, DqnParams, LearnStats, PolicyOutput, QHead, StepRecord,
    DISCRETE_ACTIONS,
};
use crate::env::{EnvConfig, Observation};
use crate::error::{Error, Result};
use crate::intervals::{discrete_mask, discretize, IntervalSet};
use crate::nn::{apply_mask, argmax, Adam, Mlp, OutputActivation};
use crate::replay::{Action, ReplayBuffer, SampleMode, Transition};
use crate::rng::{stream, Role};

/// Masked ε-greedy selection.
///
/// With probability ε a uniformly random unmasked index, otherwise the masked argmax
/// (lowest index on ties). If every entry is masked the draw is uniform over all indices.
pub fn dqn_select(q: &[f64], mask: &[bool], epsilon: f64, rng: &mut dyn RngCore) -> usize {
    let valid: Vec<usize> = (0..q.len()).filter(|&i| mask[i]).collect();
    if valid.is_empty() {
        return rng.random_range(0..q.len());
    }
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return valid[rng.random_range(0..valid.len())];
    }
    let mut masked = q.to_vec();
    apply_mask(&mut masked, mask);
    argmax(&masked)
}

/// Index of the best allowed entry, `None` if nothing is allowed.
pub(crate) fn masked_argmax(row: &[f64], mask: &[bool]) -> Option<usize> {
    if !mask.iter().any(|&m| m) {
        return None;
    }
    let mut masked = row.to_vec();
    apply_mask(&mut masked, mask);
    Some(argmax(&masked))
}

/// Bellman targets `y = r + γ·Q′(s′, a*)` with `a*` chosen among allowed next actions.
///
/// With `next_online` the selection uses the online values (double Q-learning) and
/// the evaluation the target values. Terminal transitions and transitions without
/// any allowed next action get `y = r`.
pub fn dqn_targets(
    rewards: &[f64],
    dones: &[bool],
    next_online: Option<ArrayView2<f64>>,
    next_target: ArrayView2<f64>,
    next_masks: &[Vec<bool>],
    gamma: f64,
) -> Vec<f64> {
    (0..rewards.len())
        .map(|i| {
            if dones[i] {
                return rewards[i];
            }
            let target_row = next_target.row(i).to_vec();
            let select = match &next_online {
                Some(o) => o.row(i).to_vec(),
                None => target_row.clone(),
            };
            match masked_argmax(&select, &next_masks[i]) {
                Some(a) => rewards[i] + gamma * target_row[a],
                None => rewards[i],
            }
        })
        .collect()
}

/// DQN over a discretized action range with invalid-action masking.
#[derive(Debug, Clone)]
pub struct DqnAgent {
    handler: RestrictionHandler,
    params: DqnParams,
    scaler: InputScaler,
    actions: Vec<f64>,
    head: QHead,
    online: Mlp,
    target: Mlp,
    opt: Adam,
    buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    env: EnvConfig,
    seed: u64,
    steps: u64,
}

impl DqnAgent {
    pub fn new(handler: RestrictionHandler, params: DqnParams, env: &EnvConfig, seed: u64) -> Result<Self> {
        let actions = discretize(&handler.space, DISCRETE_ACTIONS)?;
        let head = QHead::new(actions.len(), params.dueling);
        let mut init = stream(seed, Role::AgentInit);
        let layer_sizes = super::sizes(Observation::LEN, &params.hidden, head.raw_width());
        let online = Mlp::new(&layer_sizes, OutputActivation::Linear, &mut init)?;
        let target = online.clone();
        let opt = Adam::new(&online, params.lr, 0.0);
        let buffer = ReplayBuffer::new(params.buffer, params.alpha, params.beta)?;
        Ok(Self {
            handler,
            scaler: InputScaler::new(env),
            actions,
            head,
            online,
            target,
            opt,
            buffer,
            rng: stream(seed, Role::Replay),
            env: env.clone(),
            seed,
            steps: 0,
            params,
        })
    }

    pub(crate) fn restore(handler: RestrictionHandler, params: DqnParams, cp: &AgentCheckpoint) -> Result<Self> {
        let mut agent = Self::new(handler, params, &cp.env, cp.seed)?;
        agent.online = cp.net("q")?;
        agent.target = cp.net("q_target")?;
        agent.opt = Adam::new(&agent.online, agent.params.lr, 0.0);
        agent.steps = cp.steps;
        Ok(agent)
    }

    /// Discrete action values in degrees.
    pub fn actions(&self) -> &[f64] {
        &self.actions
    }

    pub fn q_values(&self, obs: &Observation) -> Result<Vec<f64>> {
        let input = self.scaler.observation(obs);
        let raw = self.online.predict_one(&input)?;
        let raw = Array2::from_shape_vec((1, raw.len()), raw).expect("row");
        Ok(self.head.q_values(raw.view()).into_raw_vec_and_offset().0)
    }

    pub fn epsilon(&self) -> f64 {
        self.params.epsilon.value(self.steps)
    }

    fn learn(&mut self) -> Result<LearnStats> {
        let batch = self
            .buffer
            .sample(self.params.batch, SampleMode::Prioritized, &mut self.rng)?;
        let n = batch.transitions.len();
        let states: Vec<&[f64]> = batch.transitions.iter().map(|t| t.state.as_slice()).collect();
        let next: Vec<&[f64]> = batch.transitions.iter().map(|t| t.next_state.as_slice()).collect();
        let (raw, cache) = self.online.forward(stack(&states).view())?;
        let q = self.head.q_values(raw.view());
        let next = stack(&next);
        let next_target = self.head.q_values(self.target.predict(next.view())?.view());
        let next_online = if self.params.double_q {
            Some(self.head.q_values(self.online.predict(next.view())?.view()))
        } else {
            None
        };
        let masks: Vec<Vec<bool>> = batch
            .transitions
            .iter()
            .map(|t| discrete_mask(&self.actions, &t.allowed_next))
            .collect();
        let rewards: Vec<f64> = batch.transitions.iter().map(|t| t.reward).collect();
        let dones: Vec<bool> = batch.transitions.iter().map(|t| t.done).collect();
        let y = dqn_targets(
            &rewards,
            &dones,
            next_online.as_ref().map(|a| a.view()),
            next_target.view(),
            &masks,
            self.params.gamma,
        );

        let mut dq = Array2::zeros(q.dim());
        let mut td = Vec::with_capacity(n);
        let mut loss = 0.0;
        for (i, t) in batch.transitions.iter().enumerate() {
            let a = match t.action {
                Action::Discrete(a) if a < self.actions.len() => a,
                _ => {
                    return Err(Error::InvalidArgument(
                        "DQN transition without a discrete action".into(),
                    ))
                }
            };
            let delta = q[[i, a]] - y[i];
            let w = batch.weights[i];
            dq[[i, a]] = w * delta / n as f64;
            loss += 0.5 * w * delta * delta / n as f64;
            td.push(delta);
        }
        let indices = batch.indices.clone();
        let (grads, _) = self.online.backward(&cache, self.head.backward(dq.view()).view())?;
        self.opt.step(&mut self.online, &grads)?;
        self.target.soft_update(&self.online, self.params.tau);
        self.buffer.update_priorities(&indices, &td)?;
        Ok(LearnStats {
            value_loss: loss,
            policy_loss: None,
        })
    }
}

impl Agent for DqnAgent {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Dqn
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
        let q = self.q_values(obs)?;
        let mask = discrete_mask(&self.actions, allowed);
        let eps = if explore { self.epsilon() } else { 0.0 };
        let idx = dqn_select(&q, &mask, eps, rng);
        let a = self.actions[idx];
        Ok(PolicyOutput {
            raw: a,
            executed: a,
            violated: !allowed.contains(a),
            stored: Action::Discrete(idx),
            log_prob: None,
            value: None,
            q_values: Some(q),
            chosen_interval: None,
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
            chosen_interval: None,
        });
        let ready = self.buffer.len() >= self.params.learning_starts.max(self.params.batch);
        if ready && self.steps.is_multiple_of(self.params.train_every as u64) {
            return self.learn().map(Some);
        }
        Ok(None)
    }

    fn checkpoint(&self) -> AgentCheckpoint {
        AgentCheckpoint {
            algorithm: Algorithm::Dqn,
            handler: self.handler.kind,
            hyperparams: AgentHyperparams::Dqn(self.params.clone()),
            env: self.env.clone(),
            seed: self.seed,
            steps: self.steps,
            nets: [
                ("q".to_string(), self.online.clone()),
                ("q_target".to_string(), self.target.clone()),
            ]
            .into_iter()
            .collect(),
            scalars: Default::default(),
        }
    }
}
