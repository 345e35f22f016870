use ndarray::{Array2, ArrayView2};
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

use super::dqn::{dqn_select, dqn_targets};
use super::handler::{uniform_full, InputScaler, RestrictionHandler, ANGLE_SCALE};
use super::{
    stack, Agent, AgentCheckpoint, AgentHyperparams, Algorithm, LearnStats, PamParams, PolicyOutput, QHead, StepRecord,
    DISCRETE_ACTIONS,
};
use crate::env::{EnvConfig, Observation};
use crate::error::{Error, Result};
use crate::intervals::{bin_mask, bin_partition, scale_to_interval, Interval, IntervalSet};
use crate::nn::{Adam, Mlp, OutputActivation};
use crate::replay::{Action, ReplayBuffer, SampleMode, Transition};
use crate::rng::{stream, Role};

/// Parameterized action masking: a parameter network proposes one heading per bin,
/// a Q-network over `(state, parameters)` scores the bins, and bins overlapping any
/// restriction are masked out of both selection and the parameter input.
#[derive(Debug, Clone)]
pub struct PamAgent {
    handler: RestrictionHandler,
    params: PamParams,
    scaler: InputScaler,
    bins: Vec<Interval>,
    head: QHead,
    actor: Mlp,
    actor_target: Mlp,
    actor_opt: Adam,
    q: Mlp,
    q_target: Mlp,
    q_opt: Adam,
    buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    env: EnvConfig,
    seed: u64,
    steps: u64,
}

impl PamAgent {
    pub fn new(handler: RestrictionHandler, params: PamParams, env: &EnvConfig, seed: u64) -> Result<Self> {
        let bins = bin_partition(&handler.space, DISCRETE_ACTIONS)?;
        let k = bins.len();
        let head = QHead::new(k, params.dueling);
        let mut init = stream(seed, Role::AgentInit);
        let actor = Mlp::new(
            &super::sizes(Observation::LEN, &params.param_hidden, k),
            OutputActivation::TanhScaled {
                min: handler.space.min,
                max: handler.space.max,
            },
            &mut init,
        )?;
        let q = Mlp::new(
            &super::sizes(Observation::LEN + k, &params.hidden, head.raw_width()),
            OutputActivation::Linear,
            &mut init,
        )?;
        Ok(Self {
            handler,
            scaler: InputScaler::new(env),
            bins,
            head,
            actor_target: actor.clone(),
            actor_opt: Adam::new(&actor, params.param_lr, 0.0),
            actor,
            q_target: q.clone(),
            q_opt: Adam::new(&q, params.lr, 0.0),
            q,
            buffer: ReplayBuffer::new(params.buffer, params.alpha, params.beta)?,
            rng: stream(seed, Role::Replay),
            env: env.clone(),
            seed,
            steps: 0,
            params,
        })
    }

    pub(crate) fn restore(handler: RestrictionHandler, params: PamParams, cp: &AgentCheckpoint) -> Result<Self> {
        let mut agent = Self::new(handler, params, &cp.env, cp.seed)?;
        agent.actor = cp.net("actor")?;
        agent.actor_target = cp.net("actor_target")?;
        agent.q = cp.net("q")?;
        agent.q_target = cp.net("q_target")?;
        agent.actor_opt = Adam::new(&agent.actor, agent.params.param_lr, 0.0);
        agent.q_opt = Adam::new(&agent.q, agent.params.lr, 0.0);
        agent.steps = cp.steps;
        Ok(agent)
    }

    pub fn bins(&self) -> &[Interval] {
        &self.bins
    }

    /// Maps one raw parameter per bin (full range) into its bin.
    pub fn scale_params(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(&self.bins)
            .map(|(&a, b)| scale_to_interval(&self.handler.space, b, a))
            .collect()
    }

    fn slopes(&self) -> Vec<f64> {
        self.bins
            .iter()
            .map(|b| b.length() / self.handler.space.width())
            .collect()
    }

    /// Q-network input: state followed by the parameters, zeroed for masked bins.
    pub fn q_input(state: &[f64], params: &[f64], mask: &[bool]) -> Vec<f64> {
        let mut v = state.to_vec();
        v.extend(
            params
                .iter()
                .zip(mask)
                .map(|(&x, &m)| if m { x * ANGLE_SCALE } else { 0.0 }),
        );
        v
    }

    fn q_values(&self, net: &Mlp, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.head.q_values(net.predict(inputs)?.view()))
    }

    /// Scaled parameters for a batch of states from the given parameter network.
    fn batch_params(&self, net: &Mlp, states: ArrayView2<f64>) -> Result<Vec<Vec<f64>>> {
        let raw = net.predict(states)?;
        Ok(raw
            .outer_iter()
            .map(|r| self.scale_params(r.as_slice().expect("row")))
            .collect())
    }

    fn q_inputs(states: ArrayView2<f64>, params: &[Vec<f64>], masks: &[Vec<bool>]) -> Array2<f64> {
        let rows: Vec<Vec<f64>> = states
            .outer_iter()
            .zip(params.iter().zip(masks))
            .map(|(s, (p, m))| Self::q_input(s.as_slice().expect("row"), p, m))
            .collect();
        stack(&rows.iter().map(Vec::as_slice).collect::<Vec<_>>())
    }

    /// `ℒˣ = −mean_i Σ_{k unmasked} Q(s_i, k, x_k)` for given parameters.
    pub fn param_objective(&self, states: ArrayView2<f64>, params: &[Vec<f64>], masks: &[Vec<bool>]) -> Result<f64> {
        let q = self.q_values(&self.q, Self::q_inputs(states, params, masks).view())?;
        let n = states.nrows() as f64;
        let mut total = 0.0;
        for (row, m) in q.outer_iter().zip(masks) {
            total -= row.iter().zip(m).filter(|(_, &ok)| ok).map(|(v, _)| v).sum::<f64>();
        }
        Ok(total / n)
    }

    /// `∂ℒˣ/∂x` (degrees) for given parameters, Q-network held fixed.
    pub fn param_gradient(
        &self,
        states: ArrayView2<f64>,
        params: &[Vec<f64>],
        masks: &[Vec<bool>],
    ) -> Result<Vec<Vec<f64>>> {
        let inputs = Self::q_inputs(states, params, masks);
        let (raw, cache) = self.q.forward(inputs.view())?;
        let n = states.nrows() as f64;
        let k = self.bins.len();
        let dq = Array2::from_shape_fn((raw.nrows(), k), |(i, j)| if masks[i][j] { -1.0 / n } else { 0.0 });
        let (_, dinput) = self.q.backward(&cache, self.head.backward(dq.view()).view())?;
        let offset = states.ncols();
        Ok((0..states.nrows())
            .map(|i| {
                (0..k)
                    .map(|j| {
                        if masks[i][j] {
                            dinput[[i, offset + j]] * ANGLE_SCALE
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect())
    }

    /// One parameter-network step on `ℒˣ` with the Q-network frozen. Returns the loss before the step.
    pub fn actor_step(&mut self, states: ArrayView2<f64>, masks: &[Vec<bool>]) -> Result<f64> {
        let (raw, cache) = self.actor.forward(states)?;
        let params: Vec<Vec<f64>> = raw
            .outer_iter()
            .map(|r| self.scale_params(r.as_slice().expect("row")))
            .collect();
        let loss = self.param_objective(states, &params, masks)?;
        let dx = self.param_gradient(states, &params, masks)?;
        let slopes = self.slopes();
        let draw = Array2::from_shape_fn(raw.dim(), |(i, j)| dx[i][j] * slopes[j]);
        let (g, _) = self.actor.backward(&cache, draw.view())?;
        self.actor_opt.step(&mut self.actor, &g)?;
        Ok(loss)
    }

    fn learn(&mut self) -> Result<LearnStats> {
        let p = self.params.clone();
        let batch = self.buffer.sample(p.batch, SampleMode::Prioritized, &mut self.rng)?;
        let n = batch.transitions.len();
        let states = stack(&batch.transitions.iter().map(|t| t.state.as_slice()).collect::<Vec<_>>());
        let next = stack(
            &batch
                .transitions
                .iter()
                .map(|t| t.next_state.as_slice())
                .collect::<Vec<_>>(),
        );
        let masks: Vec<Vec<bool>> = batch
            .transitions
            .iter()
            .map(|t| bin_mask(&self.bins, &t.allowed))
            .collect();
        let next_masks: Vec<Vec<bool>> = batch
            .transitions
            .iter()
            .map(|t| bin_mask(&self.bins, &t.allowed_next))
            .collect();
        let mut chosen = Vec::with_capacity(n);
        let mut stored = Vec::with_capacity(n);
        for t in &batch.transitions {
            match &t.action {
                Action::Parameterized { bin, params } if *bin < self.bins.len() && params.len() == self.bins.len() => {
                    chosen.push(*bin);
                    stored.push(params.clone());
                }
                _ => {
                    return Err(Error::InvalidArgument(
                        "PAM transition without a parameterized action".into(),
                    ))
                }
            }
        }

        let next_target_params = self.batch_params(&self.actor_target, next.view())?;
        let next_target = self.q_values(
            &self.q_target,
            Self::q_inputs(next.view(), &next_target_params, &next_masks).view(),
        )?;
        let next_online = if p.double_q {
            let xp = self.batch_params(&self.actor, next.view())?;
            Some(self.q_values(&self.q, Self::q_inputs(next.view(), &xp, &next_masks).view())?)
        } else {
            None
        };
        let rewards: Vec<f64> = batch.transitions.iter().map(|t| t.reward).collect();
        let dones: Vec<bool> = batch.transitions.iter().map(|t| t.done).collect();
        let y = dqn_targets(
            &rewards,
            &dones,
            next_online.as_ref().map(|a| a.view()),
            next_target.view(),
            &next_masks,
            p.gamma,
        );

        let inputs = Self::q_inputs(states.view(), &stored, &masks);
        let (raw, cache) = self.q.forward(inputs.view())?;
        let q = self.head.q_values(raw.view());
        let mut dq = Array2::zeros(q.dim());
        let mut td = Vec::with_capacity(n);
        let mut loss = 0.0;
        for i in 0..n {
            let delta = q[[i, chosen[i]]] - y[i];
            let w = batch.weights[i];
            dq[[i, chosen[i]]] = w * delta / n as f64;
            loss += 0.5 * w * delta * delta / n as f64;
            td.push(delta);
        }
        let indices = batch.indices.clone();
        let (g, _) = self.q.backward(&cache, self.head.backward(dq.view()).view())?;
        self.q_opt.step(&mut self.q, &g)?;
        self.buffer.update_priorities(&indices, &td)?;

        let policy_loss = self.actor_step(states.view(), &masks)?;
        self.q_target.soft_update(&self.q, p.tau);
        self.actor_target.soft_update(&self.actor, p.tau);
        Ok(LearnStats {
            value_loss: loss,
            policy_loss: Some(policy_loss),
        })
    }
}

impl Agent for PamAgent {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Pam
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
        let state = self.scaler.observation(obs);
        let params = self.scale_params(&self.actor.predict_one(&state)?);
        let mask = bin_mask(&self.bins, allowed);
        let raw_q = self.q.predict_one(&Self::q_input(&state, &params, &mask))?;
        let q = self
            .head
            .q_values(ArrayView2::from_shape((1, raw_q.len()), &raw_q).expect("row"))
            .into_raw_vec_and_offset()
            .0;
        let (bin, executed) = if mask.iter().any(|&m| m) {
            let eps = if explore {
                self.params.epsilon.value(self.steps)
            } else {
                0.0
            };
            let k = dqn_select(&q, &mask, eps, rng);
            (k, params[k])
        } else {
            let a = uniform_full(&self.handler.space, rng);
            let k = self
                .bins
                .iter()
                .position(|b| b.contains_closed(a))
                .unwrap_or(self.bins.len() - 1);
            (k, a)
        };
        Ok(PolicyOutput {
            raw: executed,
            executed,
            violated: !allowed.contains(executed),
            stored: Action::Parameterized { bin, params },
            log_prob: None,
            value: None,
            q_values: Some(q),
            chosen_interval: Some(self.bins[bin]),
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
        nets.insert("q".into(), self.q.clone());
        nets.insert("q_target".into(), self.q_target.clone());
        AgentCheckpoint {
            algorithm: Algorithm::Pam,
            handler: self.handler.kind,
            hyperparams: AgentHyperparams::Pam(self.params.clone()),
            env: self.env.clone(),
            seed: self.seed,
            steps: self.steps,
            nets,
            scalars: Default::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{preset, HandlerKind};
    use crate::intervals::ActionSpace;
    use rand::Rng;

    fn agent() -> PamAgent {
        let env = EnvConfig::default();
        let AgentHyperparams::Pam(p) = preset(Algorithm::Pam, HandlerKind::Native, false).unwrap() else {
            unreachable!()
        };
        PamAgent::new(
            RestrictionHandler::new(HandlerKind::Native, env.action_space().unwrap()),
            p,
            &env,
            2,
        )
        .unwrap()
    }

    fn obs(t: usize) -> Observation {
        Observation {
            x: 3.0 + t as f64,
            y: 2.0,
            goal_angle: -20.0 + 5.0 * t as f64,
            goal_distance: 10.0,
            perspective: 90.0,
            t,
        }
    }

    fn set(v: &[(f64, f64)]) -> IntervalSet {
        IntervalSet::new(v.iter().map(|&(l, h)| Interval::new(l, h).unwrap()).collect()).unwrap()
    }

    #[test]
    fn unrestricted_has_all_bins() {
        let a = agent();
        let full = a.handler.space.full_set();
        assert!(bin_mask(a.bins(), &full).iter().all(|&m| m));
    }

    #[test]
    fn four_bins_leave_only_the_first() {
        let space = ActionSpace::new(-110.0, 110.0).unwrap();
        let bins = bin_partition(&space, 4).unwrap();
        assert_eq!(
            bin_mask(&bins, &set(&[(-110.0, -55.0)])),
            vec![true, false, false, false]
        );
    }

    #[test]
    fn choices_stay_in_bin_and_allowed() {
        let a = agent();
        let mut rng = stream(4, Role::Exploration);
        let allowed = set(&[(-110.0, -40.0), (30.0, 110.0)]);
        let mask = bin_mask(a.bins(), &allowed);
        for t in 0..200 {
            let o = a.act(&obs(t % 30), &allowed, true, &mut rng).unwrap();
            let Action::Parameterized { bin, params } = &o.stored else {
                panic!()
            };
            assert!(mask[*bin]);
            for (x, b) in params.iter().zip(a.bins()) {
                assert!(b.contains_closed(*x));
            }
            assert!(allowed.contains(o.executed));
            assert!(!o.violated);
        }
    }

    #[test]
    fn all_masked_falls_back_to_full_space() {
        let a = agent();
        let mut rng = stream(4, Role::Exploration);
        let allowed = set(&[(1.0, 2.0)]);
        let o = a.act(&obs(0), &allowed, false, &mut rng).unwrap();
        assert!(a.handler.space.contains(o.executed));
        assert_eq!(o.violated, !allowed.contains(o.executed));
    }

    fn fixed_batch(a: &PamAgent, n: usize) -> (Array2<f64>, Vec<Vec<bool>>) {
        let mut rng = stream(9, Role::Search);
        let rows: Vec<Vec<f64>> = (0..n).map(|t| a.scaler.observation(&obs(t))).collect();
        let masks = (0..n)
            .map(|_| (0..DISCRETE_ACTIONS).map(|_| rng.random_bool(0.7)).collect())
            .collect();
        (stack(&rows.iter().map(Vec::as_slice).collect::<Vec<_>>()), masks)
    }

    #[test]
    fn frozen_q_parameter_loss_decreases() {
        let mut a = agent();
        a.actor_opt.lr = 1e-3;
        let (states, masks) = fixed_batch(&a, 16);
        let q_before = a.q.clone();
        let first = a.actor_step(states.view(), &masks).unwrap();
        let mut last = first;
        for _ in 0..99 {
            last = a.actor_step(states.view(), &masks).unwrap();
        }
        assert!(last < first, "{first} -> {last}");
        assert_eq!(a.q.weights(), q_before.weights());
    }

    #[test]
    fn masked_parameters_get_zero_gradient() {
        let a = agent();
        let (states, masks) = fixed_batch(&a, 4);
        let params = a.batch_params(&a.actor, states.view()).unwrap();
        let grad = a.param_gradient(states.view(), &params, &masks).unwrap();
        for i in 0..4 {
            for k in 0..DISCRETE_ACTIONS {
                let h = 1e-4;
                let mut up = params.clone();
                up[i][k] += h;
                let mut down = params.clone();
                down[i][k] -= h;
                let fd = (a.param_objective(states.view(), &up, &masks).unwrap()
                    - a.param_objective(states.view(), &down, &masks).unwrap())
                    / (2.0 * h);
                if masks[i][k] {
                    assert!(
                        (fd - grad[i][k]).abs() < 1e-6 * (1.0 + fd.abs()),
                        "{fd} vs {}",
                        grad[i][k]
                    );
                } else {
                    assert_eq!(grad[i][k], 0.0);
                    assert_eq!(fd, 0.0);
                }
            }
        }
    }
}
