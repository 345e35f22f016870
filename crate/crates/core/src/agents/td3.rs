use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

use super::handler::{HandlerKind, InputScaler, RestrictionHandler, ANGLE_SCALE};
use super::{
    stack, Agent, AgentCheckpoint, AgentHyperparams, Algorithm, LearnStats, PolicyOutput, StepRecord, Td3Params,
};
use crate::env::{EnvConfig, Observation};
use crate::error::{Error, Result};
use crate::intervals::{scale_to_allowed, scaling_slope, ActionSpace, IntervalSet};
use crate::nn::{Adam, Mlp, OutputActivation};
use crate::replay::{Action, ReplayBuffer, SampleMode, Transition};
use crate::rng::{stream, Role};

/// Gaussian sample with standard deviation `std`; exactly zero when `std == 0`.
pub(crate) fn gaussian(std: f64, rng: &mut dyn RngCore) -> f64 {
    if std <= 0.0 {
        return 0.0;
    }
    Normal::new(0.0, std).expect("positive std").sample(rng)
}

/// Appends a column of actions (degrees) to a block of inputs, in network units.
pub(crate) fn with_actions(inputs: ArrayView2<f64>, actions: &[f64]) -> Array2<f64> {
    let col = Array2::from_shape_fn((actions.len(), 1), |(i, _)| actions[i] * ANGLE_SCALE);
    concatenate(Axis(1), &[inputs, col.view()]).expect("matching rows")
}

/// Clipped target-smoothing noise in degrees.
pub(crate) fn smoothing_noise(p: &Td3Params, space: &ActionSpace, rng: &mut dyn RngCore) -> f64 {
    let half = 0.5 * space.width();
    let c = p.noise_clip * half;
    gaussian(p.target_noise * half, rng).clamp(-c, c)
}

/// Two critics with target copies. Inputs are `[state features…, action]`.
#[derive(Debug, Clone)]
pub struct TwinCritics {
    pub q1: Mlp,
    pub q2: Mlp,
    pub target1: Mlp,
    pub target2: Mlp,
    opt1: Adam,
    opt2: Adam,
}

impl TwinCritics {
    pub fn new<R: Rng + ?Sized>(layer_sizes: &[usize], lr: f64, l2: f64, rng: &mut R) -> Result<Self> {
        let q1 = Mlp::new(layer_sizes, OutputActivation::Linear, rng)?;
        let q2 = Mlp::new(layer_sizes, OutputActivation::Linear, rng)?;
        Ok(Self::from_nets(q1.clone(), q2.clone(), q1, q2, lr, l2))
    }

    pub fn from_nets(q1: Mlp, q2: Mlp, target1: Mlp, target2: Mlp, lr: f64, l2: f64) -> Self {
        Self {
            opt1: Adam::new(&q1, lr, l2),
            opt2: Adam::new(&q2, lr, l2),
            q1,
            q2,
            target1,
            target2,
        }
    }

    /// The same critics with their roles exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            q1: self.q2.clone(),
            q2: self.q1.clone(),
            target1: self.target2.clone(),
            target2: self.target1.clone(),
            opt1: self.opt2.clone(),
            opt2: self.opt1.clone(),
        }
    }

    /// `min(Q′₁, Q′₂)` per row.
    pub fn target_min(&self, inputs: ArrayView2<f64>) -> Result<Vec<f64>> {
        let a = self.target1.predict(inputs)?;
        let b = self.target2.predict(inputs)?;
        Ok(a.iter().zip(b.iter()).map(|(&x, &y)| x.min(y)).collect())
    }

    /// One Adam step of both critics towards `y` under importance weights.
    ///
    /// Returns the mean weighted loss of the first critic and its TD errors.
    pub fn update(&mut self, inputs: ArrayView2<f64>, y: &[f64], weights: &[f64]) -> Result<(f64, Vec<f64>)> {
        let n = y.len() as f64;
        let mut loss1 = 0.0;
        let mut td1 = Vec::new();
        for (k, (net, opt)) in [(&mut self.q1, &mut self.opt1), (&mut self.q2, &mut self.opt2)]
            .into_iter()
            .enumerate()
        {
            let (q, cache) = net.forward(inputs)?;
            let mut dq = Array2::zeros(q.dim());
            for i in 0..y.len() {
                let delta = q[[i, 0]] - y[i];
                dq[[i, 0]] = weights[i] * delta / n;
                if k == 0 {
                    loss1 += 0.5 * weights[i] * delta * delta / n;
                    td1.push(delta);
                }
            }
            let (g, _) = net.backward(&cache, dq.view())?;
            opt.step(net, &g)?;
        }
        Ok((loss1, td1))
    }

    /// `Q₁` and `∂Q₁/∂input[col]` for every row.
    pub fn q1_input_gradient(&self, inputs: ArrayView2<f64>, col: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let (q, cache) = self.q1.forward(inputs)?;
        let ones = Array2::ones(q.dim());
        let (_, dinput) = self.q1.backward(&cache, ones.view())?;
        Ok((q.column(0).to_vec(), dinput.column(col).to_vec()))
    }

    pub fn soft_update(&mut self, tau: f64) {
        self.target1.soft_update(&self.q1, tau);
        self.target2.soft_update(&self.q2, tau);
    }

    pub(crate) fn export(&self, nets: &mut BTreeMap<String, Mlp>) {
        nets.insert("critic1".into(), self.q1.clone());
        nets.insert("critic2".into(), self.q2.clone());
        nets.insert("critic1_target".into(), self.target1.clone());
        nets.insert("critic2_target".into(), self.target2.clone());
    }

    pub(crate) fn import(cp: &AgentCheckpoint, lr: f64, l2: f64) -> Result<Self> {
        Ok(Self::from_nets(
            cp.net("critic1")?,
            cp.net("critic2")?,
            cp.net("critic1_target")?,
            cp.net("critic2_target")?,
            lr,
            l2,
        ))
    }
}

/// Deterministic actor with twin critics; restrictions handled by a wrapper.
#[derive(Debug, Clone)]
pub struct Td3Agent {
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

impl Td3Agent {
    pub fn new(handler: RestrictionHandler, params: Td3Params, env: &EnvConfig, seed: u64) -> Result<Self> {
        let mut init = stream(seed, Role::AgentInit);
        let input = handler.input_len();
        let space = handler.space;
        let actor = Mlp::new(
            &super::sizes(input, &params.actor_hidden, 1),
            OutputActivation::TanhScaled {
                min: space.min,
                max: space.max,
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

    fn input(&self, obs: &Observation, allowed: &IntervalSet) -> Result<Vec<f64>> {
        Ok(self.scaler.scale(self.handler.augment_observation(obs, allowed)?))
    }

    /// Deterministic policy output `μ(s)` in degrees.
    pub fn policy(&self, obs: &Observation, allowed: &IntervalSet) -> Result<f64> {
        Ok(self.actor.predict_one(&self.input(obs, allowed)?)?[0])
    }

    pub fn noise_std(&self) -> f64 {
        self.params.noise.value(self.steps)
    }

    pub fn critics(&self) -> &TwinCritics {
        &self.critics
    }

    fn masking(&self) -> bool {
        self.handler.kind == HandlerKind::ContinuousMasking
    }

    fn learn(&mut self) -> Result<LearnStats> {
        let p = &self.params;
        let space = self.handler.space;
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
        let mut actions = Vec::with_capacity(n);
        for t in &batch.transitions {
            match t.action {
                Action::Continuous(a) => actions.push(a),
                _ => {
                    return Err(Error::InvalidArgument(
                        "TD3 transition without a continuous action".into(),
                    ))
                }
            }
        }

        let mu_next = self.actor_target.predict(next.view())?;
        let mut next_actions = Vec::with_capacity(n);
        for (i, t) in batch.transitions.iter().enumerate() {
            let a = space.clamp(mu_next[[i, 0]] + smoothing_noise(p, &space, &mut self.rng));
            let a = if self.handler.kind == HandlerKind::ContinuousMasking && !t.allowed_next.is_empty() {
                scale_to_allowed(&space, &t.allowed_next, a)?
            } else {
                a
            };
            next_actions.push(a);
        }
        let q_next = self
            .critics
            .target_min(with_actions(next.view(), &next_actions).view())?;
        let y: Vec<f64> = batch
            .transitions
            .iter()
            .zip(&q_next)
            .map(|(t, &q)| if t.done { t.reward } else { t.reward + p.gamma * q })
            .collect();
        let (value_loss, td) = self
            .critics
            .update(with_actions(states.view(), &actions).view(), &y, &batch.weights)?;
        self.updates += 1;

        let mut policy_loss = None;
        if self.updates.is_multiple_of(p.policy_delay as u64) {
            let (mu, cache) = self.actor.forward(states.view())?;
            let mut executed = Vec::with_capacity(n);
            let mut slopes = Vec::with_capacity(n);
            for (i, t) in batch.transitions.iter().enumerate() {
                let a = mu[[i, 0]];
                if self.handler.kind == HandlerKind::ContinuousMasking && !t.allowed.is_empty() {
                    executed.push(scale_to_allowed(&space, &t.allowed, a)?);
                    slopes.push(scaling_slope(&space, &t.allowed));
                } else {
                    executed.push(a);
                    slopes.push(1.0);
                }
            }
            let col = states.ncols();
            let (q, dq) = self
                .critics
                .q1_input_gradient(with_actions(states.view(), &executed).view(), col)?;
            let dmu = Array2::from_shape_fn((n, 1), |(i, _)| -dq[i] * ANGLE_SCALE * slopes[i] / n as f64);
            let (g, _) = self.actor.backward(&cache, dmu.view())?;
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

impl Agent for Td3Agent {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Td3
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
        let mu = self.policy(obs, allowed)?;
        let raw = if explore {
            self.handler.space.clamp(mu + gaussian(self.noise_std(), rng))
        } else {
            mu
        };
        let (executed, violated) = self.handler.apply(raw, allowed, rng)?;
        let stored = if self.masking() { executed } else { raw };
        Ok(PolicyOutput {
            raw,
            executed,
            violated,
            stored: Action::Continuous(stored),
            log_prob: None,
            value: None,
            q_values: None,
            chosen_interval: None,
        })
    }

    fn observe(&mut self, r: StepRecord) -> Result<Option<LearnStats>> {
        self.steps += 1;
        let done = r.done();
        let state = self.input(&r.observation, &r.allowed)?;
        let next_state = self.input(&r.next_observation, &r.next_allowed)?;
        self.buffer.push(Transition {
            state,
            action: r.output.stored,
            reward: r.reward,
            next_state,
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
        let mut nets = BTreeMap::new();
        nets.insert("actor".into(), self.actor.clone());
        nets.insert("actor_target".into(), self.actor_target.clone());
        self.critics.export(&mut nets);
        AgentCheckpoint {
            algorithm: Algorithm::Td3,
            handler: self.handler.kind,
            hyperparams: AgentHyperparams::Td3(self.params.clone()),
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
    use crate::agents::{preset, Linear};
    use crate::intervals::Interval;

    fn obs() -> Observation {
        Observation {
            x: 7.5,
            y: 1.0,
            goal_angle: 30.0,
            goal_distance: 12.0,
            perspective: 90.0,
            t: 0,
        }
    }

    fn agent(kind: HandlerKind, noise: f64) -> Td3Agent {
        let env = EnvConfig::default();
        let AgentHyperparams::Td3(mut p) = preset(Algorithm::Td3, kind, false).unwrap() else {
            unreachable!()
        };
        p.noise = Linear::constant(noise);
        Td3Agent::new(RestrictionHandler::new(kind, env.action_space().unwrap()), p, &env, 3).unwrap()
    }

    #[test]
    fn zero_noise_is_deterministic() {
        let a = agent(HandlerKind::Penalty, 0.0);
        let full = a.handler.space.full_set();
        let mut rng = stream(0, Role::Exploration);
        let mu = a.policy(&obs(), &full).unwrap();
        for _ in 0..5 {
            assert_eq!(a.act(&obs(), &full, true, &mut rng).unwrap().executed, mu);
        }
    }

    #[test]
    fn exploration_noise_std_matches() {
        let a = agent(HandlerKind::Penalty, 10.0);
        let full = a.handler.space.full_set();
        let mu = a.policy(&obs(), &full).unwrap();
        assert!(
            mu.abs() < 60.0,
            "initial policy output {mu} too close to the bounds for this check"
        );
        let mut rng = stream(0, Role::Exploration);
        let samples: Vec<f64> = (0..10_000)
            .map(|_| a.act(&obs(), &full, true, &mut rng).unwrap().executed - mu)
            .collect();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let std = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64).sqrt();
        assert!((std / 10.0 - 1.0).abs() < 0.05, "std {std}");
    }

    #[test]
    fn huge_noise_stays_in_range() {
        let a = agent(HandlerKind::Penalty, 500.0);
        let full = a.handler.space.full_set();
        let mut rng = stream(0, Role::Exploration);
        for _ in 0..1000 {
            let o = a.act(&obs(), &full, true, &mut rng).unwrap();
            assert!((-110.0..=110.0).contains(&o.executed));
        }
    }

    #[test]
    fn masking_stores_executed_action() {
        let a = agent(HandlerKind::ContinuousMasking, 5.0);
        let allowed = IntervalSet::new(vec![Interval::new(20.0, 40.0).unwrap()]).unwrap();
        let mut rng = stream(0, Role::Exploration);
        let o = a.act(&obs(), &allowed, true, &mut rng).unwrap();
        assert!(allowed.contains(o.executed));
        assert_eq!(o.stored, Action::Continuous(o.executed));

        let p = agent(HandlerKind::Projection, 5.0);
        let o = p.act(&obs(), &allowed, true, &mut rng).unwrap();
        assert_eq!(o.stored, Action::Continuous(o.raw));
    }

    fn critics(seed: u64, lr: f64) -> TwinCritics {
        TwinCritics::new(&[4, 32, 1], lr, 0.0, &mut stream(seed, Role::AgentInit)).unwrap()
    }

    #[test]
    fn twin_target_is_symmetric() {
        let c = critics(5, 1e-3);
        let x = Array2::from_shape_fn((7, 4), |(i, j)| (i as f64 - 3.0) * 0.2 + j as f64 * 0.1);
        assert_eq!(
            c.target_min(x.view()).unwrap(),
            c.swapped().target_min(x.view()).unwrap()
        );
        let same = TwinCritics::from_nets(c.q1.clone(), c.q1.clone(), c.q1.clone(), c.q1.clone(), 1e-3, 0.0);
        assert_eq!(
            same.target_min(x.view()).unwrap(),
            same.target1.predict(x.view()).unwrap().column(0).to_vec()
        );
    }

    #[test]
    fn single_transition_fixed_point() {
        let mut c = critics(6, 1e-3);
        let x = ndarray::array![[0.2, -0.4, 0.1, 0.3]];
        for _ in 0..500 {
            c.update(x.view(), &[1.7], &[1.0]).unwrap();
        }
        let q = c.q1.predict(x.view()).unwrap()[[0, 0]];
        assert!((q - 1.7).abs() < 1e-2, "q = {q}");
    }

    #[test]
    fn zero_discount_loss_is_squared_reward_error() {
        let mut c = critics(7, 1e-3);
        let x = ndarray::array![[0.2, -0.4, 0.1, 0.3], [0.0, 0.5, -0.5, 0.1]];
        let q = c.q1.predict(x.view()).unwrap();
        let r = [1.0, -2.0];
        let expected = 0.5 * ((q[[0, 0]] - r[0]).powi(2) + (q[[1, 0]] - r[1]).powi(2)) / 2.0;
        let (loss, td) = c.update(x.view(), &r, &[1.0, 1.0]).unwrap();
        assert!((loss - expected).abs() < 1e-12);
        assert!((td[0] - (q[[0, 0]] - r[0])).abs() < 1e-12);
    }
}
