//! Actor-critic scheduler.
//!
//! The actor maps a state vector to an allocation on the probability simplex
//! (softmax output). The critic regresses the immediate reward of a
//! `(state, action)` pair; the actor then ascends the critic's estimate
//! through the critic's action-input gradient. There are no bootstrapped
//! targets: each step's reward is the whole regression target.

use std::collections::VecDeque;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::SIMPLEX_TOLERANCE;
use crate::error::{Error, Result};
use crate::nn::{backward_accumulate, AdamState, GradientVector, NetSpec, Network, OutputActivation};
use crate::seeding::{self, Stream};

/// One `(state, executed action, reward)` experience.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
}

/// Transitions packed row-wise into matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
}

/// Borrowed rows of a [`Batch`].
#[derive(Debug, Clone, Copy)]
pub struct BatchView<'a> {
    pub states: ArrayView2<'a, f64>,
    pub actions: ArrayView2<'a, f64>,
    pub rewards: ArrayView1<'a, f64>,
}

impl Batch {
    pub fn from_transitions<'a, I>(transitions: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Transition>,
    {
        let items: Vec<&Transition> = transitions.into_iter().collect();
        let first = items.first().ok_or_else(|| Error::contract("empty batch"))?;
        let (sl, al) = (first.state.len(), first.action.len());
        let mut states = Array2::zeros((items.len(), sl));
        let mut actions = Array2::zeros((items.len(), al));
        let mut rewards = Array1::zeros(items.len());
        for (i, t) in items.iter().enumerate() {
            if t.state.len() != sl || t.action.len() != al {
                return Err(Error::contract("transitions in a batch differ in shape"));
            }
            states.row_mut(i).assign(&ArrayView1::from(&t.state[..]));
            actions.row_mut(i).assign(&ArrayView1::from(&t.action[..]));
            rewards[i] = t.reward;
        }
        Ok(Self { states, actions, rewards })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn view(&self) -> BatchView<'_> {
        self.rows(0, self.len())
    }

    pub fn rows(&self, start: usize, end: usize) -> BatchView<'_> {
        BatchView {
            states: self.states.slice(s![start..end, ..]),
            actions: self.actions.slice(s![start..end, ..]),
            rewards: self.rewards.slice(s![start..end]),
        }
    }

    /// Rows at `indices`, in that order (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> Batch {
        Batch {
            states: self.states.select(Axis(0), indices),
            actions: self.actions.select(Axis(0), indices),
            rewards: self.rewards.select(Axis(0), indices),
        }
    }

    pub fn transition(&self, i: usize) -> Transition {
        Transition {
            state: self.states.row(i).to_vec(),
            action: self.actions.row(i).to_vec(),
            reward: self.rewards[i],
        }
    }
}

impl BatchView<'_> {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Critic input: `state ‖ action` per row.
    fn critic_input(&self) -> Array2<f64> {
        ndarray::concatenate(Axis(1), &[self.states, self.actions]).unwrap()
    }
}

/// FIFO experience ring with uniform sampling (with replacement).
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: VecDeque<Transition>,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity.min(1 << 16)),
            rng: seeding::rng(seed),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.entries.iter()
    }

    pub fn sample(&mut self, n: usize) -> Result<Batch> {
        if self.entries.is_empty() {
            return Err(Error::contract("cannot sample from an empty replay buffer"));
        }
        let len = self.entries.len();
        let picks: Vec<usize> = (0..n).map(|_| self.rng.gen_range(0..len)).collect();
        Batch::from_transitions(picks.into_iter().map(|i| &self.entries[i]))
    }
}

/// Linear exploration decay: `initial_epsilon` at episode 0 down to zero at
/// `zero_fraction · total_episodes`, zero afterwards. Constant within an
/// episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplorationSchedule {
    pub initial_epsilon: f64,
    pub zero_fraction: f64,
}

impl Default for ExplorationSchedule {
    fn default() -> Self {
        Self { initial_epsilon: 1.0, zero_fraction: 0.5 }
    }
}

impl ExplorationSchedule {
    pub fn epsilon(&self, episode: usize, total_episodes: usize) -> f64 {
        let horizon = self.zero_fraction * total_episodes as f64;
        if horizon <= 0.0 {
            return 0.0;
        }
        let frac = 1.0 - episode as f64 / horizon;
        if frac <= 0.0 {
            0.0
        } else {
            self.initial_epsilon * frac
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub learning_rate_actor: f64,
    pub learning_rate_critic: f64,
    /// Hidden layer widths shared by actor and critic.
    pub hidden_layers: Vec<usize>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            buffer_capacity: 100_000,
            learning_rate_actor: 1e-4,
            learning_rate_critic: 1e-4,
            hidden_layers: vec![128, 128, 128],
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.buffer_capacity == 0 {
            return Err(Error::config("batch_size and buffer_capacity must be positive"));
        }
        if self.batch_size > self.buffer_capacity {
            return Err(Error::config("batch_size must not exceed buffer_capacity"));
        }
        for lr in [self.learning_rate_actor, self.learning_rate_critic] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config("learning rates must be positive"));
            }
        }
        if self.hidden_layers.contains(&0) {
            return Err(Error::config("hidden layer widths must be positive"));
        }
        Ok(())
    }

    pub fn actor_spec(&self, num_users: usize) -> NetSpec {
        let mut sizes = vec![4 * num_users];
        sizes.extend(&self.hidden_layers);
        sizes.push(num_users);
        NetSpec::new(sizes, OutputActivation::Softmax).expect("valid actor shape")
    }

    pub fn critic_spec(&self, num_users: usize) -> NetSpec {
        let mut sizes = vec![5 * num_users];
        sizes.extend(&self.hidden_layers);
        sizes.push(1);
        NetSpec::new(sizes, OutputActivation::Linear).expect("valid critic shape")
    }
}

/// Which network a gradient belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetKind {
    Actor,
    Critic,
}

/// Hook that may rewrite a gradient before the optimizer consumes it.
pub trait GradientTransform: Send + Sync {
    fn apply(
        &self,
        target: NetKind,
        actor: &Network,
        critic: &Network,
        grad: &mut GradientVector,
    ) -> Result<()>;
}

/// Actor forward pass on one state.
pub fn act(actor: &Network, state: &[f64]) -> Result<Vec<f64>> {
    if state.len() != actor.spec.input_len() {
        return Err(Error::contract(format!(
            "state vector has {} entries, actor expects {}",
            state.len(),
            actor.spec.input_len()
        )));
    }
    actor.forward_one(state)
}

/// Mixes `action` with a uniform draw: `ε·ā + (1−ε)·a`, renormalized by its sum.
pub fn explore_mix(action: &[f64], epsilon: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let noise: Vec<f64> = (0..action.len()).map(|_| rng.gen::<f64>()).collect();
        if epsilon == 0.0 {
            return action.to_vec();
        }
        let mixed: Vec<f64> = noise
            .iter()
            .zip(action)
            .map(|(n, a)| epsilon * n + (1.0 - epsilon) * a)
            .collect();
        let sum: f64 = mixed.iter().sum();
        if sum > 0.0 {
            return mixed.into_iter().map(|x| x / sum).collect();
        }
    }
}

fn check_batch(batch: &BatchView<'_>) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::contract("gradient computation needs a non-empty batch"));
    }
    Ok(())
}

/// Adds `scale · ∇ Σ_rows (Q − r)²` into `grad`; returns `Σ_rows (Q − r)²`.
pub(crate) fn accumulate_critic_grad(
    critic: &Network,
    batch: BatchView<'_>,
    scale: f64,
    grad: &mut GradientVector,
) -> Result<f64> {
    let tape = critic.forward(batch.critic_input().view())?;
    let residual = &tape.output().column(0) - &batch.rewards;
    let loss = residual.dot(&residual);
    let out_grad = (residual * (2.0 * scale)).insert_axis(Axis(1));
    backward_accumulate(&critic.spec, &critic.params, &tape, out_grad.view(), Some(grad))?;
    Ok(loss)
}

/// Adds `scale · ∇_actor Σ_rows −Q(s, actor(s))` into `grad`; returns
/// `Σ_rows −Q(s, actor(s))`.
pub(crate) fn accumulate_actor_grad(
    actor: &Network,
    critic: &Network,
    batch: BatchView<'_>,
    scale: f64,
    grad: &mut GradientVector,
) -> Result<f64> {
    let actor_tape = actor.forward(batch.states)?;
    let proposed = actor_tape.output();
    let critic_in = ndarray::concatenate(Axis(1), &[batch.states, proposed.view()]).unwrap();
    let critic_tape = critic.forward(critic_in.view())?;
    let objective = -critic_tape.output().sum();
    let dq = Array2::from_elem((batch.len(), 1), -scale);
    let input_grad = backward_accumulate(&critic.spec, &critic.params, &critic_tape, dq.view(), None)?;
    let state_len = batch.states.ncols();
    let action_grad = input_grad.slice(s![.., state_len..]);
    backward_accumulate(&actor.spec, &actor.params, &actor_tape, action_grad, Some(grad))?;
    Ok(objective)
}

/// Mean squared reward-regression error and its exact parameter gradient.
pub fn critic_grad(critic: &Network, batch: BatchView<'_>) -> Result<(f64, GradientVector)> {
    check_batch(&batch)?;
    let n = batch.len() as f64;
    let mut grad = GradientVector::zeros(critic.spec.num_params());
    let loss = accumulate_critic_grad(critic, batch, 1.0 / n, &mut grad)?;
    Ok((loss / n, grad))
}

/// Mean of `−Q(s, actor(s))` and its gradient w.r.t. the actor parameters,
/// holding the critic fixed.
pub fn actor_grad(
    actor: &Network,
    critic: &Network,
    batch: BatchView<'_>,
) -> Result<(f64, GradientVector)> {
    check_batch(&batch)?;
    let n = batch.len() as f64;
    let mut grad = GradientVector::zeros(actor.spec.num_params());
    let objective = accumulate_actor_grad(actor, critic, batch, 1.0 / n, &mut grad)?;
    Ok((objective / n, grad))
}

/// Scalars reported by one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStats {
    pub critic_loss: f64,
    pub actor_objective: f64,
}

/// Actor, critic, their optimizers, the replay buffer and the exploration stream.
#[derive(Debug, Clone)]
pub struct Agent {
    pub config: AgentConfig,
    pub actor: Network,
    pub critic: Network,
    pub actor_adam: AdamState,
    pub critic_adam: AdamState,
    pub buffer: ReplayBuffer,
    explore_rng: ChaCha8Rng,
}

impl Agent {
    /// Fresh randomly initialized agent for `num_users` users.
    pub fn new(config: AgentConfig, num_users: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let actor = Network::new(config.actor_spec(num_users), seeding::derive(seed, Stream::ActorInit, 0));
        let critic =
            Network::new(config.critic_spec(num_users), seeding::derive(seed, Stream::CriticInit, 0));
        Self::from_networks(config, actor, critic, None, seed)
    }

    /// Agent around existing networks (and optionally their Adam states),
    /// with an empty replay buffer.
    pub fn from_networks(
        config: AgentConfig,
        actor: Network,
        critic: Network,
        adam: Option<(AdamState, AdamState)>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let (actor_adam, critic_adam) = adam.unwrap_or_else(|| {
            (
                AdamState::new(actor.params.len(), config.learning_rate_actor),
                AdamState::new(critic.params.len(), config.learning_rate_critic),
            )
        });
        if actor_adam.first_moment.len() != actor.params.len()
            || critic_adam.first_moment.len() != critic.params.len()
        {
            return Err(Error::contract("optimizer state does not match network size"));
        }
        Ok(Self {
            buffer: ReplayBuffer::new(config.buffer_capacity, seeding::derive(seed, Stream::Replay, 0)),
            explore_rng: seeding::derived_rng(seed, Stream::Exploration, 0),
            config,
            actor,
            critic,
            actor_adam,
            critic_adam,
        })
    }

    pub fn num_users(&self) -> usize {
        self.actor.spec.output_len()
    }

    pub fn act(&self, state: &[f64]) -> Result<Vec<f64>> {
        act(&self.actor, state)
    }

    pub fn explore(&mut self, action: &[f64], epsilon: f64) -> Vec<f64> {
        explore_mix(action, epsilon, &mut self.explore_rng)
    }

    /// Stores a transition; rejects actions that left the simplex.
    pub fn remember(&mut self, t: Transition) -> Result<()> {
        let sum: f64 = t.action.iter().sum();
        if t.action.iter().any(|a| *a < 0.0) || (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::contract("stored action is not on the simplex"));
        }
        self.buffer.push(t);
        Ok(())
    }

    /// One critic update followed by one actor update on a fresh uniform
    /// batch. Returns `None` without touching any state while the buffer
    /// holds fewer than `batch_size` transitions.
    pub fn train_step(&mut self, transforms: &[&dyn GradientTransform]) -> Result<Option<TrainStats>> {
        if self.buffer.len() < self.config.batch_size {
            return Ok(None);
        }
        let batch = self.buffer.sample(self.config.batch_size)?;

        let (critic_loss, mut g) = critic_grad(&self.critic, batch.view())?;
        for t in transforms {
            t.apply(NetKind::Critic, &self.actor, &self.critic, &mut g)?;
        }
        self.critic_adam.step(&mut self.critic.params, &g)?;

        let (actor_objective, mut g) = actor_grad(&self.actor, &self.critic, batch.view())?;
        for t in transforms {
            t.apply(NetKind::Actor, &self.actor, &self.critic, &mut g)?;
        }
        self.actor_adam.step(&mut self.actor.params, &g)?;

        Ok(Some(TrainStats { critic_loss, actor_objective }))
    }
}
