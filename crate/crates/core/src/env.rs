//! Discrete resource-allocation simulation.
//!
//! Each time step a base station splits `U` resource blocks among `N` users.
//! Users accumulate jobs (requests measured in blocks); jobs that wait longer
//! than `max_delay` steps time out. Rarely, one live job is promoted to
//! priority status and must be fully served within the same step.
//!
//! A step is driven in two halves: [`Environment::begin_step`] (arrivals,
//! priority promotion, fresh channel) followed by
//! [`Environment::apply_allocation`] (integerize the allocation vector, serve
//! jobs oldest-first, account timeouts, compute the reward).
//!
//! # Random stream
//!
//! The state owns a [`ChaCha8Rng`] seeded with `seed_from_u64(seed)`. Draw
//! order is part of the contract (the reference-simulation test replays it):
//!
//! 1. `reset`: one channel draw per user.
//! 2. `begin_step`: per user in index order one `f64` for the arrival
//!    Bernoulli and, on arrival, one `gen_range(1..=max_job_size)` for the
//!    size; then one `f64` for the priority Bernoulli and, when it fires on an
//!    eligible job set, one `gen_range(0..len)` for the job index; then one
//!    channel draw per user.
//!
//! A channel draw is `u = gen::<f64>()` in `[0, 1)` mapped through the inverse
//! Rayleigh CDF: `|h|² = -2 σ² ln(1 - u)`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

/// Allowed deviation of an allocation vector's sum from one.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

/// Simulation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub num_users: usize,
    pub num_resources: usize,
    /// Arrival probability per user per step.
    pub p_job: f64,
    /// Priority-promotion probability per step.
    pub p_prio: f64,
    pub snr_db: f64,
    /// Rayleigh scale of the channel amplitude `|h|`.
    pub rayleigh_scale: f64,
    pub max_job_size: u32,
    pub max_delay: u32,
    pub weight_sumrate: f64,
    pub weight_timeout: f64,
    pub weight_prio: f64,
    pub rng_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            num_users: 5,
            num_resources: 10,
            p_job: 0.5,
            p_prio: 1e-4,
            snr_db: 10.0,
            rayleigh_scale: 0.3,
            max_job_size: 7,
            max_delay: 5,
            weight_sumrate: 1.0,
            weight_timeout: -1.0,
            weight_prio: -5.0,
            rng_seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_users == 0 {
            problems.push("num_users must be >= 1".to_string());
        }
        if self.num_resources == 0 {
            problems.push("num_resources must be >= 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.p_job) {
            problems.push(format!("p_job must lie in [0, 1], got {}", self.p_job));
        }
        if !(0.0..=1.0).contains(&self.p_prio) {
            problems.push(format!("p_prio must lie in [0, 1], got {}", self.p_prio));
        }
        if !(self.rayleigh_scale > 0.0 && self.rayleigh_scale.is_finite()) {
            problems.push(format!("rayleigh_scale must be positive, got {}", self.rayleigh_scale));
        }
        if !self.snr_db.is_finite() {
            problems.push("snr_db must be finite".to_string());
        }
        if self.max_job_size == 0 {
            problems.push("max_job_size must be >= 1".to_string());
        }
        if self.max_delay == 0 {
            problems.push("max_delay must be >= 1".to_string());
        }
        for (name, w) in [
            ("weight_sumrate", self.weight_sumrate),
            ("weight_timeout", self.weight_timeout),
            ("weight_prio", self.weight_prio),
        ] {
            if !w.is_finite() {
                problems.push(format!("{name} must be finite"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    pub fn snr_linear(&self) -> f64 {
        10f64.powf(self.snr_db / 10.0)
    }

    /// Length of the state vector (four features per user).
    pub fn state_len(&self) -> usize {
        4 * self.num_users
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Job {
    pub job_id: u64,
    /// Zero-based user index.
    pub user: usize,
    /// Outstanding resource blocks.
    pub remaining: u32,
    /// Steps survived without completing.
    pub delay: u32,
    pub is_priority: bool,
    pub created_at: u64,
}

/// Full simulation state. Jobs are kept in `(created_at, job_id)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub time: u64,
    pub jobs: Vec<Job>,
    pub channel_gain_sq: Vec<f64>,
    pub rng: ChaCha8Rng,
    pub next_job_id: u64,
}

/// What [`Environment::begin_step`] changed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Arrivals {
    pub new_jobs: usize,
    /// A job was promoted to priority this step.
    pub priority_event: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub sum_rate: f64,
    pub n_timeouts: u32,
    pub n_prio_timeouts: u32,
    pub scheduled_per_user: Vec<u32>,
    pub next_state_vector: Vec<f64>,
}

/// Draws `|h|²` for a Rayleigh(σ) amplitude.
pub(crate) fn draw_gain_sq(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    let u: f64 = rng.gen();
    -2.0 * scale * scale * (1.0 - u).ln()
}

/// Checks that `action` is a length-`n` point on the probability simplex.
pub fn check_simplex(action: &[f64], n: usize) -> Result<()> {
    if action.len() != n {
        return Err(Error::contract(format!(
            "allocation has {} entries, expected {n}",
            action.len()
        )));
    }
    if let Some(bad) = action.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
        return Err(Error::contract(format!("allocation entry {bad} is not a non-negative real")));
    }
    let sum: f64 = action.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::contract(format!("allocation sums to {sum}, expected 1")));
    }
    Ok(())
}

/// Largest-remainder integerization of `action · total` blocks.
///
/// Floors first, then hands the leftover blocks one each to users in
/// descending fractional remainder, ties going to the lower user index.
pub fn integerize(action: &[f64], total: usize) -> Vec<u32> {
    let raw: Vec<f64> = action.iter().map(|a| a * total as f64).collect();
    let mut grants: Vec<u32> = raw.iter().map(|r| r.floor() as u32).collect();
    let assigned: usize = grants.iter().map(|&g| g as usize).sum();
    let leftover = total.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..action.len()).collect();
    // stable sort keeps ascending user index among equal remainders
    order.sort_by(|&a, &b| {
        let ra = raw[a] - raw[a].floor();
        let rb = raw[b] - raw[b].floor();
        rb.total_cmp(&ra)
    });
    for &u in order.iter().cycle().take(leftover) {
        grants[u] += 1;
    }
    grants
}

/// One simulation instance: configuration plus live state.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    config: SimConfig,
    state: SimState,
}

impl Environment {
    /// Empty job set at time zero with a fresh channel realization.
    pub fn reset(config: SimConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeding::rng(seed);
        let channel_gain_sq = (0..config.num_users)
            .map(|_| draw_gain_sq(&mut rng, config.rayleigh_scale))
            .collect();
        Ok(Self {
            state: SimState {
                time: 0,
                jobs: Vec::new(),
                channel_gain_sq,
                rng,
                next_job_id: 0,
            },
            config,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    /// Direct state access for tests and scenario setup.
    pub fn state_mut(&mut self) -> &mut SimState {
        &mut self.state
    }

    /// Arrivals, priority promotion and channel redraw for the new step.
    pub fn begin_step(&mut self) -> Arrivals {
        let cfg = &self.config;
        let st = &mut self.state;
        let mut arrivals = Arrivals::default();

        for user in 0..cfg.num_users {
            let fire: f64 = st.rng.gen();
            if fire < cfg.p_job {
                let size = st.rng.gen_range(1..=cfg.max_job_size);
                st.jobs.push(Job {
                    job_id: st.next_job_id,
                    user,
                    remaining: size,
                    delay: 0,
                    is_priority: false,
                    created_at: st.time,
                });
                st.next_job_id += 1;
                arrivals.new_jobs += 1;
            }
        }

        let fire: f64 = st.rng.gen();
        if fire < cfg.p_prio && !st.jobs.is_empty() && !st.jobs.iter().any(|j| j.is_priority) {
            let pick = st.rng.gen_range(0..st.jobs.len());
            st.jobs[pick].is_priority = true;
            arrivals.priority_event = true;
        }

        for g in st.channel_gain_sq.iter_mut() {
            *g = draw_gain_sq(&mut st.rng, cfg.rayleigh_scale);
        }
        arrivals
    }

    /// Four features per user, in user order: outstanding blocks / U,
    /// priority blocks / U, `|h|²`, max delay / d_max.
    pub fn state_vector(&self) -> Vec<f64> {
        let cfg = &self.config;
        let n = cfg.num_users;
        let u = cfg.num_resources as f64;
        let mut demand = vec![0u64; n];
        let mut prio = vec![0u64; n];
        let mut max_delay = vec![0u32; n];
        for job in &self.state.jobs {
            demand[job.user] += u64::from(job.remaining);
            if job.is_priority {
                prio[job.user] += u64::from(job.remaining);
            }
            max_delay[job.user] = max_delay[job.user].max(job.delay);
        }
        let mut out = Vec::with_capacity(4 * n);
        for user in 0..n {
            out.push(demand[user] as f64 / u);
            out.push(prio[user] as f64 / u);
            out.push(self.state.channel_gain_sq[user]);
            out.push(f64::from(max_delay[user]) / f64::from(cfg.max_delay));
        }
        out
    }

    /// Outstanding blocks per user.
    pub fn outstanding(&self) -> Vec<u64> {
        let mut out = vec![0u64; self.config.num_users];
        for job in &self.state.jobs {
            out[job.user] += u64::from(job.remaining);
        }
        out
    }

    /// Executes an allocation vector and closes the step.
    pub fn apply_allocation(&mut self, action: &[f64]) -> Result<StepOutcome> {
        let cfg = &self.config;
        check_simplex(action, cfg.num_users)?;

        let outstanding = self.outstanding();
        let grants: Vec<u32> = integerize(action, cfg.num_resources)
            .into_iter()
            .zip(&outstanding)
            .map(|(g, &o)| u64::from(g).min(o) as u32)
            .collect();

        // serve oldest-first; jobs are stored in (created_at, job_id) order
        let mut budget = grants.clone();
        for job in self.state.jobs.iter_mut() {
            let b = &mut budget[job.user];
            let served = (*b).min(job.remaining);
            job.remaining -= served;
            *b -= served;
        }

        let snr = cfg.snr_linear();
        let sum_rate: f64 = grants
            .iter()
            .zip(&self.state.channel_gain_sq)
            .map(|(&b, &g)| f64::from(b) * (1.0 + g * snr).ln())
            .sum();

        let mut n_timeouts = 0u32;
        let mut n_prio_timeouts = 0u32;
        let max_delay = cfg.max_delay;
        self.state.jobs.retain_mut(|job| {
            if job.remaining == 0 {
                return false;
            }
            if job.is_priority {
                n_prio_timeouts += 1;
                return false;
            }
            job.delay += 1;
            if job.delay > max_delay {
                n_timeouts += 1;
                return false;
            }
            true
        });

        let reward = cfg.weight_sumrate * sum_rate
            + cfg.weight_timeout * f64::from(n_timeouts)
            + cfg.weight_prio * f64::from(n_prio_timeouts);
        self.state.time += 1;

        Ok(StepOutcome {
            reward,
            sum_rate,
            n_timeouts,
            n_prio_timeouts,
            scheduled_per_user: grants,
            next_state_vector: self.state_vector(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn job(id: u64, user: usize, remaining: u32, delay: u32, prio: bool) -> Job {
        Job {
            job_id: id,
            user,
            remaining,
            delay,
            is_priority: prio,
            created_at: id,
        }
    }

    fn quiet(n: usize, u: usize) -> SimConfig {
        SimConfig {
            num_users: n,
            num_resources: u,
            p_job: 0.0,
            p_prio: 0.0,
            ..SimConfig::default()
        }
    }

    #[test]
    fn reset_is_empty_and_deterministic() {
        let a = Environment::reset(SimConfig::default(), 7).unwrap();
        let b = Environment::reset(SimConfig::default(), 7).unwrap();
        assert_eq!(a, b);
        assert!(a.state().jobs.is_empty());
        assert_eq!(a.state().time, 0);
        assert_eq!(a.state().channel_gain_sq.len(), 5);
    }

    #[test]
    fn reset_rejects_bad_config() {
        let cfg = SimConfig { num_users: 0, ..SimConfig::default() };
        assert!(matches!(Environment::reset(cfg, 1), Err(Error::Config(_))));
        let cfg = SimConfig { p_prio: 1.5, ..SimConfig::default() };
        assert!(Environment::reset(cfg, 1).is_err());
    }

    #[test]
    fn zero_probabilities_only_redraw_channel() {
        let mut env = Environment::reset(quiet(3, 10), 1).unwrap();
        env.state_mut().jobs.push(job(0, 1, 3, 0, false));
        let before_jobs = env.state().jobs.clone();
        let before_gain = env.state().channel_gain_sq.clone();
        let arr = env.begin_step();
        assert_eq!(arr, Arrivals::default());
        assert_eq!(env.state().jobs, before_jobs);
        assert_ne!(env.state().channel_gain_sq, before_gain);
    }

    #[test]
    fn certain_arrivals_and_priority() {
        let cfg = SimConfig { p_job: 1.0, p_prio: 1.0, ..SimConfig::default() };
        let mut env = Environment::reset(cfg, 3).unwrap();
        let arr = env.begin_step();
        assert_eq!(arr.new_jobs, 5);
        assert!(arr.priority_event);
        assert_eq!(env.state().jobs.len(), 5);
        assert_eq!(env.state().jobs.iter().filter(|j| j.is_priority).count(), 1);
        for j in &env.state().jobs {
            assert!((1..=7).contains(&j.remaining));
            assert_eq!(j.delay, 0);
        }
        // a second promotion is refused while one is live
        env.begin_step();
        assert_eq!(env.state().jobs.iter().filter(|j| j.is_priority).count(), 1);
    }

    #[test]
    fn priority_needs_jobs() {
        let cfg = SimConfig { p_job: 0.0, p_prio: 1.0, ..SimConfig::default() };
        let mut env = Environment::reset(cfg, 3).unwrap();
        assert!(!env.begin_step().priority_event);
    }

    #[test]
    fn state_vector_features() {
        let mut env = Environment::reset(quiet(3, 10), 1).unwrap();
        {
            let st = env.state_mut();
            st.jobs = vec![job(0, 0, 2, 0, false), job(1, 0, 3, 1, false), job(2, 2, 4, 0, true)];
            st.channel_gain_sq = vec![0.5, 0.25, 1.0];
        }
        let v = env.state_vector();
        assert_eq!(v.len(), 12);
        let expect_user0 = [0.5, 0.0, 0.5, 0.2];
        for (a, b) in v[0..4].iter().zip(expect_user0) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        assert_eq!(&v[4..8], &[0.0, 0.0, 0.25, 0.0]);
        assert_abs_diff_eq!(v[9], 0.4, epsilon = 1e-15);
        assert!(v[8] >= 0.4);
    }

    #[test]
    fn largest_remainder_example() {
        assert_eq!(integerize(&[0.25, 0.75, 0.0], 10), vec![3, 7, 0]);
        assert_eq!(integerize(&[0.2; 5], 10), vec![2; 5]);
        // three users, 1/3 each: one leftover goes to the lowest index
        let third = 1.0 / 3.0;
        assert_eq!(integerize(&[third, third, third], 10).iter().sum::<u32>(), 10);
    }

    #[test]
    fn allocation_example_with_clamp() {
        let mut env = Environment::reset(quiet(3, 10), 1).unwrap();
        env.state_mut().jobs = vec![job(0, 0, 3, 0, false), job(1, 1, 8, 0, false)];
        let out = env.apply_allocation(&[0.25, 0.75, 0.0]).unwrap();
        assert_eq!(out.scheduled_per_user, vec![3, 7, 0]);
        assert_eq!(env.state().jobs.len(), 1);
        assert_eq!(env.state().jobs[0].remaining, 1);
        assert_eq!(env.state().jobs[0].delay, 1);
    }

    #[test]
    fn clamped_blocks_are_not_redistributed() {
        let mut env = Environment::reset(quiet(2, 10), 1).unwrap();
        env.state_mut().jobs = vec![job(0, 0, 1, 0, false), job(1, 1, 9, 0, false)];
        let out = env.apply_allocation(&[0.5, 0.5]).unwrap();
        assert_eq!(out.scheduled_per_user, vec![1, 5]);
    }

    #[test]
    fn empty_system_yields_zero_reward() {
        let mut env = Environment::reset(SimConfig::default(), 1).unwrap();
        let out = env.apply_allocation(&[0.2; 5]).unwrap();
        assert_eq!(out.sum_rate, 0.0);
        assert_eq!(out.n_timeouts, 0);
        assert_eq!(out.n_prio_timeouts, 0);
        assert_eq!(out.reward, 0.0);
    }

    #[test]
    fn sum_rate_natural_log() {
        let mut env = Environment::reset(quiet(1, 2), 1).unwrap();
        env.state_mut().jobs = vec![job(0, 0, 2, 0, false)];
        env.state_mut().channel_gain_sq = vec![1.0];
        let out = env.apply_allocation(&[1.0]).unwrap();
        assert_abs_diff_eq!(out.sum_rate, 2.0 * 11f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(out.sum_rate, 4.7958, epsilon = 1e-4);
    }

    #[test]
    fn unserved_priority_job_costs_its_weight_only() {
        let cfg = SimConfig {
            weight_sumrate: 0.0,
            weight_timeout: 0.0,
            weight_prio: -5.0,
            ..quiet(2, 10)
        };
        let mut env = Environment::reset(cfg, 1).unwrap();
        env.state_mut().jobs = vec![job(0, 0, 1, 0, true)];
        let out = env.apply_allocation(&[0.0, 1.0]).unwrap();
        assert_eq!(out.n_prio_timeouts, 1);
        assert_eq!(out.n_timeouts, 0);
        assert_eq!(out.reward, -5.0);
        assert!(env.state().jobs.is_empty());
    }

    #[test]
    fn priority_job_waits_behind_older_jobs() {
        let mut env = Environment::reset(quiet(1, 3), 1).unwrap();
        env.state_mut().jobs = vec![job(0, 0, 2, 2, false), job(1, 0, 2, 0, true)];
        let out = env.apply_allocation(&[1.0]).unwrap();
        assert_eq!(out.n_prio_timeouts, 1);
        assert!(env.state().jobs.is_empty());
    }

    #[test]
    fn regular_timeout_after_max_delay() {
        let mut env = Environment::reset(quiet(2, 1), 1).unwrap();
        env.state_mut().jobs = vec![job(0, 1, 5, 5, false), job(1, 1, 5, 4, false)];
        let out = env.apply_allocation(&[1.0, 0.0]).unwrap();
        assert_eq!(out.n_timeouts, 1);
        assert_eq!(env.state().jobs.len(), 1);
        assert_eq!(env.state().jobs[0].delay, 5);
        assert_eq!(out.reward, -1.0);
    }

    #[test]
    fn invalid_actions_rejected() {
        let mut env = Environment::reset(quiet(2, 10), 1).unwrap();
        assert!(matches!(env.apply_allocation(&[0.6, 0.6]), Err(Error::Contract(_))));
        assert!(env.apply_allocation(&[1.5, -0.5]).is_err());
        assert!(env.apply_allocation(&[1.0]).is_err());
        assert!(env.apply_allocation(&[f64::NAN, 1.0]).is_err());
        assert!(env.apply_allocation(&[0.5, 0.5 + 5e-7]).is_ok());
    }
}
