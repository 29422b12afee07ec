//! Experiment protocol: scheduler variants, two-stage training, frozen
//! evaluation, the forgetting continuation and baseline-normalized
//! aggregation.
//!
//! Variant names (used for run directories, checkpoints and reports):
//!
//! | name            | training                                                        |
//! |-----------------|-----------------------------------------------------------------|
//! | `baseline`      | fresh agent at `sim.p_prio`                                     |
//! | `prio_only`     | fresh agent at `variants.prio_only_p_prio`, keeps a reservoir   |
//! | `gem-<M>`       | from `prio_only`, at `sim.p_prio`, GEM over M stage-one samples |
//! | `ewc-<λ>`       | from `prio_only`, at `sim.p_prio`, EWC with weight λ            |
//! | `augmented-<p>` | fresh agent at p for `augmented_episode_factor` × episodes      |
//! | `<name>+`       | continues `<name>` at p_prio = 0, safeguard and Adam kept       |
//!
//! Run directories are `<runs>/<variant>__seed<n>/` holding `config.toml`,
//! `checkpoint/`, `train_metrics.csv` and (after evaluation)
//! `eval_metrics.csv`.
//!
//! Scores per (variant, seed) come from the evaluation log: overall reward is
//! total reward over total steps, and the priority-timeout rate is priority
//! timeouts over priority events (zero when no event occurred). Each variant's
//! mean and variance over seeds are divided by the baseline mean (variance by
//! its square).

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::agent::{act, Agent, Batch, GradientTransform, Transition};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::continual::{build_ewc_anchor, GemMemory, Safeguard};
use crate::env::{Arrivals, Environment, SimConfig, StepOutcome};
use crate::error::{Error, Result};
use crate::metrics::{read_metrics, MetricsRecord, MetricsWriter};
use crate::seeding::{self, Stream};

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const TRAIN_METRICS: &str = "train_metrics.csv";
pub const EVAL_METRICS: &str = "eval_metrics.csv";

#[derive(Debug, Clone, PartialEq)]
pub enum VariantKind {
    Baseline,
    PrioOnly,
    Gem { memory_size: usize },
    Ewc { weight: f64 },
    Augmented { p_prio: f64 },
    Continuation(Box<VariantKind>),
}

impl VariantKind {
    /// 0 for fresh agents, 1 for stage-two runs, 2 for continuations.
    pub fn stage(&self) -> u64 {
        match self {
            VariantKind::Baseline | VariantKind::PrioOnly | VariantKind::Augmented { .. } => 0,
            VariantKind::Gem { .. } | VariantKind::Ewc { .. } => 1,
            VariantKind::Continuation(_) => 2,
        }
    }

    /// The checkpoint a run of this kind starts from, if any.
    pub fn required_init(&self) -> Option<VariantKind> {
        match self {
            VariantKind::Gem { .. } | VariantKind::Ewc { .. } => Some(VariantKind::PrioOnly),
            VariantKind::Continuation(inner) => Some((**inner).clone()),
            _ => None,
        }
    }

    pub fn is_continuation(&self) -> bool {
        matches!(self, VariantKind::Continuation(_))
    }

    /// Report order: protocol order, continuations last.
    fn sort_key(&self) -> (bool, u8, f64) {
        match self {
            VariantKind::Baseline => (false, 0, 0.0),
            VariantKind::PrioOnly => (false, 1, 0.0),
            VariantKind::Gem { memory_size } => (false, 2, *memory_size as f64),
            VariantKind::Ewc { weight } => (false, 3, *weight),
            VariantKind::Augmented { p_prio } => (false, 4, *p_prio),
            VariantKind::Continuation(inner) => {
                let (_, g, x) = inner.sort_key();
                (true, g, x)
            }
        }
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VariantKind::Baseline => f.write_str("baseline"),
            VariantKind::PrioOnly => f.write_str("prio_only"),
            VariantKind::Gem { memory_size } => write!(f, "gem-{memory_size}"),
            VariantKind::Ewc { weight } => write!(f, "ewc-{weight:e}"),
            VariantKind::Augmented { p_prio } => write!(f, "augmented-{p_prio}"),
            VariantKind::Continuation(inner) => write!(f, "{inner}+"),
        }
    }
}

impl FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("unknown variant '{s}'"));
        if let Some(inner) = s.strip_suffix('+') {
            let inner: VariantKind = inner.parse().map_err(|_| bad())?;
            if inner.is_continuation() {
                return Err(bad());
            }
            return Ok(VariantKind::Continuation(Box::new(inner)));
        }
        let (head, arg) = s.split_once('-').map_or((s, None), |(h, a)| (h, Some(a)));
        let real = |a: Option<&str>| a.and_then(|a| a.parse::<f64>().ok()).ok_or_else(bad);
        let kind = match head {
            "baseline" if arg.is_none() => VariantKind::Baseline,
            "prio_only" if arg.is_none() => VariantKind::PrioOnly,
            "gem" => {
                let memory_size = arg.and_then(|a| a.parse::<usize>().ok()).ok_or_else(bad)?;
                if memory_size == 0 {
                    return Err(bad());
                }
                VariantKind::Gem { memory_size }
            }
            "ewc" => {
                let weight = real(arg)?;
                if !(weight >= 0.0 && weight.is_finite()) {
                    return Err(bad());
                }
                VariantKind::Ewc { weight }
            }
            "augmented" => {
                let p_prio = real(arg)?;
                if !(0.0..=1.0).contains(&p_prio) {
                    return Err(bad());
                }
                VariantKind::Augmented { p_prio }
            }
            _ => return Err(bad()),
        };
        Ok(kind)
    }
}

/// A variant with its training parameters resolved against a config.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantSpec {
    pub kind: VariantKind,
    pub train_p_prio: f64,
    pub episodes: usize,
    pub steps_per_episode: usize,
}

impl VariantSpec {
    pub fn resolve(kind: VariantKind, cfg: &RunConfig) -> Self {
        let (train_p_prio, episodes) = match &kind {
            VariantKind::Baseline | VariantKind::Gem { .. } | VariantKind::Ewc { .. } => {
                (cfg.sim.p_prio, cfg.train.episodes)
            }
            VariantKind::PrioOnly => (cfg.variants.prio_only_p_prio, cfg.train.episodes),
            VariantKind::Augmented { p_prio } => {
                (*p_prio, cfg.train.episodes * cfg.variants.augmented_episode_factor)
            }
            VariantKind::Continuation(_) => (0.0, cfg.train.episodes),
        };
        Self { kind, train_p_prio, episodes, steps_per_episode: cfg.train.steps_per_episode }
    }
}

/// Worst-case observations over every executed action of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafetyAudit {
    pub steps: u64,
    /// Largest `|Σ a − 1|`.
    pub max_simplex_deviation: f64,
    pub min_action_entry: f64,
    pub max_blocks_scheduled: u32,
}

impl Default for SafetyAudit {
    fn default() -> Self {
        Self {
            steps: 0,
            max_simplex_deviation: 0.0,
            min_action_entry: f64::INFINITY,
            max_blocks_scheduled: 0,
        }
    }
}

impl SafetyAudit {
    fn observe(&mut self, action: &[f64], outcome: &StepOutcome) {
        self.steps += 1;
        let sum: f64 = action.iter().sum();
        self.max_simplex_deviation = self.max_simplex_deviation.max((sum - 1.0).abs());
        for &a in action {
            self.min_action_entry = self.min_action_entry.min(a);
        }
        let blocks: u32 = outcome.scheduled_per_user.iter().sum();
        self.max_blocks_scheduled = self.max_blocks_scheduled.max(blocks);
    }

    pub fn merge(&mut self, other: &SafetyAudit) {
        self.steps += other.steps;
        self.max_simplex_deviation = self.max_simplex_deviation.max(other.max_simplex_deviation);
        self.min_action_entry = self.min_action_entry.min(other.min_action_entry);
        self.max_blocks_scheduled = self.max_blocks_scheduled.max(other.max_blocks_scheduled);
    }
}

/// Per-episode totals of one training or evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub variant: String,
    pub seed: u64,
    pub episodes: Vec<MetricsRecord>,
    pub wall_clock: Duration,
    pub audit: SafetyAudit,
}

impl RunResult {
    /// Regroups metrics rows by `(variant, seed)`; timing and audit are not
    /// stored in logs and come back empty.
    pub fn from_records(records: Vec<MetricsRecord>) -> Vec<RunResult> {
        let mut groups: BTreeMap<(String, u64), Vec<MetricsRecord>> = BTreeMap::new();
        for r in records {
            groups.entry((r.variant.clone(), r.seed)).or_default().push(r);
        }
        groups
            .into_iter()
            .map(|((variant, seed), mut episodes)| {
                episodes.sort_by_key(|r| r.episode);
                RunResult {
                    variant,
                    seed,
                    episodes,
                    wall_clock: Duration::ZERO,
                    audit: SafetyAudit::default(),
                }
            })
            .collect()
    }

    pub fn total_steps(&self) -> u64 {
        self.episodes.iter().map(|e| e.steps).sum()
    }

    pub fn prio_timeouts(&self) -> u64 {
        self.episodes.iter().map(|e| e.prio_timeouts).sum()
    }

    pub fn prio_events(&self) -> u64 {
        self.episodes.iter().map(|e| e.prio_events).sum()
    }

    /// Mean reward per step.
    pub fn overall_reward(&self) -> f64 {
        let steps = self.total_steps();
        if steps == 0 {
            return 0.0;
        }
        self.episodes.iter().map(|e| e.reward).sum::<f64>() / steps as f64
    }

    /// Share of priority events that timed out.
    pub fn prio_timeout_rate(&self) -> f64 {
        match self.prio_events() {
            0 => 0.0,
            n => self.prio_timeouts() as f64 / n as f64,
        }
    }
}

#[derive(Debug, Default)]
struct Tally {
    steps: u64,
    reward: f64,
    sum_rate: f64,
    timeouts: u64,
    prio_timeouts: u64,
    prio_events: u64,
}

impl Tally {
    fn add(&mut self, arrivals: Arrivals, out: &StepOutcome) {
        self.steps += 1;
        self.reward += out.reward;
        self.sum_rate += out.sum_rate;
        self.timeouts += u64::from(out.n_timeouts);
        self.prio_timeouts += u64::from(out.n_prio_timeouts);
        self.prio_events += u64::from(arrivals.priority_event);
    }

    fn finish(self, variant: &str, seed: u64, episode: usize, final_epsilon: f64) -> MetricsRecord {
        MetricsRecord {
            variant: variant.to_string(),
            seed,
            episode,
            steps: self.steps,
            reward: self.reward,
            sum_rate: self.sum_rate,
            timeouts: self.timeouts,
            prio_timeouts: self.prio_timeouts,
            prio_events: self.prio_events,
            final_epsilon,
        }
    }
}

/// Uniform sample of a stream (Vitter's algorithm R).
struct Reservoir {
    capacity: usize,
    seen: u64,
    rows: Vec<Transition>,
    rng: ChaCha8Rng,
}

impl Reservoir {
    fn new(capacity: usize, rng: ChaCha8Rng) -> Self {
        Self { capacity, seen: 0, rows: Vec::new(), rng }
    }

    fn offer(&mut self, t: &Transition) {
        self.seen += 1;
        if self.rows.len() < self.capacity {
            self.rows.push(t.clone());
        } else {
            let j = self.rng.gen_range(0..self.seen);
            if (j as usize) < self.capacity {
                self.rows[j as usize] = t.clone();
            }
        }
    }
}

fn check_shape(ckpt: &Checkpoint, cfg: &RunConfig) -> Result<()> {
    let n = cfg.sim.num_users;
    if ckpt.actor.spec != cfg.agent.actor_spec(n) || ckpt.critic.spec != cfg.agent.critic_spec(n) {
        return Err(Error::config(format!(
            "checkpoint '{}' networks do not match the configured {n} users and hidden layers {:?}",
            ckpt.variant, cfg.agent.hidden_layers
        )));
    }
    Ok(())
}

fn stage_one_memory(init: &Checkpoint) -> Result<&Batch> {
    init.stage1_memory
        .as_ref()
        .ok_or_else(|| Error::config(format!("checkpoint '{}' holds no stage-one memory", init.variant)))
}

/// Builds the safeguard a run installs at its start.
fn install_safeguard(kind: &VariantKind, cfg: &RunConfig, seed: u64, init: Option<&Checkpoint>) -> Result<Safeguard> {
    match (kind, init) {
        (VariantKind::Gem { memory_size }, Some(init)) => {
            let stage1 = stage_one_memory(init)?;
            let mut rng = seeding::derived_rng(seed, Stream::Memory, 1);
            let picks = if *memory_size >= stage1.len() {
                (0..stage1.len()).collect()
            } else {
                index::sample(&mut rng, stage1.len(), *memory_size).into_vec()
            };
            Ok(Safeguard::Gem(GemMemory::new(stage1.select(&picks))?))
        }
        (VariantKind::Ewc { weight }, Some(init)) => {
            let stage1 = stage_one_memory(init)?;
            let mut rng = seeding::derived_rng(seed, Stream::Fisher, 0);
            let batches: Vec<Batch> = (0..cfg.train.fisher_batches)
                .map(|_| {
                    let picks: Vec<usize> =
                        (0..cfg.agent.batch_size).map(|_| rng.gen_range(0..stage1.len())).collect();
                    stage1.select(&picks)
                })
                .collect();
            Ok(Safeguard::Ewc(build_ewc_anchor(&init.actor, &init.critic, &batches, *weight)?))
        }
        (VariantKind::Continuation(_), Some(init)) => Ok(init.safeguard.clone()),
        _ => Ok(Safeguard::None),
    }
}

fn train_env_seed(seed: u64, stage: u64, episode: usize) -> u64 {
    seeding::derive(seed, Stream::TrainEnv, (stage << 32) | episode as u64)
}

/// Trains one variant for one seed.
///
/// Stage-two and continuation runs need `init`, the checkpoint of the variant
/// they extend; it is copied, never modified. `on_episode` sees each
/// episode's totals as soon as the episode ends.
pub fn train_variant(
    spec: &VariantSpec,
    cfg: &RunConfig,
    seed: u64,
    init: Option<&Checkpoint>,
    on_episode: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
) -> Result<(Checkpoint, RunResult)> {
    cfg.validate()?;
    let started = Instant::now();
    let name = spec.kind.to_string();
    let stage = spec.kind.stage();

    match (spec.kind.required_init(), init) {
        (Some(need), None) => {
            return Err(Error::config(format!("variant '{name}' needs a '{need}' checkpoint")));
        }
        (Some(need), Some(ckpt)) if ckpt.variant != need.to_string() => {
            return Err(Error::config(format!(
                "variant '{name}' needs a '{need}' checkpoint, got '{}'",
                ckpt.variant
            )));
        }
        (None, Some(_)) => {
            return Err(Error::config(format!("variant '{name}' trains from scratch")));
        }
        _ => {}
    }
    if let VariantKind::Continuation(inner) = &spec.kind {
        if inner.is_continuation() {
            return Err(Error::config(format!("'{inner}' is already a continuation")));
        }
    }

    let mut agent = match init {
        None => Agent::new(cfg.agent.clone(), cfg.sim.num_users, seed)?,
        Some(ckpt) => {
            check_shape(ckpt, cfg)?;
            Agent::from_networks(
                cfg.agent.clone(),
                ckpt.actor.clone(),
                ckpt.critic.clone(),
                Some((ckpt.actor_adam.clone(), ckpt.critic_adam.clone())),
                seeding::derive(seed, Stream::Phase, stage),
            )?
        }
    };
    let safeguard = install_safeguard(&spec.kind, cfg, seed, init)?;
    let transforms: Vec<&dyn GradientTransform> = safeguard.as_transform().into_iter().collect();
    let mut reservoir = (spec.kind == VariantKind::PrioOnly).then(|| {
        Reservoir::new(cfg.train.stage1_memory_capacity, seeding::derived_rng(seed, Stream::Memory, 0))
    });

    let sim = SimConfig { p_prio: spec.train_p_prio, ..cfg.sim.clone() };
    let mut audit = SafetyAudit::default();
    let mut episodes = Vec::with_capacity(spec.episodes);
    for episode in 0..spec.episodes {
        let epsilon = cfg.schedule.epsilon(episode, spec.episodes);
        let mut env = Environment::reset(sim.clone(), train_env_seed(seed, stage, episode))?;
        let mut tally = Tally::default();
        for _ in 0..spec.steps_per_episode {
            let arrivals = env.begin_step();
            let state = env.state_vector();
            let proposed = agent.act(&state)?;
            let action = agent.explore(&proposed, epsilon);
            let out = env.apply_allocation(&action)?;
            audit.observe(&action, &out);
            tally.add(arrivals, &out);
            let t = Transition { state, action, reward: out.reward };
            if let Some(r) = reservoir.as_mut() {
                r.offer(&t);
            }
            agent.remember(t)?;
            agent.train_step(&transforms)?;
        }
        let record = tally.finish(&name, seed, episode, epsilon);
        on_episode(&record)?;
        episodes.push(record);
    }

    let stage1_memory = match reservoir {
        Some(r) if !r.rows.is_empty() => Some(Batch::from_transitions(&r.rows)?),
        _ => None,
    };
    let ckpt = Checkpoint {
        variant: name.clone(),
        seed,
        episodes_completed: spec.episodes as u64,
        actor: agent.actor,
        critic: agent.critic,
        actor_adam: agent.actor_adam,
        critic_adam: agent.critic_adam,
        safeguard,
        stage1_memory,
    };
    let result = RunResult { variant: name, seed, episodes, wall_clock: started.elapsed(), audit };
    Ok((ckpt, result))
}

/// Runs the frozen actor (ε = 0, no updates) on the evaluation settings.
/// Episode `e` uses an environment seed derived from the checkpoint's seed,
/// so every variant trained with the same seed faces the same traffic.
pub fn evaluate_frozen(ckpt: &Checkpoint, cfg: &RunConfig) -> Result<RunResult> {
    cfg.validate()?;
    check_shape(ckpt, cfg)?;
    let started = Instant::now();
    let sim = SimConfig { p_prio: cfg.eval.p_prio, ..cfg.sim.clone() };
    let mut audit = SafetyAudit::default();
    let mut episodes = Vec::with_capacity(cfg.eval.episodes);
    for episode in 0..cfg.eval.episodes {
        let env_seed = seeding::derive(ckpt.seed, Stream::EvalEnv, episode as u64);
        let mut env = Environment::reset(sim.clone(), env_seed)?;
        let mut tally = Tally::default();
        for _ in 0..cfg.eval.steps_per_episode {
            let arrivals = env.begin_step();
            let action = act(&ckpt.actor, &env.state_vector())?;
            let out = env.apply_allocation(&action)?;
            audit.observe(&action, &out);
            tally.add(arrivals, &out);
        }
        episodes.push(tally.finish(&ckpt.variant, ckpt.seed, episode, 0.0));
    }
    Ok(RunResult {
        variant: ckpt.variant.clone(),
        seed: ckpt.seed,
        episodes,
        wall_clock: started.elapsed(),
        audit,
    })
}

/// Unfreezes a trained checkpoint and keeps training at p_prio = 0 with its
/// safeguard and optimizer state.
pub fn continue_training_forgetting(
    ckpt: &Checkpoint,
    cfg: &RunConfig,
    on_episode: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
) -> Result<(Checkpoint, RunResult)> {
    let inner: VariantKind = ckpt.variant.parse()?;
    if inner.is_continuation() {
        return Err(Error::config(format!("'{inner}' is already a continuation")));
    }
    let spec = VariantSpec::resolve(VariantKind::Continuation(Box::new(inner)), cfg);
    train_variant(&spec, cfg, ckpt.seed, Some(ckpt), on_episode)
}

/// One report row; all four statistics are relative to the baseline mean.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantScore {
    pub variant: String,
    pub seeds: usize,
    pub reward_mean: f64,
    pub reward_variance: f64,
    pub prio_mean: f64,
    pub prio_variance: f64,
    pub raw_reward_mean: f64,
    pub raw_prio_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<VariantScore>,
}

impl EvalReport {
    pub fn row(&self, variant: &str) -> Option<&VariantScore> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

/// Mean and sample variance (zero for a single value).
fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Per-variant mean and variance over seeds, normalized by the baseline.
///
/// Seeds are summed in ascending order, so the result does not depend on the
/// order of `results`. A zero baseline mean yields NaN in that column.
pub fn aggregate_and_normalize(results: &[RunResult]) -> Result<EvalReport> {
    let mut groups: BTreeMap<String, Vec<&RunResult>> = BTreeMap::new();
    for r in results {
        groups.entry(r.variant.clone()).or_default().push(r);
    }
    let mut stats = Vec::with_capacity(groups.len());
    for (variant, mut runs) in groups {
        let kind: VariantKind = variant.parse()?;
        runs.sort_by_key(|r| r.seed);
        if runs.windows(2).any(|w| w[0].seed == w[1].seed) {
            return Err(Error::contract(format!("variant '{variant}' has duplicate seeds")));
        }
        let rewards: Vec<f64> = runs.iter().map(|r| r.overall_reward()).collect();
        let prios: Vec<f64> = runs.iter().map(|r| r.prio_timeout_rate()).collect();
        stats.push((kind, variant, runs.len(), mean_var(&rewards), mean_var(&prios)));
    }
    let base = stats
        .iter()
        .find(|s| s.0 == VariantKind::Baseline)
        .ok_or_else(|| Error::contract("aggregation needs a baseline result"))?;
    let (base_reward, base_prio) = (base.3 .0, base.4 .0);

    stats.sort_by(|a, b| {
        let (ka, kb) = (a.0.sort_key(), b.0.sort_key());
        (ka.0, ka.1).cmp(&(kb.0, kb.1)).then(ka.2.total_cmp(&kb.2))
    });
    let rows = stats
        .into_iter()
        .map(|(_, variant, seeds, (rm, rv), (pm, pv))| VariantScore {
            variant,
            seeds,
            reward_mean: rm / base_reward,
            reward_variance: rv / (base_reward * base_reward),
            prio_mean: pm / base_prio,
            prio_variance: pv / (base_prio * base_prio),
            raw_reward_mean: rm,
            raw_prio_mean: pm,
        })
        .collect();
    Ok(EvalReport { rows })
}

pub fn run_dir(runs: &Path, variant: &str, seed: u64) -> PathBuf {
    runs.join(format!("{variant}__seed{seed}"))
}

/// Accepts either a run directory or its `checkpoint/` subdirectory.
pub fn resolve_run_dir(path: &Path) -> PathBuf {
    if path.join("agent.meta").exists() {
        path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
    } else {
        path.to_path_buf()
    }
}

/// Writes a full training run (config snapshot, metrics log, checkpoint)
/// into `<runs>/<variant>__seed<n>/`, replacing an earlier run there.
///
/// `init` defaults to the required variant's run directory under `runs`.
pub fn train_run(
    cfg: &RunConfig,
    kind: VariantKind,
    seed: u64,
    runs: &Path,
    init: Option<&Path>,
    progress: &mut dyn FnMut(&MetricsRecord),
) -> Result<(PathBuf, RunResult)> {
    let init_ckpt = match kind.required_init() {
        Some(need) => {
            let dir = init.map_or_else(|| run_dir(runs, &need.to_string(), seed), resolve_run_dir);
            Some(Checkpoint::load(&dir.join(CHECKPOINT_DIR)).map_err(|e| {
                Error::config(format!("cannot load '{need}' checkpoint from {}: {e}", dir.display()))
            })?)
        }
        None => None,
    };
    let spec = VariantSpec::resolve(kind, cfg);
    let dir = run_dir(runs, &spec.kind.to_string(), seed);
    fresh_run_dir(&dir, cfg)?;
    let mut log = MetricsWriter::append(&dir.join(TRAIN_METRICS))?;
    let (ckpt, result) = train_variant(&spec, cfg, seed, init_ckpt.as_ref(), &mut |r| {
        progress(r);
        log.write(r)
    })?;
    ckpt.save(&dir.join(CHECKPOINT_DIR))?;
    Ok((dir, result))
}

fn fresh_run_dir(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for stale in [TRAIN_METRICS, EVAL_METRICS] {
        let f = dir.join(stale);
        if f.exists() {
            std::fs::remove_file(f)?;
        }
    }
    cfg.save(&dir.join(CONFIG_FILE))
}

/// Evaluates a run directory's checkpoint and rewrites its evaluation log.
/// Uses the run's own config snapshot unless `cfg` is given.
pub fn eval_run(path: &Path, cfg: Option<&RunConfig>) -> Result<RunResult> {
    let dir = resolve_run_dir(path);
    let owned;
    let cfg = match cfg {
        Some(c) => c,
        None => {
            owned = RunConfig::load(&dir.join(CONFIG_FILE))?;
            &owned
        }
    };
    let ckpt = Checkpoint::load(&dir.join(CHECKPOINT_DIR))?;
    let result = evaluate_frozen(&ckpt, cfg)?;
    let out = dir.join(EVAL_METRICS);
    if out.exists() {
        std::fs::remove_file(&out)?;
    }
    crate::metrics::write_metrics(&out, &result.episodes)?;
    Ok(result)
}

/// Continues a run directory's checkpoint at p_prio = 0 into the sibling
/// directory `<variant>+__seed<n>`.
pub fn forget_run(
    path: &Path,
    cfg: Option<&RunConfig>,
    progress: &mut dyn FnMut(&MetricsRecord),
) -> Result<(PathBuf, RunResult)> {
    let dir = resolve_run_dir(path);
    let owned;
    let cfg = match cfg {
        Some(c) => c,
        None => {
            owned = RunConfig::load(&dir.join(CONFIG_FILE))?;
            &owned
        }
    };
    let ckpt = Checkpoint::load(&dir.join(CHECKPOINT_DIR))?;
    let runs = dir.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    let out = run_dir(&runs, &format!("{}+", ckpt.variant), ckpt.seed);
    fresh_run_dir(&out, cfg)?;
    let mut log = MetricsWriter::append(&out.join(TRAIN_METRICS))?;
    let (next, result) = continue_training_forgetting(&ckpt, cfg, &mut |r| {
        progress(r);
        log.write(r)
    })?;
    next.save(&out.join(CHECKPOINT_DIR))?;
    Ok((out, result))
}

/// Every evaluation log under `runs`, regrouped by (variant, seed).
pub fn collect_eval_results(runs: &Path) -> Result<Vec<RunResult>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(runs)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(EVAL_METRICS).is_file())
        .collect();
    dirs.sort();
    let mut records = Vec::new();
    for d in dirs {
        records.extend(read_metrics(&d.join(EVAL_METRICS))?);
    }
    Ok(RunResult::from_records(records))
}

/// Which variants and continuations to run, for which seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolPlan {
    pub seeds: Vec<u64>,
    /// Trained in order; `prio_only` must precede the stage-two variants.
    pub variants: Vec<VariantKind>,
    /// Variants to continue at p_prio = 0.
    pub continuations: Vec<VariantKind>,
}

impl ProtocolPlan {
    /// The full variant matrix described by `cfg`, seeds `1..=eval.seeds`.
    pub fn full(cfg: &RunConfig) -> Self {
        let v = &cfg.variants;
        let mut variants = vec![VariantKind::Baseline, VariantKind::PrioOnly];
        variants.extend(v.gem_memory_sizes.iter().map(|&m| VariantKind::Gem { memory_size: m }));
        variants.extend(v.ewc_weights.iter().map(|&w| VariantKind::Ewc { weight: w }));
        variants.push(VariantKind::Augmented { p_prio: v.augmented_p_prio });
        let continuations = vec![
            VariantKind::Augmented { p_prio: v.augmented_p_prio },
            VariantKind::Ewc { weight: v.forget_ewc_weight },
            VariantKind::Gem { memory_size: v.forget_gem_memory_size },
        ];
        Self { seeds: (1..=cfg.eval.seeds as u64).collect(), variants, continuations }
    }

    fn validate(&self) -> Result<()> {
        let mut trained: Vec<&VariantKind> = Vec::new();
        for k in &self.variants {
            if let Some(need) = k.required_init() {
                if !trained.contains(&&need) {
                    return Err(Error::config(format!("plan trains '{k}' before '{need}'")));
                }
            }
            trained.push(k);
        }
        if let Some(c) = self.continuations.iter().find(|c| !self.variants.contains(c)) {
            return Err(Error::config(format!("plan continues '{c}' without training it")));
        }
        Ok(())
    }
}

/// Trains, evaluates and continues every planned variant, writing run
/// directories under `runs`. Seeds run in parallel; each owns its own
/// environments, agents and directories. Returns the evaluation results of
/// all runs (continuations included), ordered by seed.
pub fn run_protocol(
    cfg: &RunConfig,
    plan: &ProtocolPlan,
    runs: &Path,
    progress: &(dyn Fn(&str) + Sync),
) -> Result<Vec<(RunResult, RunResult)>> {
    cfg.validate()?;
    plan.validate()?;
    std::fs::create_dir_all(runs)?;
    let per_seed: Vec<Vec<(RunResult, RunResult)>> = plan
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut out = Vec::new();
            for kind in &plan.variants {
                let (dir, train) = train_run(cfg, kind.clone(), seed, runs, None, &mut |_| {})?;
                let eval = eval_run(&dir, Some(cfg))?;
                progress(&format!(
                    "{kind} seed {seed}: trained in {:.0?}, eval reward {:.4}, prio timeouts {}/{}",
                    train.wall_clock,
                    eval.overall_reward(),
                    eval.prio_timeouts(),
                    eval.prio_events()
                ));
                out.push((train, eval));
            }
            for kind in &plan.continuations {
                let (dir, train) = forget_run(&run_dir(runs, &kind.to_string(), seed), Some(cfg), &mut |_| {})?;
                let eval = eval_run(&dir, Some(cfg))?;
                progress(&format!(
                    "{kind}+ seed {seed}: trained in {:.0?}, eval reward {:.4}, prio timeouts {}/{}",
                    train.wall_clock,
                    eval.overall_reward(),
                    eval.prio_timeouts(),
                    eval.prio_events()
                ));
                out.push((train, eval));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}
