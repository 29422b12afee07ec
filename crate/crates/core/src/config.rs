//! Run configuration: a small TOML document with fixed sections and keys.
//!
//! ```toml
//! profile = "paper"          # or "desk"; selects the defaults below
//!
//! [sim]                      # environment, see `SimConfig`
//! num_users = 5
//! num_resources = 10
//! p_job = 0.5
//! p_prio = 0.0001
//! snr_db = 10.0
//! rayleigh_scale = 0.3
//! max_job_size = 7
//! max_delay = 5
//! weight_sumrate = 1.0
//! weight_timeout = -1.0
//! weight_prio = -5.0
//! rng_seed = 0
//!
//! [agent]
//! batch_size = 256
//! buffer_capacity = 100000
//! learning_rate_actor = 0.0001
//! learning_rate_critic = 0.0001
//! hidden_layers = [128, 128, 128]
//!
//! [schedule]
//! initial_epsilon = 1.0
//! zero_fraction = 0.5        # share of episodes after which ε = 0
//!
//! [train]
//! episodes = 30
//! steps_per_episode = 10000
//! fisher_batches = 64        # batches behind the EWC Fisher estimate
//! stage1_memory_capacity = 65536   # reservoir of stage-one transitions
//!
//! [eval]
//! episodes = 5
//! steps_per_episode = 200000
//! p_prio = 0.0001
//! seeds = 3
//!
//! [variants]
//! prio_only_p_prio = 1.0
//! augmented_p_prio = 0.2
//! augmented_episode_factor = 2
//! gem_memory_sizes = [512, 8192, 65536]
//! ewc_weights = [100000.0, 1000000.0, 10000000.0]
//! forget_gem_memory_size = 8192
//! forget_ewc_weight = 1000000.0
//! ```
//!
//! Missing keys take the profile's defaults. Unknown sections or keys, type
//! mismatches and constraint violations are all collected and reported
//! together, each with its `section.key` path.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::agent::{AgentConfig, ExplorationSchedule};
use crate::env::SimConfig;
use crate::error::{ConfigIssue, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Profile {
    /// Full published protocol sizes.
    Paper,
    /// Same problem, shortened runs for a single workstation.
    Desk,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub fisher_batches: usize,
    pub stage1_memory_capacity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub p_prio: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSettings {
    pub prio_only_p_prio: f64,
    pub augmented_p_prio: f64,
    pub augmented_episode_factor: usize,
    pub gem_memory_sizes: Vec<usize>,
    pub ewc_weights: Vec<f64>,
    pub forget_gem_memory_size: usize,
    pub forget_ewc_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub sim: SimConfig,
    pub agent: AgentConfig,
    pub schedule: ExplorationSchedule,
    pub train: TrainSettings,
    pub eval: EvalSettings,
    pub variants: VariantSettings,
}

impl RunConfig {
    pub fn paper() -> Self {
        Self {
            profile: Profile::Paper,
            sim: SimConfig::default(),
            agent: AgentConfig::default(),
            schedule: ExplorationSchedule::default(),
            train: TrainSettings {
                episodes: 30,
                steps_per_episode: 10_000,
                fisher_batches: 64,
                stage1_memory_capacity: 1 << 16,
            },
            eval: EvalSettings {
                episodes: 5,
                steps_per_episode: 200_000,
                p_prio: 1e-4,
                seeds: 3,
            },
            variants: VariantSettings {
                prio_only_p_prio: 1.0,
                augmented_p_prio: 0.2,
                augmented_episode_factor: 2,
                gem_memory_sizes: vec![1 << 9, 1 << 13, 1 << 16],
                ewc_weights: vec![1e5, 1e6, 1e7],
                forget_gem_memory_size: 1 << 13,
                forget_ewc_weight: 1e6,
            },
        }
    }

    /// Workstation-sized protocol: shorter training and evaluation with a
    /// raised evaluation event rate, identical users, resources and weights.
    pub fn desk() -> Self {
        let mut cfg = Self::paper();
        cfg.profile = Profile::Desk;
        cfg.agent.batch_size = 32;
        cfg.train.episodes = 10;
        cfg.train.steps_per_episode = 5_000;
        cfg.eval.episodes = 3;
        cfg.eval.steps_per_episode = 50_000;
        cfg.eval.p_prio = 1e-3;
        cfg
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => Self::paper(),
            Profile::Desk => Self::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let issues = constraint_issues(self);
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigKeys(issues))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        parse_config(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, emit_config(self))?;
        Ok(())
    }
}

fn issue(key: &str, message: impl Into<String>) -> ConfigIssue {
    ConfigIssue { key: key.to_string(), message: message.into() }
}

fn constraint_issues(cfg: &RunConfig) -> Vec<ConfigIssue> {
    let mut out = Vec::new();
    let mut positive = |key: &str, v: usize| {
        if v == 0 {
            out.push(issue(key, "must be >= 1"));
        }
    };
    positive("sim.num_users", cfg.sim.num_users);
    positive("sim.num_resources", cfg.sim.num_resources);
    positive("sim.max_job_size", cfg.sim.max_job_size as usize);
    positive("sim.max_delay", cfg.sim.max_delay as usize);
    positive("agent.batch_size", cfg.agent.batch_size);
    positive("agent.buffer_capacity", cfg.agent.buffer_capacity);
    positive("train.episodes", cfg.train.episodes);
    positive("train.steps_per_episode", cfg.train.steps_per_episode);
    positive("train.fisher_batches", cfg.train.fisher_batches);
    positive("train.stage1_memory_capacity", cfg.train.stage1_memory_capacity);
    positive("eval.episodes", cfg.eval.episodes);
    positive("eval.steps_per_episode", cfg.eval.steps_per_episode);
    positive("eval.seeds", cfg.eval.seeds);
    positive("variants.augmented_episode_factor", cfg.variants.augmented_episode_factor);
    positive("variants.forget_gem_memory_size", cfg.variants.forget_gem_memory_size);

    for (key, p) in [
        ("sim.p_job", cfg.sim.p_job),
        ("sim.p_prio", cfg.sim.p_prio),
        ("eval.p_prio", cfg.eval.p_prio),
        ("variants.prio_only_p_prio", cfg.variants.prio_only_p_prio),
        ("variants.augmented_p_prio", cfg.variants.augmented_p_prio),
        ("schedule.initial_epsilon", cfg.schedule.initial_epsilon),
    ] {
        if !(0.0..=1.0).contains(&p) {
            out.push(issue(key, format!("must lie in [0, 1], got {p}")));
        }
    }
    if !(cfg.schedule.zero_fraction > 0.0 && cfg.schedule.zero_fraction <= 1.0) {
        out.push(issue("schedule.zero_fraction", "must lie in (0, 1]"));
    }
    for (key, v) in [
        ("sim.rayleigh_scale", cfg.sim.rayleigh_scale),
        ("agent.learning_rate_actor", cfg.agent.learning_rate_actor),
        ("agent.learning_rate_critic", cfg.agent.learning_rate_critic),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            out.push(issue(key, format!("must be positive, got {v}")));
        }
    }
    if cfg.agent.batch_size > cfg.agent.buffer_capacity {
        out.push(issue("agent.batch_size", "must not exceed agent.buffer_capacity"));
    }
    if cfg.agent.hidden_layers.contains(&0) {
        out.push(issue("agent.hidden_layers", "widths must be positive"));
    }
    if cfg.variants.gem_memory_sizes.contains(&0) {
        out.push(issue("variants.gem_memory_sizes", "sizes must be positive"));
    }
    if cfg.variants.ewc_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        out.push(issue("variants.ewc_weights", "weights must be non-negative reals"));
    }
    if !(cfg.variants.forget_ewc_weight >= 0.0 && cfg.variants.forget_ewc_weight.is_finite()) {
        out.push(issue("variants.forget_ewc_weight", "must be a non-negative real"));
    }
    out
}

fn get_f64(v: &Value) -> std::result::Result<f64, String> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        other => Err(format!("expected a number, found {}", other.type_str())),
    }
}

fn get_u64(v: &Value) -> std::result::Result<u64, String> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        Value::Integer(i) => Err(format!("expected a non-negative integer, found {i}")),
        other => Err(format!("expected an integer, found {}", other.type_str())),
    }
}

fn get_usize(v: &Value) -> std::result::Result<usize, String> {
    get_u64(v).map(|x| x as usize)
}

fn get_u32(v: &Value) -> std::result::Result<u32, String> {
    get_u64(v).and_then(|x| u32::try_from(x).map_err(|_| format!("{x} is out of range")))
}

fn get_list<T>(
    v: &Value,
    item: impl Fn(&Value) -> std::result::Result<T, String>,
) -> std::result::Result<Vec<T>, String> {
    match v {
        Value::Array(items) => items.iter().map(item).collect(),
        other => Err(format!("expected an array, found {}", other.type_str())),
    }
}

/// Applies one `section.key = value` assignment.
fn assign(cfg: &mut RunConfig, section: &str, key: &str, v: &Value) -> std::result::Result<(), String> {
    macro_rules! set {
        ($field:expr, $getter:expr) => {{
            $field = $getter(v)?;
            Ok(())
        }};
    }
    match (section, key) {
        ("sim", "num_users") => set!(cfg.sim.num_users, get_usize),
        ("sim", "num_resources") => set!(cfg.sim.num_resources, get_usize),
        ("sim", "p_job") => set!(cfg.sim.p_job, get_f64),
        ("sim", "p_prio") => set!(cfg.sim.p_prio, get_f64),
        ("sim", "snr_db") => set!(cfg.sim.snr_db, get_f64),
        ("sim", "rayleigh_scale") => set!(cfg.sim.rayleigh_scale, get_f64),
        ("sim", "max_job_size") => set!(cfg.sim.max_job_size, get_u32),
        ("sim", "max_delay") => set!(cfg.sim.max_delay, get_u32),
        ("sim", "weight_sumrate") => set!(cfg.sim.weight_sumrate, get_f64),
        ("sim", "weight_timeout") => set!(cfg.sim.weight_timeout, get_f64),
        ("sim", "weight_prio") => set!(cfg.sim.weight_prio, get_f64),
        ("sim", "rng_seed") => set!(cfg.sim.rng_seed, get_u64),
        ("agent", "batch_size") => set!(cfg.agent.batch_size, get_usize),
        ("agent", "buffer_capacity") => set!(cfg.agent.buffer_capacity, get_usize),
        ("agent", "learning_rate_actor") => set!(cfg.agent.learning_rate_actor, get_f64),
        ("agent", "learning_rate_critic") => set!(cfg.agent.learning_rate_critic, get_f64),
        ("agent", "hidden_layers") => set!(cfg.agent.hidden_layers, |v| get_list(v, get_usize)),
        ("schedule", "initial_epsilon") => set!(cfg.schedule.initial_epsilon, get_f64),
        ("schedule", "zero_fraction") => set!(cfg.schedule.zero_fraction, get_f64),
        ("train", "episodes") => set!(cfg.train.episodes, get_usize),
        ("train", "steps_per_episode") => set!(cfg.train.steps_per_episode, get_usize),
        ("train", "fisher_batches") => set!(cfg.train.fisher_batches, get_usize),
        ("train", "stage1_memory_capacity") => set!(cfg.train.stage1_memory_capacity, get_usize),
        ("eval", "episodes") => set!(cfg.eval.episodes, get_usize),
        ("eval", "steps_per_episode") => set!(cfg.eval.steps_per_episode, get_usize),
        ("eval", "p_prio") => set!(cfg.eval.p_prio, get_f64),
        ("eval", "seeds") => set!(cfg.eval.seeds, get_usize),
        ("variants", "prio_only_p_prio") => set!(cfg.variants.prio_only_p_prio, get_f64),
        ("variants", "augmented_p_prio") => set!(cfg.variants.augmented_p_prio, get_f64),
        ("variants", "augmented_episode_factor") => {
            set!(cfg.variants.augmented_episode_factor, get_usize)
        }
        ("variants", "gem_memory_sizes") => {
            set!(cfg.variants.gem_memory_sizes, |v| get_list(v, get_usize))
        }
        ("variants", "ewc_weights") => set!(cfg.variants.ewc_weights, |v| get_list(v, get_f64)),
        ("variants", "forget_gem_memory_size") => {
            set!(cfg.variants.forget_gem_memory_size, get_usize)
        }
        ("variants", "forget_ewc_weight") => set!(cfg.variants.forget_ewc_weight, get_f64),
        _ => Err("unknown key".to_string()),
    }
}

const SECTIONS: [&str; 6] = ["sim", "agent", "schedule", "train", "eval", "variants"];

/// Parses a configuration document, applying profile defaults for missing
/// keys. Every problem is reported at once.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let table: Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::ConfigKeys(vec![issue("<document>", e.to_string())]))?;
    let mut issues = Vec::new();

    let profile = match table.get("profile") {
        None => Profile::Paper,
        Some(Value::String(s)) if s == "paper" => Profile::Paper,
        Some(Value::String(s)) if s == "desk" => Profile::Desk,
        Some(other) => {
            issues.push(issue("profile", format!("expected \"paper\" or \"desk\", found {other}")));
            Profile::Paper
        }
    };
    let mut cfg = RunConfig::for_profile(profile);

    for (name, value) in &table {
        if name == "profile" {
            continue;
        }
        match value {
            Value::Table(section) if SECTIONS.contains(&name.as_str()) => {
                for (key, v) in section {
                    if let Err(msg) = assign(&mut cfg, name, key, v) {
                        issues.push(issue(&format!("{name}.{key}"), msg));
                    }
                }
            }
            Value::Table(_) => issues.push(issue(name, "unknown section")),
            _ => issues.push(issue(name, "unknown key")),
        }
    }

    // keys that failed to parse keep their default, so only report constraint
    // problems for the others
    for c in constraint_issues(&cfg) {
        if !issues.iter().any(|i| i.key == c.key) {
            issues.push(c);
        }
    }
    if issues.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::ConfigKeys(issues))
    }
}

fn fmt_f64(x: f64) -> String {
    // Debug formatting is the shortest representation that round-trips
    format!("{x:?}")
}

fn fmt_list<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    format!("[{}]", items.iter().map(f).collect::<Vec<_>>().join(", "))
}

/// Writes every key explicitly; `parse_config(&emit_config(c)) == c`.
pub fn emit_config(cfg: &RunConfig) -> String {
    let mut s = String::new();
    let sim = &cfg.sim;
    let a = &cfg.agent;
    let v = &cfg.variants;
    writeln!(s, "profile = \"{}\"", cfg.profile.name()).unwrap();
    writeln!(s, "\n[sim]").unwrap();
    writeln!(s, "num_users = {}", sim.num_users).unwrap();
    writeln!(s, "num_resources = {}", sim.num_resources).unwrap();
    writeln!(s, "p_job = {}", fmt_f64(sim.p_job)).unwrap();
    writeln!(s, "p_prio = {}", fmt_f64(sim.p_prio)).unwrap();
    writeln!(s, "snr_db = {}", fmt_f64(sim.snr_db)).unwrap();
    writeln!(s, "rayleigh_scale = {}", fmt_f64(sim.rayleigh_scale)).unwrap();
    writeln!(s, "max_job_size = {}", sim.max_job_size).unwrap();
    writeln!(s, "max_delay = {}", sim.max_delay).unwrap();
    writeln!(s, "weight_sumrate = {}", fmt_f64(sim.weight_sumrate)).unwrap();
    writeln!(s, "weight_timeout = {}", fmt_f64(sim.weight_timeout)).unwrap();
    writeln!(s, "weight_prio = {}", fmt_f64(sim.weight_prio)).unwrap();
    writeln!(s, "rng_seed = {}", sim.rng_seed).unwrap();
    writeln!(s, "\n[agent]").unwrap();
    writeln!(s, "batch_size = {}", a.batch_size).unwrap();
    writeln!(s, "buffer_capacity = {}", a.buffer_capacity).unwrap();
    writeln!(s, "learning_rate_actor = {}", fmt_f64(a.learning_rate_actor)).unwrap();
    writeln!(s, "learning_rate_critic = {}", fmt_f64(a.learning_rate_critic)).unwrap();
    writeln!(s, "hidden_layers = {}", fmt_list(&a.hidden_layers, |x| x.to_string())).unwrap();
    writeln!(s, "\n[schedule]").unwrap();
    writeln!(s, "initial_epsilon = {}", fmt_f64(cfg.schedule.initial_epsilon)).unwrap();
    writeln!(s, "zero_fraction = {}", fmt_f64(cfg.schedule.zero_fraction)).unwrap();
    writeln!(s, "\n[train]").unwrap();
    writeln!(s, "episodes = {}", cfg.train.episodes).unwrap();
    writeln!(s, "steps_per_episode = {}", cfg.train.steps_per_episode).unwrap();
    writeln!(s, "fisher_batches = {}", cfg.train.fisher_batches).unwrap();
    writeln!(s, "stage1_memory_capacity = {}", cfg.train.stage1_memory_capacity).unwrap();
    writeln!(s, "\n[eval]").unwrap();
    writeln!(s, "episodes = {}", cfg.eval.episodes).unwrap();
    writeln!(s, "steps_per_episode = {}", cfg.eval.steps_per_episode).unwrap();
    writeln!(s, "p_prio = {}", fmt_f64(cfg.eval.p_prio)).unwrap();
    writeln!(s, "seeds = {}", cfg.eval.seeds).unwrap();
    writeln!(s, "\n[variants]").unwrap();
    writeln!(s, "prio_only_p_prio = {}", fmt_f64(v.prio_only_p_prio)).unwrap();
    writeln!(s, "augmented_p_prio = {}", fmt_f64(v.augmented_p_prio)).unwrap();
    writeln!(s, "augmented_episode_factor = {}", v.augmented_episode_factor).unwrap();
    writeln!(s, "gem_memory_sizes = {}", fmt_list(&v.gem_memory_sizes, |x| x.to_string())).unwrap();
    writeln!(s, "ewc_weights = {}", fmt_list(&v.ewc_weights, |x| fmt_f64(*x))).unwrap();
    writeln!(s, "forget_gem_memory_size = {}", v.forget_gem_memory_size).unwrap();
    writeln!(s, "forget_ewc_weight = {}", fmt_f64(v.forget_ewc_weight)).unwrap();
    s
}
