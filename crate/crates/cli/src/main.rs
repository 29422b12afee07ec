//! `swansched`: train, evaluate, continue and summarize scheduler runs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use swansched::config::{emit_config, Profile, RunConfig};
use swansched::harness::{self, ProtocolPlan, RunResult, VariantKind};
use swansched::metrics::MetricsRecord;
use swansched::summary;

#[derive(Parser)]
#[command(name = "swansched", version, about = "Actor-critic resource scheduling with rare priority events")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Paper,
    Desk,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Paper => Profile::Paper,
            ProfileArg::Desk => Profile::Desk,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one variant for one seed into <runs>/<variant>__seed<n>/.
    Train {
        /// Config file; profile defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// baseline, prio_only, gem-<M>, ewc-<weight>, augmented-<p>.
        #[arg(long)]
        variant: String,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "runs")]
        runs: PathBuf,
        /// Run directory to start from (defaults to <runs>/prio_only__seed<n>).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate a trained checkpoint with frozen weights.
    Eval {
        /// Run directory or its checkpoint/ subdirectory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides the run's config snapshot.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Continue training a checkpoint at p_prio = 0 into <variant>+__seed<n>/.
    Forget {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also evaluate the continued checkpoint.
        #[arg(long)]
        eval: bool,
    },
    /// Aggregate every evaluation log under a runs directory.
    Report {
        #[arg(long)]
        runs: PathBuf,
        /// Output directory for the summary files (defaults to --runs).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train, evaluate and continue the whole variant matrix, then report.
    Protocol {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        runs: PathBuf,
    },
    /// Print a fully resolved config document.
    Config {
        #[arg(long, value_enum, default_value = "paper")]
        profile: ProfileArg,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(RunConfig::paper()),
    }
}

fn print_episode(r: &MetricsRecord) {
    eprintln!(
        "  {} seed {} episode {}: reward/step {:.4}, timeouts {}, prio timeouts {}/{}, eps {:.3}",
        r.variant,
        r.seed,
        r.episode,
        r.reward / r.steps.max(1) as f64,
        r.timeouts,
        r.prio_timeouts,
        r.prio_events,
        r.final_epsilon
    );
}

fn print_eval(dir: &Path, r: &RunResult) {
    println!(
        "{}: reward/step {:.6}, prio timeout rate {:.4} ({}/{}) over {} steps",
        dir.display(),
        r.overall_reward(),
        r.prio_timeout_rate(),
        r.prio_timeouts(),
        r.prio_events(),
        r.total_steps()
    );
}

fn report(runs: &Path, out: &Path) -> Result<()> {
    let results = harness::collect_eval_results(runs)?;
    if results.is_empty() {
        bail!("no {} files under {}", harness::EVAL_METRICS, runs.display());
    }
    let report = harness::aggregate_and_normalize(&results)?;
    summary::emit_summary(&report, out)?;
    print!("{}", summary::render_text(&report));
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, variant, seed, runs, init } => {
            let cfg = load_config(config.as_deref())?;
            let kind: VariantKind = variant.parse()?;
            if kind.is_continuation() {
                bail!("use `forget` to continue '{}'", variant.trim_end_matches('+'));
            }
            let (dir, result) = harness::train_run(&cfg, kind, seed, &runs, init.as_deref(), &mut print_episode)?;
            println!("trained {} in {:.1?} -> {}", result.variant, result.wall_clock, dir.display());
        }
        Command::Eval { checkpoint, config } => {
            let cfg = config.as_deref().map(|p| load_config(Some(p))).transpose()?;
            let result = harness::eval_run(&checkpoint, cfg.as_ref())?;
            print_eval(&harness::resolve_run_dir(&checkpoint), &result);
        }
        Command::Forget { checkpoint, config, eval } => {
            let cfg = config.as_deref().map(|p| load_config(Some(p))).transpose()?;
            let (dir, result) = harness::forget_run(&checkpoint, cfg.as_ref(), &mut print_episode)?;
            println!("continued {} in {:.1?} -> {}", result.variant, result.wall_clock, dir.display());
            if eval {
                print_eval(&dir, &harness::eval_run(&dir, cfg.as_ref())?);
            }
        }
        Command::Report { runs, out } => report(&runs, out.as_deref().unwrap_or(&runs))?,
        Command::Protocol { config, runs } => {
            let cfg = load_config(config.as_deref())?;
            let plan = ProtocolPlan::full(&cfg);
            harness::run_protocol(&cfg, &plan, &runs, &|line| eprintln!("{line}"))?;
            report(&runs, &runs)?;
        }
        Command::Config { profile } => print!("{}", emit_config(&RunConfig::for_profile(profile.into()))),
    }
    Ok(())
}
