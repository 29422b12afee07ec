//! Plot-ready summary tables.
//!
//! `summary_reward.csv` and `summary_prio.csv` share one layout, one row per
//! variant in report order:
//!
//! ```text
//! variant,seeds,normalized_mean,normalized_variance,raw_mean
//! ```
//!
//! `summary.txt` renders both side by side. Continuation variants keep their
//! trailing `+`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::harness::{EvalReport, VariantScore};

pub const REWARD_TABLE: &str = "summary_reward.csv";
pub const PRIO_TABLE: &str = "summary_prio.csv";
pub const TEXT_SUMMARY: &str = "summary.txt";

const COLUMNS: [&str; 5] = ["variant", "seeds", "normalized_mean", "normalized_variance", "raw_mean"];

fn write_table(path: &Path, report: &EvalReport, pick: fn(&VariantScore) -> (f64, f64, f64)) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(COLUMNS)?;
    for row in &report.rows {
        let (mean, var, raw) = pick(row);
        w.write_record([
            row.variant.clone(),
            row.seeds.to_string(),
            format!("{mean:?}"),
            format!("{var:?}"),
            format!("{raw:?}"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn render_text(report: &EvalReport) -> String {
    let width = report.rows.iter().map(|r| r.variant.len()).max().unwrap_or(0).max(7);
    let mut out = String::new();
    let _ = writeln!(out, "Evaluation summary (normalized to baseline mean; variance across seeds)");
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:<width$}  {:>5}  {:>12}  {:>12}  {:>12}  {:>12}",
        "variant", "seeds", "reward", "reward var", "prio TO", "prio TO var"
    );
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>5}  {:>12.4}  {:>12.3e}  {:>12.4}  {:>12.3e}",
            r.variant, r.seeds, r.reward_mean, r.reward_variance, r.prio_mean, r.prio_variance
        );
    }
    out
}

/// Writes the two tables and the text rendering into `dir`.
pub fn emit_summary(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_table(&dir.join(REWARD_TABLE), report, |r| (r.reward_mean, r.reward_variance, r.raw_reward_mean))?;
    write_table(&dir.join(PRIO_TABLE), report, |r| (r.prio_mean, r.prio_variance, r.raw_prio_mean))?;
    std::fs::write(dir.join(TEXT_SUMMARY), render_text(report))?;
    Ok(())
}
