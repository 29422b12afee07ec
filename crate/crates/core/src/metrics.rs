//! Per-episode metrics logs.
//!
//! A metrics file is CSV with a fixed header and one row per
//! `(variant, seed, episode)`:
//!
//! ```text
//! variant,seed,episode,steps,reward,sum_rate,timeouts,prio_timeouts,prio_events,final_epsilon
//! ```
//!
//! Reals are written in their shortest round-trip decimal form, so reading a
//! file back reproduces every `f64` bit for bit. Files are only ever
//! appended to; each row is flushed as it is written.

use std::fs::{File, OpenOptions};
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEADER: [&str; 10] = [
    "variant",
    "seed",
    "episode",
    "steps",
    "reward",
    "sum_rate",
    "timeouts",
    "prio_timeouts",
    "prio_events",
    "final_epsilon",
];

/// Totals over one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub variant: String,
    pub seed: u64,
    pub episode: usize,
    pub steps: u64,
    pub reward: f64,
    pub sum_rate: f64,
    pub timeouts: u64,
    pub prio_timeouts: u64,
    pub prio_events: u64,
    pub final_epsilon: f64,
}

impl MetricsRecord {
    /// Ordering key: `(variant, seed, episode)`.
    pub fn key(&self) -> (&str, u64, usize) {
        (&self.variant, self.seed, self.episode)
    }
}

/// Append-only writer for one metrics file.
pub struct MetricsWriter {
    inner: csv::Writer<BufWriter<File>>,
}

impl MetricsWriter {
    /// Opens `path` for appending, writing the header if the file is new or empty.
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let fresh = file.metadata()?.len() == 0;
        let mut inner = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(BufWriter::new(file));
        if fresh {
            inner.write_record(HEADER)?;
            inner.flush()?;
        }
        Ok(Self { inner })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        self.inner.serialize(record)?;
        self.inner.flush()?;
        Ok(())
    }
}

/// Appends `records` to `path` (creating it with a header line).
pub fn write_metrics<'a, I>(path: &Path, records: I) -> Result<()>
where
    I: IntoIterator<Item = &'a MetricsRecord>,
{
    let mut w = MetricsWriter::append(path)?;
    for r in records {
        w.write(r)?;
    }
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    if header.iter().ne(HEADER.iter().copied()) {
        return Err(Error::Format {
            what: "metrics header",
            path: path.to_path_buf(),
            reason: format!("expected {}", HEADER.join(",")),
        });
    }
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}
