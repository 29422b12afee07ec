//! Binary checkpoint container.
//!
//! A checkpoint is a directory of little-endian binary records. Every record
//! opens with a 4-byte magic tag and a `u32` format version (currently 1).
//!
//! `actor.net`, `critic.net` (magic `SSNN`):
//!
//! | bytes    | field                                              |
//! |----------|----------------------------------------------------|
//! | 4        | magic `SSNN`                                       |
//! | 4        | `u32` version                                      |
//! | 4        | `u32` L, number of layer sizes                     |
//! | 4·L      | `u32` layer sizes, input first                     |
//! | 1        | hidden activation (`0` = ReLU)                     |
//! | 1        | output activation (`0` = softmax, `1` = linear)    |
//! | 8        | `u64` P, parameter count                           |
//! | 8·P      | `f64` parameters in canonical layer-major order    |
//!
//! `actor.adam`, `critic.adam` (magic `SSAD`): version, `u64` step count,
//! `f64` learning rate, β1, β2, ε, `u64` n, then n `f64` first moments and
//! n `f64` second moments.
//!
//! `agent.meta` (magic `SSAG`): version, `u64` completed training episodes
//! (schedule position), `u64` run seed, `u32` byte length then UTF-8 variant
//! name.
//!
//! `ewc.anchor` (magic `SSEW`, optional): version, `f64` weight λ, `u64` n,
//! n `f64` anchor parameters, n `f64` Fisher values.
//!
//! `gem.memory` and `stage1.memory` (magic `SSGM`, optional): version,
//! `u32` state length S, `u32` action length A, `u64` rows R, then R rows of
//! S state values, A action values and one reward, all `f64`.
//!
//! Reading a checkpoint back reproduces every value bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};

use crate::agent::Batch;
use crate::continual::{EwcAnchor, GemMemory, Safeguard};
use crate::error::{Error, Result};
use crate::nn::{AdamState, HiddenActivation, NetSpec, Network, OutputActivation, ParamVector};

pub const FORMAT_VERSION: u32 = 1;

const NET_MAGIC: &[u8; 4] = b"SSNN";
const ADAM_MAGIC: &[u8; 4] = b"SSAD";
const META_MAGIC: &[u8; 4] = b"SSAG";
const EWC_MAGIC: &[u8; 4] = b"SSEW";
const MEMORY_MAGIC: &[u8; 4] = b"SSGM";

fn bad(what: &'static str, path: &Path, reason: impl Into<String>) -> Error {
    Error::Format { what, path: path.to_path_buf(), reason: reason.into() }
}

fn write_header(w: &mut impl Write, magic: &[u8; 4]) -> std::io::Result<()> {
    w.write_all(magic)?;
    w.write_u32::<LE>(FORMAT_VERSION)
}

fn read_header(r: &mut impl Read, magic: &[u8; 4], what: &'static str, path: &Path) -> Result<()> {
    let mut got = [0u8; 4];
    r.read_exact(&mut got)?;
    if &got != magic {
        return Err(bad(what, path, format!("bad magic {got:?}")));
    }
    let version = r.read_u32::<LE>()?;
    if version != FORMAT_VERSION {
        return Err(bad(what, path, format!("unsupported format version {version}")));
    }
    Ok(())
}

fn write_f64s(w: &mut impl Write, xs: &[f64]) -> std::io::Result<()> {
    xs.iter().try_for_each(|&x| w.write_f64::<LE>(x))
}

fn read_f64s(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f64>> {
    let mut out = vec![0.0; n];
    r.read_f64_into::<LE>(&mut out)?;
    Ok(out)
}

/// Guards allocations driven by counts read from disk.
fn checked_len(n: u64, what: &'static str, path: &Path) -> Result<usize> {
    const LIMIT: u64 = 1 << 34;
    if n > LIMIT {
        return Err(bad(what, path, format!("implausible length {n}")));
    }
    Ok(n as usize)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

fn expect_eof(r: &mut impl Read, what: &'static str, path: &Path) -> Result<()> {
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(bad(what, path, "trailing bytes"));
    }
    Ok(())
}

pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    write_header(&mut w, NET_MAGIC)?;
    w.write_u32::<LE>(net.spec.layer_sizes.len() as u32)?;
    for &s in &net.spec.layer_sizes {
        w.write_u32::<LE>(s as u32)?;
    }
    w.write_u8(match net.spec.hidden_activation {
        HiddenActivation::Relu => 0,
    })?;
    w.write_u8(match net.spec.output_activation {
        OutputActivation::Softmax => 0,
        OutputActivation::Linear => 1,
    })?;
    w.write_u64::<LE>(net.params.len() as u64)?;
    write_f64s(&mut w, &net.params)?;
    w.flush()?;
    Ok(())
}

pub fn load_network(path: &Path) -> Result<Network> {
    const WHAT: &str = "network record";
    let mut r = open(path)?;
    read_header(&mut r, NET_MAGIC, WHAT, path)?;
    let n_layers = r.read_u32::<LE>()? as usize;
    if !(2..=1024).contains(&n_layers) {
        return Err(bad(WHAT, path, format!("{n_layers} layer sizes")));
    }
    let layer_sizes = (0..n_layers)
        .map(|_| r.read_u32::<LE>().map(|x| x as usize))
        .collect::<std::io::Result<Vec<_>>>()?;
    let hidden_activation = match r.read_u8()? {
        0 => HiddenActivation::Relu,
        x => return Err(bad(WHAT, path, format!("unknown hidden activation {x}"))),
    };
    let output_activation = match r.read_u8()? {
        0 => OutputActivation::Softmax,
        1 => OutputActivation::Linear,
        x => return Err(bad(WHAT, path, format!("unknown output activation {x}"))),
    };
    let spec = NetSpec { layer_sizes, hidden_activation, output_activation };
    spec.validate().map_err(|e| bad(WHAT, path, e.to_string()))?;
    let n = checked_len(r.read_u64::<LE>()?, WHAT, path)?;
    if n != spec.num_params() {
        return Err(bad(WHAT, path, format!("{n} parameters, spec needs {}", spec.num_params())));
    }
    let params = ParamVector(read_f64s(&mut r, n)?);
    expect_eof(&mut r, WHAT, path)?;
    Network::from_params(spec, params)
}

pub fn save_adam(adam: &AdamState, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    write_header(&mut w, ADAM_MAGIC)?;
    w.write_u64::<LE>(adam.step_count)?;
    write_f64s(&mut w, &[adam.learning_rate, adam.beta1, adam.beta2, adam.epsilon])?;
    w.write_u64::<LE>(adam.first_moment.len() as u64)?;
    write_f64s(&mut w, &adam.first_moment)?;
    write_f64s(&mut w, &adam.second_moment)?;
    w.flush()?;
    Ok(())
}

pub fn load_adam(path: &Path) -> Result<AdamState> {
    const WHAT: &str = "optimizer record";
    let mut r = open(path)?;
    read_header(&mut r, ADAM_MAGIC, WHAT, path)?;
    let step_count = r.read_u64::<LE>()?;
    let h = read_f64s(&mut r, 4)?;
    let n = checked_len(r.read_u64::<LE>()?, WHAT, path)?;
    let first_moment = read_f64s(&mut r, n)?;
    let second_moment = read_f64s(&mut r, n)?;
    expect_eof(&mut r, WHAT, path)?;
    Ok(AdamState {
        first_moment,
        second_moment,
        step_count,
        learning_rate: h[0],
        beta1: h[1],
        beta2: h[2],
        epsilon: h[3],
    })
}

pub fn save_ewc(anchor: &EwcAnchor, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    write_header(&mut w, EWC_MAGIC)?;
    w.write_f64::<LE>(anchor.weight)?;
    w.write_u64::<LE>(anchor.anchor_params.len() as u64)?;
    write_f64s(&mut w, &anchor.anchor_params)?;
    write_f64s(&mut w, &anchor.fisher)?;
    w.flush()?;
    Ok(())
}

pub fn load_ewc(path: &Path) -> Result<EwcAnchor> {
    const WHAT: &str = "EWC anchor";
    let mut r = open(path)?;
    read_header(&mut r, EWC_MAGIC, WHAT, path)?;
    let weight = r.read_f64::<LE>()?;
    let n = checked_len(r.read_u64::<LE>()?, WHAT, path)?;
    let anchor = ParamVector(read_f64s(&mut r, n)?);
    let fisher = read_f64s(&mut r, n)?;
    expect_eof(&mut r, WHAT, path)?;
    EwcAnchor::new(anchor, fisher, weight).map_err(|e| bad(WHAT, path, e.to_string()))
}

pub fn save_batch(batch: &Batch, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    write_header(&mut w, MEMORY_MAGIC)?;
    w.write_u32::<LE>(batch.states.ncols() as u32)?;
    w.write_u32::<LE>(batch.actions.ncols() as u32)?;
    w.write_u64::<LE>(batch.len() as u64)?;
    for i in 0..batch.len() {
        for &x in batch.states.row(i) {
            w.write_f64::<LE>(x)?;
        }
        for &x in batch.actions.row(i) {
            w.write_f64::<LE>(x)?;
        }
        w.write_f64::<LE>(batch.rewards[i])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_batch(path: &Path) -> Result<Batch> {
    const WHAT: &str = "memory record";
    let mut r = open(path)?;
    read_header(&mut r, MEMORY_MAGIC, WHAT, path)?;
    let sl = r.read_u32::<LE>()? as usize;
    let al = r.read_u32::<LE>()? as usize;
    let rows = checked_len(r.read_u64::<LE>()?, WHAT, path)?;
    let mut states = Array2::zeros((rows, sl));
    let mut actions = Array2::zeros((rows, al));
    let mut rewards = Array1::zeros(rows);
    for i in 0..rows {
        for x in states.row_mut(i) {
            *x = r.read_f64::<LE>()?;
        }
        for x in actions.row_mut(i) {
            *x = r.read_f64::<LE>()?;
        }
        rewards[i] = r.read_f64::<LE>()?;
    }
    expect_eof(&mut r, WHAT, path)?;
    Ok(Batch { states, actions, rewards })
}

/// Everything needed to resume, evaluate or extend a trained scheduler.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub variant: String,
    pub seed: u64,
    pub episodes_completed: u64,
    pub actor: Network,
    pub critic: Network,
    pub actor_adam: AdamState,
    pub critic_adam: AdamState,
    pub safeguard: Safeguard,
    /// Reservoir of stage-one transitions (kept by priority-only runs).
    pub stage1_memory: Option<Batch>,
}

impl Checkpoint {
    pub fn paths(dir: &Path) -> CheckpointPaths {
        CheckpointPaths { dir: dir.to_path_buf() }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let p = Self::paths(dir);
        save_network(&self.actor, &p.file("actor.net"))?;
        save_network(&self.critic, &p.file("critic.net"))?;
        save_adam(&self.actor_adam, &p.file("actor.adam"))?;
        save_adam(&self.critic_adam, &p.file("critic.adam"))?;

        let mut w = create(&p.file("agent.meta"))?;
        write_header(&mut w, META_MAGIC)?;
        w.write_u64::<LE>(self.episodes_completed)?;
        w.write_u64::<LE>(self.seed)?;
        w.write_u32::<LE>(self.variant.len() as u32)?;
        w.write_all(self.variant.as_bytes())?;
        w.flush()?;

        for stale in ["ewc.anchor", "gem.memory", "stage1.memory"] {
            let f = p.file(stale);
            if f.exists() {
                std::fs::remove_file(f)?;
            }
        }
        match &self.safeguard {
            Safeguard::None => {}
            Safeguard::Ewc(a) => save_ewc(a, &p.file("ewc.anchor"))?,
            Safeguard::Gem(m) => save_batch(m.samples(), &p.file("gem.memory"))?,
        }
        if let Some(mem) = &self.stage1_memory {
            save_batch(mem, &p.file("stage1.memory"))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        const WHAT: &str = "agent metadata";
        let p = Self::paths(dir);
        let meta = p.file("agent.meta");
        let mut r = open(&meta)?;
        read_header(&mut r, META_MAGIC, WHAT, &meta)?;
        let episodes_completed = r.read_u64::<LE>()?;
        let seed = r.read_u64::<LE>()?;
        let len = r.read_u32::<LE>()? as usize;
        if len > 4096 {
            return Err(bad(WHAT, &meta, "variant name too long"));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        expect_eof(&mut r, WHAT, &meta)?;
        let variant = String::from_utf8(name).map_err(|_| bad(WHAT, &meta, "variant name is not UTF-8"))?;

        let ewc = p.file("ewc.anchor");
        let gem = p.file("gem.memory");
        let safeguard = if ewc.exists() {
            Safeguard::Ewc(load_ewc(&ewc)?)
        } else if gem.exists() {
            Safeguard::Gem(GemMemory::new(load_batch(&gem)?)?)
        } else {
            Safeguard::None
        };
        let stage1 = p.file("stage1.memory");
        let stage1_memory = if stage1.exists() { Some(load_batch(&stage1)?) } else { None };

        let ckpt = Self {
            variant,
            seed,
            episodes_completed,
            actor: load_network(&p.file("actor.net"))?,
            critic: load_network(&p.file("critic.net"))?,
            actor_adam: load_adam(&p.file("actor.adam"))?,
            critic_adam: load_adam(&p.file("critic.adam"))?,
            safeguard,
            stage1_memory,
        };
        if ckpt.actor_adam.first_moment.len() != ckpt.actor.params.len()
            || ckpt.critic_adam.first_moment.len() != ckpt.critic.params.len()
        {
            return Err(bad("checkpoint", dir, "optimizer state does not match network size"));
        }
        Ok(ckpt)
    }
}

pub struct CheckpointPaths {
    dir: PathBuf,
}

impl CheckpointPaths {
    pub fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}
