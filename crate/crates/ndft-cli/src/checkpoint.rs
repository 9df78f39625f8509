//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"NDFTCKP1"
//! 8       4     version u32                (currently 1)
//! 12      4     header_len u32
//! 16      n     header JSON (UTF-8)        — arch, schedule scalars, RNG states
//! 16+n    4     tensor_count u32
//! ...           tensor records:
//!                 name_len u32, name UTF-8,
//!                 ndim u32, dims u32 × ndim,
//!                 payload f32 × Π dims     (row-major)
//! ```
//!
//! Model parameters are stored under their canonical names and optimizer
//! velocities under `opt/<name>`. Payloads are single precision; in-memory
//! compute is double, so save→load rounds each value to the nearest f32
//! (and save→load→save is byte-identical).

use std::io::{Read, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use ndft_core::rng::RngState;
use ndft_core::{ArchConfig, DataConfig, StreamRng, TrainConfig, Trainer};

const MAGIC: &[u8; 8] = b"NDFTCKP1";
const VERSION: u32 = 1;

/// Scalar state carried in the checkpoint header.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub arch: ArchConfig,
    pub mode: String,
    pub gammas: Vec<f64>,
    pub iteration: u64,
    pub total_task_steps: u64,
    pub restart_clock: u64,
    pub restart_log: Vec<u64>,
    /// Current learning rate per canonical group.
    pub lrs: Vec<f64>,
    pub rng_data: RngState,
    pub rng_adversary: RngState,
    pub rng_restart: RngState,
}

/// Everything read back from a checkpoint file.
#[derive(Debug)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn save(trainer: &Trainer, path: &Path) -> Result<()> {
    let header = Header {
        arch: trainer.arch.clone(),
        mode: trainer.cfg.mode.as_str().to_string(),
        gammas: trainer.cfg.gammas.clone(),
        iteration: trainer.state.iteration,
        total_task_steps: trainer.state.total_task_steps,
        restart_clock: trainer.state.restart_clock,
        restart_log: trainer.state.restart_log.clone(),
        lrs: trainer.state.sgd.iter().map(|s| s.lr()).collect(),
        rng_data: trainer.state.rngs.data.state(),
        rng_adversary: trainer.state.rngs.adversary.state(),
        rng_restart: trainer.state.rngs.restart.state(),
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    put_u32(&mut buf, header_json.len() as u32);
    buf.extend_from_slice(&header_json);

    let mut records: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    for (name, tensor) in trainer.model.named_params() {
        records.push((name, tensor.shape().to_vec(), tensor.data().clone()));
    }
    for (group, sgd) in trainer.model.groups().iter().zip(&trainer.state.sgd) {
        for ((name, _), velocity) in group.params.iter().zip(sgd.velocities()) {
            records.push((format!("opt/{name}"), vec![velocity.len()], velocity.clone()));
        }
    }

    put_u32(&mut buf, records.len() as u32);
    for (name, shape, data) in &records {
        put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, shape.len() as u32);
        for &d in shape {
            put_u32(&mut buf, d as u32);
        }
        for &v in data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, buf).with_context(|| format!("writing checkpoint {}", path.display()))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            bail!("truncated checkpoint: {what} at offset {}", self.pos);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut file = std::fs::File::open(path)
        .with_context(|| format!("opening checkpoint {}", path.display()))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };

    let magic = r.bytes(8, "magic")?;
    if magic != MAGIC {
        bail!("not a checkpoint file (bad magic)");
    }
    let version = r.u32("version")?;
    if version != VERSION {
        bail!("unsupported checkpoint version {version} (expected {VERSION})");
    }
    let header_len = r.u32("header length")? as usize;
    let header: Header = serde_json::from_slice(r.bytes(header_len, "header")?)
        .map_err(|e| anyhow!("corrupt checkpoint header: {e}"))?;

    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = r.u32(&format!("record {i}: name length"))? as usize;
        let name = std::str::from_utf8(r.bytes(name_len, &format!("record {i}: name"))?)
            .map_err(|_| anyhow!("record {i}: name is not UTF-8"))?
            .to_string();
        let ndim = r.u32(&format!("record {i} ({name}): ndim"))? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32(&format!("record {i} ({name}): dims"))? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.bytes(numel * 4, &format!("record {i} ({name}): payload"))?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.push((name, shape, data));
    }
    if r.pos != buf.len() {
        bail!("checkpoint has {} trailing bytes after the last record", buf.len() - r.pos);
    }
    Ok(Checkpoint { header, tensors })
}

/// Rebuilds a trainer at the checkpointed state. The configs must describe
/// the same architecture the checkpoint was saved from.
pub fn resume(
    arch: &ArchConfig,
    data_cfg: &DataConfig,
    train_cfg: &TrainConfig,
    ckpt: &Checkpoint,
) -> Result<Trainer> {
    if *arch != ckpt.header.arch {
        bail!(
            "checkpoint architecture does not match the config (checkpoint {:?} vs config {:?})",
            ckpt.header.arch,
            arch
        );
    }
    let mut trainer = Trainer::new(arch, data_cfg, train_cfg).map_err(|e| anyhow!("{e}"))?;

    let mut by_name: std::collections::HashMap<&str, (&Vec<usize>, &Vec<f64>)> = ckpt
        .tensors
        .iter()
        .map(|(n, s, d)| (n.as_str(), (s, d)))
        .collect();

    for (name, tensor) in trainer.model.named_params() {
        let (shape, data) = by_name
            .remove(name.as_str())
            .ok_or_else(|| anyhow!("checkpoint is missing tensor '{name}'"))?;
        if shape != &tensor.shape().to_vec() {
            bail!("tensor '{name}': checkpoint shape {shape:?} vs model {:?}", tensor.shape());
        }
        tensor.data_mut().copy_from_slice(data);
        tensor.zero_grad();
    }
    let groups = trainer.model.groups();
    for (gi, group) in groups.iter().enumerate() {
        let mut velocities = Vec::with_capacity(group.params.len());
        for (name, tensor) in &group.params {
            let key = format!("opt/{name}");
            let (_, data) = by_name
                .remove(key.as_str())
                .ok_or_else(|| anyhow!("checkpoint is missing velocity '{key}'"))?;
            if data.len() != tensor.numel() {
                bail!("velocity '{key}': {} values vs parameter {}", data.len(), tensor.numel());
            }
            velocities.push(data.clone());
        }
        trainer.state.sgd[gi]
            .restore_velocities(velocities)
            .map_err(|e| anyhow!("{e}"))?;
        trainer.state.sgd[gi].set_lr(ckpt.header.lrs[gi]);
    }
    if let Some(extra) = by_name.keys().next() {
        bail!("checkpoint holds unknown tensor '{extra}'");
    }

    trainer.state.iteration = ckpt.header.iteration;
    trainer.state.total_task_steps = ckpt.header.total_task_steps;
    trainer.state.restart_clock = ckpt.header.restart_clock;
    trainer.state.restart_log = ckpt.header.restart_log.clone();
    trainer.state.rngs.data = StreamRng::restore(&ckpt.header.rng_data);
    trainer.state.rngs.adversary = StreamRng::restore(&ckpt.header.rng_adversary);
    trainer.state.rngs.restart = StreamRng::restore(&ckpt.header.rng_restart);
    Ok(trainer)
}
