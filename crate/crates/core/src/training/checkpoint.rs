//! Checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic    b"TCLK"
//! version  u32
//! hlen     u64          length of the JSON header
//! header   hlen bytes   CheckpointHeader as JSON
//! blobs    concatenated tensors, each `rows * cols` values of the header's dtype
//! ```
//!
//! The header echoes the resolved config, the step counter, optimizer step,
//! queue cursors and, per blob, its name, shape, dtype and byte offset.
//! Tensors are stored as f64 so a resumed run continues bit-for-bit.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{Model, ParamRole, ParamSet};
use crate::error::{Result, TclError};
use crate::momentum::{MomentumPair, NegativeQueue, QueueKind};
use crate::tensor::Tensor;

use super::config::TrainConfig;
use super::optim::Moments;
use super::step::{OptState, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TCLK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueMeta {
    pub name: String,
    pub kind: QueueKind,
    pub head: usize,
    pub filled: usize,
    pub pushed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Resolved config as ordered key/value pairs.
    pub config: Vec<(String, String)>,
    pub step: u64,
    pub optimizer_step: u64,
    /// Randomness is derived from (seed, step), so the seed is the whole RNG state.
    pub rng_seed: u64,
    pub queues: Vec<QueueMeta>,
    pub blobs: Vec<BlobMeta>,
}

/// A decoded checkpoint: header plus named tensors in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub blobs: Vec<(String, Tensor)>,
}

fn push_set(blobs: &mut Vec<(String, Tensor)>, prefix: &str, set: &ParamSet) {
    for (name, t) in set.iter() {
        blobs.push((format!("{prefix}.{name}"), t.clone()));
    }
}

impl Checkpoint {
    pub fn from_state(cfg: &TrainConfig, state: &TrainState) -> Self {
        let mut blobs = Vec::new();
        push_set(&mut blobs, "online", &state.vision.online);
        push_set(&mut blobs, "online", &state.text.online);
        push_set(&mut blobs, "online", &state.fusion);
        push_set(&mut blobs, "shadow", &state.vision.shadow);
        push_set(&mut blobs, "shadow", &state.text.shadow);
        for (tag, m) in [("vision", &state.opt.vision), ("text", &state.opt.text), ("fusion", &state.opt.fusion)] {
            push_set(&mut blobs, &format!("adam_m.{tag}"), &m.m);
            push_set(&mut blobs, &format!("adam_v.{tag}"), &m.v);
        }
        blobs.push(("queue.text".into(), state.text_queue.raw_buffer().clone()));
        blobs.push(("queue.image".into(), state.image_queue.raw_buffer().clone()));
        let queue_meta = |name: &str, q: &NegativeQueue| QueueMeta {
            name: name.into(),
            kind: q.kind(),
            head: q.head(),
            filled: q.filled(),
            pushed: q.pushed(),
        };
        let mut offset = 0u64;
        let metas = blobs
            .iter()
            .map(|(name, t)| {
                let m = BlobMeta { name: name.clone(), rows: t.rows(), cols: t.cols(), dtype: "f64".into(), offset };
                offset += 8 * t.len() as u64;
                m
            })
            .collect();
        Checkpoint {
            header: CheckpointHeader {
                config: cfg.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
                step: state.step,
                optimizer_step: state.opt.t,
                rng_seed: cfg.seed,
                queues: vec![queue_meta("queue.text", &state.text_queue), queue_meta("queue.image", &state.image_queue)],
                blobs: metas,
            },
            blobs,
        }
    }

    /// The config echoed in the header.
    pub fn config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (k, v) in &self.header.config {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    fn blob(&self, name: &str) -> Result<&Tensor> {
        self.blobs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| TclError::Format(format!("checkpoint is missing blob {name}")))
    }

    fn fill(&self, prefix: &str, layout: &ParamSet, role: ParamRole) -> Result<ParamSet> {
        let mut out = ParamSet::new(role);
        for (name, t) in layout.iter() {
            let b = self.blob(&format!("{prefix}.{name}"))?;
            if b.shape() != t.shape() {
                return Err(TclError::Format(format!("blob {prefix}.{name} has shape {:?}, expected {:?}", b.shape(), t.shape())));
            }
            out.push(name, b.clone());
        }
        Ok(out)
    }

    fn queue(&self, name: &str) -> Result<NegativeQueue> {
        let meta = self
            .header
            .queues
            .iter()
            .find(|q| q.name == name)
            .ok_or_else(|| TclError::Format(format!("checkpoint is missing queue {name}")))?;
        NegativeQueue::from_parts(meta.kind, self.blob(name)?.clone(), meta.head, meta.filled, meta.pushed)
    }

    /// Rebuilds the model layout and full training state.
    pub fn restore(&self) -> Result<(TrainConfig, Model, TrainState)> {
        let cfg = self.config()?;
        let (model, layout) = Model::new(cfg.model.clone(), cfg.seed)?;
        let online = |l: &ParamSet| self.fill("online", l, ParamRole::Online);
        let vision = MomentumPair::from_parts(online(&layout.vision)?, self.fill("shadow", &layout.vision, ParamRole::Shadow)?, cfg.momentum)?;
        let text = MomentumPair::from_parts(online(&layout.text)?, self.fill("shadow", &layout.text, ParamRole::Shadow)?, cfg.momentum)?;
        let fusion = online(&layout.fusion)?;
        let moments = |tag: &str, l: &ParamSet| -> Result<Moments> {
            Ok(Moments {
                m: self.fill(&format!("adam_m.{tag}"), l, ParamRole::Online)?,
                v: self.fill(&format!("adam_v.{tag}"), l, ParamRole::Online)?,
            })
        };
        let opt = OptState {
            vision: moments("vision", &layout.vision)?,
            text: moments("text", &layout.text)?,
            fusion: moments("fusion", &layout.fusion)?,
            t: self.header.optimizer_step,
        };
        let state = TrainState {
            step: self.header.step,
            vision,
            text,
            fusion,
            opt,
            text_queue: self.queue("queue.text")?,
            image_queue: self.queue("queue.image")?,
        };
        Ok((cfg, model, state))
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_vec(&self.header).map_err(|e| TclError::Format(e.to_string()))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        let mut buf = Vec::new();
        for (_, t) in &self.blobs {
            buf.clear();
            buf.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(TclError::Format("not a checkpoint (bad magic)".into()));
        }
        let mut v = [0u8; 4];
        r.read_exact(&mut v)?;
        let version = u32::from_le_bytes(v);
        if version != CHECKPOINT_VERSION {
            return Err(TclError::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut l = [0u8; 8];
        r.read_exact(&mut l)?;
        let hlen = u64::from_le_bytes(l) as usize;
        let mut hbuf = vec![0u8; hlen];
        r.read_exact(&mut hbuf)?;
        let header: CheckpointHeader = serde_json::from_slice(&hbuf).map_err(|e| TclError::Format(format!("bad checkpoint header: {e}")))?;
        let mut blobs = Vec::with_capacity(header.blobs.len());
        let mut offset = 0u64;
        for meta in &header.blobs {
            if meta.dtype != "f64" {
                return Err(TclError::Format(format!("blob {} has unsupported dtype {}", meta.name, meta.dtype)));
            }
            if meta.offset != offset {
                return Err(TclError::Format(format!("blob {} is not contiguous", meta.name)));
            }
            let n = meta.rows * meta.cols;
            let mut raw = vec![0u8; 8 * n];
            r.read_exact(&mut raw)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
            blobs.push((meta.name.clone(), Tensor::from_vec(meta.rows, meta.cols, data)));
            offset += 8 * n as u64;
        }
        Ok(Checkpoint { header, blobs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(f))
    }
}
