//! Training loop, schedule, optimizer and checkpoints.

pub mod ablation;
mod checkpoint;
mod config;
mod optim;
mod schedule;
mod step;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use checkpoint::{BlobMeta, Checkpoint, CheckpointHeader, QueueMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{LocalLayer, TrainConfig, CONFIG_KEYS};
pub use optim::{adamw_step, AdamWConfig, Moments};
pub use schedule::{lr_schedule, LrSchedule};
pub use step::{
    collect_grads, forward_losses, momentum_targets, train_step, ForwardPass, LossSettings, MomentumTargets, OnlineParams, OptState,
    StepBatch, StepOutcome, TrainState,
};

use crate::encoders::Model;
use crate::error::{Result, TclError};
use crate::evaluation::{retrieval_eval_model, RetrievalResult};
use crate::seed::{self, tag};
use crate::synthdata::{generate_dataset, SyntheticPair};

impl TrainConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            lr_init: self.lr_init,
            lr_peak: self.lr_peak,
            lr_floor: self.lr_floor,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps(),
        }
    }
}

/// One line of the metrics stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub cma: f64,
    pub imc: f64,
    pub lmi: f64,
    pub itm: f64,
    pub mlm: f64,
    pub total: f64,
    pub lr: f64,
    pub tau: f64,
}

/// Generates the train and held-out splits from one deduplicated dataset.
pub fn make_splits(cfg: &TrainConfig) -> Result<(Vec<SyntheticPair>, Vec<SyntheticPair>)> {
    let mut all = generate_dataset(cfg.train_size + cfg.eval_size, cfg.seed, &cfg.data)?;
    let held_out = all.split_off(cfg.train_size);
    Ok((all, held_out))
}

/// Sample order for `epoch`.
pub fn epoch_order(cfg: &TrainConfig, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cfg.train_size).collect();
    order.shuffle(&mut seed::rng(seed::derive2(cfg.seed, tag::SHUFFLE, epoch as u64)));
    order
}

/// Options for [`Trainer::run`].
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Directory for `metrics.jsonl`, checkpoints and `results.json`.
    pub out_dir: Option<&'a Path>,
    /// Stop after this many steps in total (the schedule still spans the full run).
    pub stop_at: Option<u64>,
    /// Checked between steps; when set the run checkpoints and returns.
    pub interrupt: Option<&'a AtomicBool>,
    /// Evaluate retrieval on the held-out split at the end.
    pub evaluate: bool,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub records: Vec<StepRecord>,
    pub final_checkpoint: Option<PathBuf>,
    pub retrieval: Option<RetrievalResult>,
    pub interrupted: bool,
}

/// Owns the model layout, data splits and mutable state of one run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub train: Vec<SyntheticPair>,
    pub held_out: Vec<SyntheticPair>,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (train, held_out) = make_splits(&cfg)?;
        let (model, params) = Model::new(cfg.model.clone(), cfg.seed)?;
        let state = TrainState::new(&cfg, params)?;
        Ok(Trainer { cfg, model, train, held_out, state })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let (cfg, model, state) = ckpt.restore()?;
        cfg.validate()?;
        let (train, held_out) = make_splits(&cfg)?;
        Ok(Trainer { cfg, model, train, held_out, state })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_state(&self.cfg, &self.state)
    }

    pub fn is_done(&self) -> bool {
        self.state.step as usize >= self.cfg.total_steps()
    }

    /// Batch for the current step.
    pub fn next_batch(&self) -> Result<StepBatch> {
        let spe = self.cfg.steps_per_epoch();
        let step = self.state.step as usize;
        let (epoch, pos) = (step / spe, step % spe);
        let order = epoch_order(&self.cfg, epoch);
        let b = self.cfg.batch_size;
        let idx = &order[pos * b..((pos + 1) * b).min(order.len())];
        StepBatch::assemble(&self.cfg, &self.train, idx, epoch, self.state.step)
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let batch = self.next_batch()?;
        let step = self.state.step;
        let out = train_step(&self.model, &mut self.state, &self.cfg, &batch)?;
        let r = out.report;
        Ok(StepRecord { step, cma: r.cma, imc: r.imc, lmi: r.lmi, itm: r.itm, mlm: r.mlm, total: r.total, lr: out.lr, tau: self.cfg.tau })
    }

    pub fn evaluate(&self) -> Result<RetrievalResult> {
        retrieval_eval_model(&self.model, &self.state.online_params(), &self.held_out)
    }

    fn save_checkpoint(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("checkpoint-{:06}.tclk", self.state.step));
        self.checkpoint().save(&path)?;
        std::fs::copy(&path, dir.join("checkpoint.tclk"))?;
        Ok(path)
    }

    /// Trains until the schedule ends, `stop_at` is reached or the interrupt
    /// flag is raised. Metrics are appended to `metrics.jsonl` in `out_dir`.
    pub fn run(&mut self, opts: &RunOptions<'_>) -> Result<RunOutcome> {
        let mut metrics = match opts.out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("config.cfg"), self.cfg.to_kv_string())?;
                let f = OpenOptions::new().create(true).append(true).open(dir.join("metrics.jsonl"))?;
                Some(BufWriter::new(f))
            }
            None => None,
        };
        let mut records = Vec::new();
        let mut last_good: Option<PathBuf> = None;
        let mut interrupted = false;
        let total = self.cfg.total_steps() as u64;
        let end = opts.stop_at.map_or(total, |s| s.min(total));
        while self.state.step < end {
            if opts.interrupt.is_some_and(|f| f.load(Ordering::SeqCst)) {
                interrupted = true;
                break;
            }
            let rec = match self.step() {
                Ok(r) => r,
                Err(TclError::Numerical(msg)) => {
                    let pointer = last_good.as_ref().map_or("none".to_string(), |p| p.display().to_string());
                    return Err(TclError::Numerical(format!("{msg} at step {}; last good checkpoint: {pointer}", self.state.step)));
                }
                Err(e) => return Err(e),
            };
            if let Some(w) = metrics.as_mut() {
                serde_json::to_writer(&mut *w, &rec).map_err(|e| TclError::Format(e.to_string()))?;
                w.write_all(b"\n")?;
            }
            records.push(rec);
            log::debug!("step {} total {:.4} lr {:.2e}", rec.step, rec.total, rec.lr);
            if let (Some(dir), true) = (opts.out_dir, self.cfg.checkpoint_every > 0) {
                if self.state.step % self.cfg.checkpoint_every as u64 == 0 && self.state.step < end {
                    if let Some(w) = metrics.as_mut() {
                        w.flush()?;
                    }
                    last_good = Some(self.save_checkpoint(dir)?);
                }
            }
        }
        if let Some(w) = metrics.as_mut() {
            w.flush()?;
        }
        let final_checkpoint = match opts.out_dir {
            Some(dir) => Some(self.save_checkpoint(dir)?),
            None => None,
        };
        let retrieval = if opts.evaluate && !interrupted { Some(self.evaluate()?) } else { None };
        if let (Some(dir), Some(r)) = (opts.out_dir, &retrieval) {
            let doc = crate::evaluation::results_document("train", &self.cfg, r);
            let f = File::create(dir.join("results.json"))?;
            serde_json::to_writer_pretty(f, &doc).map_err(|e| TclError::Format(e.to_string()))?;
        }
        Ok(RunOutcome { records, final_checkpoint, retrieval, interrupted })
    }
}

/// Reads a metrics stream written by [`Trainer::run`].
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| TclError::Format(format!("bad metrics line: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests;
