//! EMA shadow parameters and fixed-capacity negative queues.

use serde::{Deserialize, Serialize};

use crate::encoders::{ParamRole, ParamSet};
use crate::error::{config_err, contract_err, Result};
use crate::seed;
use crate::tensor::Tensor;

/// An online parameter set and its exponential-moving-average shadow.
///
/// The shadow never enters an optimizer; it changes only through
/// [`MomentumPair::ema_update`].
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumPair {
    pub online: ParamSet,
    pub shadow: ParamSet,
    m: f64,
}

pub fn check_momentum(m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) || m.is_nan() {
        return config_err(format!("momentum coefficient {m} outside [0, 1]"));
    }
    Ok(())
}

impl MomentumPair {
    /// Starts the shadow as an exact copy of `online`.
    pub fn new(online: ParamSet, m: f64) -> Result<Self> {
        check_momentum(m)?;
        if online.role() != ParamRole::Online {
            return contract_err("momentum pair needs an online parameter set");
        }
        let shadow = online.with_role(ParamRole::Shadow);
        Ok(MomentumPair { online, shadow, m })
    }

    pub fn from_parts(online: ParamSet, shadow: ParamSet, m: f64) -> Result<Self> {
        check_momentum(m)?;
        online.check_layout(&shadow)?;
        Ok(MomentumPair { online, shadow: shadow.with_role(ParamRole::Shadow), m })
    }

    pub fn m(&self) -> f64 {
        self.m
    }

    pub fn set_m(&mut self, m: f64) -> Result<()> {
        check_momentum(m)?;
        self.m = m;
        Ok(())
    }

    /// `shadow <- m * shadow + (1 - m) * online`, elementwise over every tensor.
    pub fn ema_update(&mut self) -> Result<()> {
        ema_update(&self.online, &mut self.shadow, self.m)
    }
}

pub fn ema_update(online: &ParamSet, shadow: &mut ParamSet, m: f64) -> Result<()> {
    check_momentum(m)?;
    online.check_layout(shadow)?;
    let keep = 1.0 - m;
    for (s, o) in shadow.values_mut().iter_mut().zip(online.values()) {
        for (sv, ov) in s.data_mut().iter_mut().zip(o.data()) {
            *sv = m * *sv + keep * ov;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueueKind {
    /// Momentum text projections.
    Text,
    /// Momentum image projections.
    Image,
}

/// Tolerance on stored vectors' unit norm.
pub const UNIT_NORM_TOL: f64 = 1e-4;

/// Ring buffer of the most recent `capacity` unit vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeQueue {
    buffer: Tensor,
    head: usize,
    filled: usize,
    pushed: u64,
    kind: QueueKind,
}

impl NegativeQueue {
    pub fn new(kind: QueueKind, capacity: usize, dim: usize) -> Result<Self> {
        if dim == 0 {
            return config_err("queue vector dimension must be positive");
        }
        Ok(NegativeQueue { buffer: Tensor::zeros(capacity, dim), head: 0, filled: 0, pushed: 0, kind })
    }

    /// A full queue of seeded random unit vectors.
    pub fn warm_started(kind: QueueKind, capacity: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut q = Self::new(kind, capacity, dim)?;
        let mut rng = seed::rng(seed);
        q.buffer = Tensor::randn(capacity, dim, 1.0, &mut rng).l2_normalize_rows(0.0);
        q.filled = capacity;
        Ok(q)
    }

    /// Rebuilds a queue from checkpointed state.
    pub fn from_parts(kind: QueueKind, buffer: Tensor, head: usize, filled: usize, pushed: u64) -> Result<Self> {
        if head >= buffer.rows().max(1) || filled > buffer.rows() {
            return contract_err("queue head/filled out of range");
        }
        Ok(NegativeQueue { buffer, head, filled, pushed, kind })
    }

    pub fn kind(&self) -> QueueKind {
        self.kind
    }

    pub fn capacity(&self) -> usize {
        self.buffer.rows()
    }

    pub fn dim(&self) -> usize {
        self.buffer.cols()
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn head(&self) -> usize {
        self.head
    }

    /// Vectors pushed since construction (warm-start fill excluded).
    pub fn pushed(&self) -> u64 {
        self.pushed
    }

    pub fn raw_buffer(&self) -> &Tensor {
        &self.buffer
    }

    /// Appends rows of `batch`, evicting the oldest entries once full.
    pub fn enqueue(&mut self, batch: &Tensor) -> Result<()> {
        let k = self.capacity();
        if batch.rows() > k {
            return contract_err(format!("batch of {} exceeds queue capacity {k}", batch.rows()));
        }
        if batch.cols() != self.dim() {
            return contract_err(format!("queue dimension {} != vector dimension {}", self.dim(), batch.cols()));
        }
        for r in 0..batch.rows() {
            let n = batch.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return contract_err(format!("enqueued vector {r} has norm {n}"));
            }
        }
        if k == 0 {
            return Ok(());
        }
        for r in 0..batch.rows() {
            self.buffer.row_mut(self.head).copy_from_slice(batch.row(r));
            self.head = (self.head + 1) % k;
            self.filled = (self.filled + 1).min(k);
        }
        self.pushed += batch.rows() as u64;
        Ok(())
    }

    /// Current contents, oldest first.
    pub fn negatives(&self) -> Tensor {
        let k = self.capacity();
        let idx: Vec<usize> = if self.filled < k {
            (0..self.filled).collect()
        } else {
            (self.head..k).chain(0..self.head).collect()
        };
        self.buffer.gather_rows(&idx)
    }
}
