//! Learning-rate schedule: linear warmup, then cosine decay.

/// Schedule constants, in steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr_init: f64,
    pub lr_peak: f64,
    pub lr_floor: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    /// Linear from `lr_init` to `lr_peak` over the warmup, then a half cosine
    /// from `lr_peak` that reaches `lr_floor` at step `total_steps - 1`.
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            let t = step as f64 / self.warmup_steps as f64;
            return self.lr_init + (self.lr_peak - self.lr_init) * t;
        }
        let last = self.total_steps.saturating_sub(1);
        if last <= self.warmup_steps {
            return self.lr_peak;
        }
        let t = ((step - self.warmup_steps) as f64 / (last - self.warmup_steps) as f64).min(1.0);
        self.lr_floor + (self.lr_peak - self.lr_floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

pub fn lr_schedule(step: usize, cfg: &super::TrainConfig) -> f64 {
    cfg.schedule().at(step)
}
