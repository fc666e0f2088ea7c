//! Adam with decoupled weight decay.

use crate::encoders::{ParamRole, ParamSet};
use crate::error::{contract_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.02 }
    }
}

/// First and second moments for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: ParamSet,
    pub v: ParamSet,
}

impl Moments {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Moments { m: params.zeros_like(), v: params.zeros_like() }
    }
}

/// One AdamW update of `params` in place. `t` is the 1-based step count used
/// for bias correction. Shadow (EMA) sets are refused.
pub fn adamw_step(params: &mut ParamSet, grads: &[Tensor], moments: &mut Moments, lr: f64, t: u64, cfg: &AdamWConfig) -> Result<()> {
    if params.role() == ParamRole::Shadow {
        return contract_err("optimizer update attempted on a momentum shadow");
    }
    if grads.len() != params.len() {
        return contract_err("one gradient per parameter tensor");
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (i, g) in grads.iter().enumerate() {
        let p = params.get_mut(i);
        if p.shape() != g.shape() {
            return contract_err(format!("gradient shape mismatch at parameter {i}"));
        }
        let m = moments.m.get_mut(i).data_mut();
        let v = moments.v.get_mut(i).data_mut();
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w = *w * decay - lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
