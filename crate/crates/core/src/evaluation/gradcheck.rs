//! Central-difference gradient check of every loss term against the tape.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::encoders::ParamSet;
use crate::error::{config_err, Result};
use crate::objectives::LossTerms;
use crate::seed;
use crate::tensor::Tensor;
use crate::training::{collect_grads, forward_losses, momentum_targets, LossSettings, OnlineParams, TrainConfig, Trainer};

pub const TERMS: [&str; 6] = ["cma", "imc", "lmi", "itm", "mlm", "total"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub batch: usize,
    pub queue: usize,
    /// Finite-difference step.
    pub h: f64,
    /// Coordinates sampled per parameter tensor; `None` checks all of them.
    pub coords_per_tensor: Option<usize>,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { seed: 0, batch: 4, queue: 8, h: 1e-5, coords_per_tensor: None, tolerance: 1e-3 }
    }
}

impl GradcheckConfig {
    /// Micro model with all five terms enabled.
    pub fn train_config(&self) -> TrainConfig {
        let mut cfg = TrainConfig::micro();
        cfg.seed = self.seed;
        cfg.batch_size = self.batch;
        cfg.queue_size = self.queue;
        cfg.train_size = self.batch;
        cfg.eval_size = 0;
        cfg.epochs = 1;
        cfg
    }
}

/// Worst coordinate for one term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermCheck {
    pub term: String,
    pub max_rel_error: f64,
    /// e.g. `vision.block0.attn.q.weight[3]`.
    pub worst_param: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub terms: Vec<TermCheck>,
    /// Max abs difference between the total's gradient and the sum of the
    /// per-term gradients.
    pub sum_mismatch: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.terms.iter().all(|t| t.max_rel_error < self.tolerance) && self.sum_mismatch < 1e-9
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn term_values(t: &LossTerms, total: f64) -> [f64; 6] {
    [t.cma, t.imc, t.lmi, t.itm, t.mlm, total]
}

/// Checks the gradient of each term and the total with respect to every
/// online parameter. Momentum targets, queues and ITM negatives are held
/// fixed at their base-point values.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if !(cfg.h > 0.0) || cfg.batch < 2 {
        return config_err("gradcheck needs h > 0 and batch >= 2");
    }
    let tcfg = cfg.train_config();
    let trainer = Trainer::new(tcfg.clone())?;
    let batch = trainer.next_batch()?;
    let settings = LossSettings::from_config(&tcfg);
    let st = &trainer.state;
    let targets = momentum_targets(&trainer.model, &st.vision.shadow, &st.text.shadow, &batch, &settings)?;
    let (tq, iq) = (&st.text_queue, &st.image_queue);

    let base = forward_losses(&trainer.model, st.online(), &batch, &targets, tq, iq, &settings, None)?;
    let negatives = base.itm_negatives.clone();
    let vars: Vec<Var> = base.vision.iter().chain(&base.text).chain(&base.fusion).copied().collect();
    let analytic: Vec<Vec<Tensor>> = TERMS
        .iter()
        .map(|name| collect_grads(&base, base.term(name).expect("all terms enabled"), &vars))
        .collect();
    let mut sum_mismatch = 0.0f64;
    for (p, total) in analytic[5].iter().enumerate() {
        for (i, &tv) in total.data().iter().enumerate() {
            let s: f64 = analytic[..5].iter().map(|g| g[p].data()[i]).sum();
            sum_mismatch = sum_mismatch.max((tv - s).abs());
        }
    }
    drop(base);

    let mut sets: [ParamSet; 3] = [st.vision.online.clone(), st.text.online.clone(), st.fusion.clone()];
    let mut worst: Vec<TermCheck> = TERMS
        .iter()
        .map(|t| TermCheck { term: t.to_string(), max_rel_error: 0.0, worst_param: String::new(), analytic: 0.0, numeric: 0.0, checked: 0 })
        .collect();
    let mut rng = seed::rng(seed::derive(cfg.seed, 0x6C));
    let mut flat = 0;
    for s in 0..3 {
        for p in 0..sets[s].len() {
            let n = sets[s].get(p).len();
            let coords: Vec<usize> = match cfg.coords_per_tensor {
                Some(c) if c < n => index::sample(&mut rng, n, c).into_vec(),
                _ => (0..n).collect(),
            };
            for &i in &coords {
                let orig = sets[s].get(p).data()[i];
                let eval = |v: f64, sets: &mut [ParamSet; 3]| -> Result<[f64; 6]> {
                    sets[s].get_mut(p).data_mut()[i] = v;
                    let online = OnlineParams { vision: &sets[0], text: &sets[1], fusion: &sets[2] };
                    let fp = forward_losses(&trainer.model, online, &batch, &targets, tq, iq, &settings, negatives.clone())?;
                    Ok(term_values(&fp.terms(), fp.graph.value(fp.total).item()))
                };
                let plus = eval(orig + cfg.h, &mut sets)?;
                let minus = eval(orig - cfg.h, &mut sets)?;
                sets[s].get_mut(p).data_mut()[i] = orig;
                for (k, w) in worst.iter_mut().enumerate() {
                    let num = (plus[k] - minus[k]) / (2.0 * cfg.h);
                    let a = analytic[k][flat + p].data()[i];
                    let rel = relative_error(a, num);
                    w.checked += 1;
                    if rel > w.max_rel_error || w.worst_param.is_empty() {
                        w.max_rel_error = rel;
                        w.worst_param = format!("{}[{i}]", sets[s].names()[p]);
                        w.analytic = a;
                        w.numeric = num;
                    }
                }
            }
        }
        flat += sets[s].len();
    }
    Ok(GradcheckReport { seed: cfg.seed, terms: worst, sum_mismatch, tolerance: cfg.tolerance })
}
