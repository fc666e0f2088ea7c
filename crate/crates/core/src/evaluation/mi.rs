//! Exact mutual information of discrete joints and the InfoNCE lower-bound check.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, Result, TclError};
use crate::seed;

/// Tolerance on the total probability mass of a joint table.
pub const MASS_TOL: f64 = 1e-9;

/// A probability table `p(x, y)` over `nx * ny` outcomes, row-major in `x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJoint {
    nx: usize,
    ny: usize,
    table: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(nx: usize, ny: usize, table: Vec<f64>) -> Result<Self> {
        if nx == 0 || ny == 0 || table.len() != nx * ny {
            return contract_err("joint table shape does not match its supports");
        }
        if table.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return contract_err("joint probabilities must be finite and non-negative");
        }
        let mass: f64 = table.iter().sum();
        if (mass - 1.0).abs() > MASS_TOL {
            return contract_err(format!("joint probabilities sum to {mass}, not 1"));
        }
        Ok(DiscreteJoint { nx, ny, table })
    }

    /// Normalizes non-negative weights into a joint.
    pub fn from_weights(nx: usize, ny: usize, weights: Vec<f64>) -> Result<Self> {
        let mass: f64 = weights.iter().sum();
        if !(mass > 0.0) {
            return contract_err("weights must have positive mass");
        }
        Self::new(nx, ny, weights.into_iter().map(|w| w / mass).collect())
    }

    /// `p(x, y) = p(x) p(y)`.
    pub fn independent(px: &[f64], py: &[f64]) -> Result<Self> {
        let table = px.iter().flat_map(|a| py.iter().map(move |b| a * b)).collect();
        Self::new(px.len(), py.len(), table)
    }

    /// Uniform over the diagonal of an `n x n` table: `MI = ln n`.
    pub fn perfectly_correlated(n: usize) -> Result<Self> {
        let mut t = vec![0.0; n * n];
        for i in 0..n {
            t[i * n + i] = 1.0 / n as f64;
        }
        Self::new(n, n, t)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn p(&self, x: usize, y: usize) -> f64 {
        self.table[x * self.ny + y]
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn marginal_x(&self) -> Vec<f64> {
        (0..self.nx).map(|x| (0..self.ny).map(|y| self.p(x, y)).sum()).collect()
    }

    pub fn marginal_y(&self) -> Vec<f64> {
        (0..self.ny).map(|y| (0..self.nx).map(|x| self.p(x, y)).sum()).collect()
    }
}

/// `sum p(x,y) ln(p(x,y) / (p(x) p(y)))` in nats, with `0 ln 0 = 0`.
pub fn exact_mi(joint: &DiscreteJoint) -> f64 {
    let px = joint.marginal_x();
    let py = joint.marginal_y();
    let mut mi = 0.0;
    for x in 0..joint.nx {
        for y in 0..joint.ny {
            let p = joint.p(x, y);
            if p > 0.0 {
                mi += p * (p / (px[x] * py[y])).ln();
            }
        }
    }
    mi.max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    /// Negatives per anchor.
    pub k: usize,
    pub steps: usize,
    /// Anchors per training step.
    pub batch: usize,
    pub lr: f64,
    /// Fresh samples for the final loss estimate.
    pub eval_samples: usize,
    /// Loss variance over the last 100 steps above which the run is inconclusive.
    pub variance_threshold: f64,
    pub seed: u64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig { k: 63, steps: 1500, batch: 64, lr: 0.05, eval_samples: 20_000, variance_threshold: 0.05, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// `ln(K+1) - L_nce` on fresh samples.
    pub bound: f64,
    pub exact: f64,
    /// `exact - bound`.
    pub margin: f64,
    pub final_loss: f64,
    pub inconclusive: bool,
}

struct Sampler {
    joint: WeightedIndex<f64>,
    marginal_y: WeightedIndex<f64>,
    ny: usize,
}

impl Sampler {
    fn new(j: &DiscreteJoint) -> Result<Self> {
        let joint = WeightedIndex::new(j.table()).map_err(|e| TclError::Contract(e.to_string()))?;
        let marginal_y = WeightedIndex::new(j.marginal_y()).map_err(|e| TclError::Contract(e.to_string()))?;
        Ok(Sampler { joint, marginal_y, ny: j.ny() })
    }

    fn pair<R: Rng>(&self, rng: &mut R) -> (usize, usize) {
        let c = self.joint.sample(rng);
        (c / self.ny, c % self.ny)
    }
}

/// InfoNCE loss for one anchor with a tabular critic; adds the gradient into `grad` when given.
fn anchor_loss(critic: &[f64], ny: usize, x: usize, ys: &[usize], grad: Option<(&mut [f64], f64)>) -> f64 {
    let row = &critic[x * ny..(x + 1) * ny];
    let max = ys.iter().map(|&y| row[y]).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = ys.iter().map(|&y| (row[y] - max).exp()).sum();
    let lse = max + sum.ln();
    if let Some((g, w)) = grad {
        for &y in ys {
            g[x * ny + y] += w * (row[y] - lse).exp();
        }
        g[x * ny + ys[0]] -= w;
    }
    lse - row[ys[0]]
}

/// Trains a tabular critic `f(x, y)` with InfoNCE (one positive from the
/// joint, `k` negatives from `p(y)`) and reports `ln(k+1) - L_nce`.
pub fn nce_bound_check(joint: &DiscreteJoint, cfg: &CriticConfig) -> Result<BoundReport> {
    if cfg.batch == 0 || cfg.eval_samples == 0 || !(cfg.lr > 0.0) {
        return config_err("critic batch, eval_samples and lr must be positive");
    }
    let exact = exact_mi(joint);
    let ny = joint.ny();
    let sampler = Sampler::new(joint)?;
    let mut rng = seed::rng(cfg.seed);
    let mut critic = vec![0.0; joint.nx() * ny];
    let (mut m, mut v) = (vec![0.0; critic.len()], vec![0.0; critic.len()]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut ys = Vec::with_capacity(cfg.k + 1);
    let mut history = Vec::with_capacity(cfg.steps);
    for t in 1..=cfg.steps {
        let mut grad = vec![0.0; critic.len()];
        let mut loss = 0.0;
        let w = 1.0 / cfg.batch as f64;
        for _ in 0..cfg.batch {
            let (x, y) = sampler.pair(&mut rng);
            ys.clear();
            ys.push(y);
            ys.extend((0..cfg.k).map(|_| sampler.marginal_y.sample(&mut rng)));
            loss += w * anchor_loss(&critic, ny, x, &ys, Some((&mut grad, w)));
        }
        history.push(loss);
        let (c1, c2) = (1.0 - b1.powi(t as i32), 1.0 - b2.powi(t as i32));
        for i in 0..critic.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            critic[i] -= cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
    }
    let tail = &history[history.len().saturating_sub(100)..];
    let inconclusive = if tail.len() < 2 {
        cfg.steps > 0
    } else {
        let mean = tail.iter().sum::<f64>() / tail.len() as f64;
        tail.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (tail.len() - 1) as f64 > cfg.variance_threshold
    };

    let mut eval_rng = seed::rng(seed::derive(cfg.seed, 1));
    let mut total = 0.0;
    for _ in 0..cfg.eval_samples {
        let (x, y) = sampler.pair(&mut eval_rng);
        ys.clear();
        ys.push(y);
        ys.extend((0..cfg.k).map(|_| sampler.marginal_y.sample(&mut eval_rng)));
        total += anchor_loss(&critic, ny, x, &ys, None);
    }
    let final_loss = total / cfg.eval_samples as f64;
    let bound = ((cfg.k + 1) as f64).ln() - final_loss;
    Ok(BoundReport { bound, exact, margin: exact - bound, final_loss, inconclusive })
}

/// Ten seeded joints covering independence, full correlation, noisy
/// diagonals, random tables and non-square supports.
pub fn regression_suite() -> Vec<(String, DiscreteJoint)> {
    let mut out = Vec::new();
    let uni = vec![0.125; 8];
    out.push(("independent-uniform-8x8".to_string(), DiscreteJoint::independent(&uni, &uni).expect("valid")));
    let skew: Vec<f64> = (1..=8).map(|i| i as f64 / 36.0).collect();
    out.push(("independent-skewed-8x8".to_string(), DiscreteJoint::independent(&skew, &uni).expect("valid")));
    out.push(("correlated-8".to_string(), DiscreteJoint::perfectly_correlated(8).expect("valid")));
    out.push(("correlated-4".to_string(), DiscreteJoint::perfectly_correlated(4).expect("valid")));
    for (name, noise) in [("noisy-diagonal-0.3", 0.3), ("noisy-diagonal-0.7", 0.7)] {
        let w: Vec<f64> = (0..64).map(|c| if c / 8 == c % 8 { 1.0 - noise } else { noise / 7.0 }).collect();
        out.push((name.to_string(), DiscreteJoint::from_weights(8, 8, w).expect("valid")));
    }
    for s in 0..3u64 {
        let mut rng = seed::rng(seed::derive(0x7E57, s));
        let w: Vec<f64> = (0..64).map(|_| rng.random::<f64>().powi(3)).collect();
        out.push((format!("random-8x8-{s}"), DiscreteJoint::from_weights(8, 8, w).expect("valid")));
    }
    let w: Vec<f64> = (0..4 * 8).map(|c| if c % 8 / 2 == c / 8 { 1.0 } else { 0.05 }).collect();
    out.push(("blocky-4x8".to_string(), DiscreteJoint::from_weights(4, 8, w).expect("valid")));
    out
}

/// Allowed excess of the estimated bound over the exact MI, in nats.
pub const BOUND_SLACK: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub name: String,
    pub report: BoundReport,
    /// `bound <= exact + BOUND_SLACK`.
    pub within_slack: bool,
}

/// Runs [`nce_bound_check`] on every joint of [`regression_suite`].
pub fn run_regression_suite(cfg: &CriticConfig) -> Result<Vec<SuiteRow>> {
    regression_suite()
        .into_iter()
        .enumerate()
        .map(|(i, (name, j))| {
            let report = nce_bound_check(&j, &CriticConfig { seed: seed::derive(cfg.seed, i as u64), ..*cfg })?;
            Ok(SuiteRow { name, within_slack: report.bound <= report.exact + BOUND_SLACK, report })
        })
        .collect()
}
