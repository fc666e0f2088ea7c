//! The InfoNCE primitive and the five training objectives.
//!
//! Each contrastive objective has a tape form (used by training and the
//! gradient checker) and a plain form over detached tensors. The plain forms
//! build a throwaway tape of constants, so both share one implementation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{cross_entropy_value, infonce_groups_value, Graph, NceGroup, Var};
use crate::error::{config_err, contract_err, Result, TclError};
use crate::momentum::{NegativeQueue, QueueKind};
use crate::seed;
use crate::tensor::Tensor;

/// Row-norm tolerance for vectors that must be unit length.
pub const UNIT_TOL: f64 = 1e-5;

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        config_err(format!("temperature must be positive (got {tau})"))
    }
}

fn check_unit_rows(t: &Tensor, what: &str) -> Result<()> {
    for r in 0..t.rows() {
        let n = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_TOL {
            return contract_err(format!("{what} row {r} has norm {n}, expected 1"));
        }
    }
    Ok(())
}

/// Anchors with one positive each and a shared negative set.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    pub anchors: Tensor,
    pub positives: Tensor,
    pub queue_negatives: Tensor,
    pub tau: f64,
}

impl ContrastiveBatch {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        if self.anchors.rows() == 0 {
            return contract_err("InfoNCE needs at least one anchor");
        }
        if self.anchors.shape() != self.positives.shape() {
            return contract_err("anchors and positives differ in shape");
        }
        if self.queue_negatives.rows() > 0 && self.queue_negatives.cols() != self.anchors.cols() {
            return contract_err("negatives differ in dimension from anchors");
        }
        check_unit_rows(&self.anchors, "anchor")?;
        check_unit_rows(&self.positives, "positive")?;
        check_unit_rows(&self.queue_negatives, "negative")
    }
}

/// Mean over anchors of `-log(e^{s+/tau} / (e^{s+/tau} + sum_k e^{s_k/tau}))`.
pub fn infonce(batch: &ContrastiveBatch) -> Result<f64> {
    infonce_with(batch, true)
}

/// [`infonce`] with a switch for dropping the positive from the denominator.
pub fn infonce_with(batch: &ContrastiveBatch, include_positive: bool) -> Result<f64> {
    batch.validate()?;
    if !include_positive && batch.queue_negatives.rows() == 0 {
        return contract_err("the negatives-only denominator is empty");
    }
    let mut g = Graph::new();
    let a = g.constant(batch.anchors.clone());
    let p = g.constant(batch.positives.clone());
    let l = infonce_graph(&mut g, a, p, &batch.queue_negatives, batch.tau, include_positive);
    Ok(g.value(l).item())
}

/// Tape form of [`infonce`]; `positives` and `negatives` are treated as given.
pub fn infonce_graph(g: &mut Graph, anchors: Var, positives: Var, negatives: &Tensor, tau: f64, include_positive: bool) -> Var {
    let b = g.value(anchors).rows();
    let k = negatives.rows();
    let cand = if k > 0 {
        let neg = g.constant(negatives.clone());
        g.concat_rows(&[positives, neg])
    } else {
        positives
    };
    let scores = g.matmul_t(anchors, cand);
    let negs: Vec<usize> = (b..b + k).collect();
    let groups: Vec<NceGroup> =
        (0..b).map(|i| NceGroup { row: i, positives: vec![i], negatives: negs.clone(), weight: 1.0 / b as f64 }).collect();
    g.infonce(scores, &groups, tau, include_positive)
}

/// Projected `[CLS]` vectors entering the global contrastive terms.
pub struct GlobalViews {
    /// `f_v(v_cls)` of the first image view (online).
    pub image: Var,
    /// `f_t(t_cls)` (online).
    pub text: Var,
    /// `f^_v(v^_cls)` of the second image view (momentum).
    pub image_m: Var,
    /// `f^_t(t^_cls)` of the dropout-perturbed text (momentum).
    pub text_m: Var,
}

fn check_queues(text_queue: &NegativeQueue, image_queue: &NegativeQueue) -> Result<()> {
    if text_queue.kind() != QueueKind::Text || image_queue.kind() != QueueKind::Image {
        return contract_err("image anchors need the text queue and text anchors the image queue");
    }
    Ok(())
}

/// Cross-modal alignment: `1/2 [nce(I1 -> T+, text queue) + nce(T -> I2, image queue)]`.
pub fn cma_graph(
    g: &mut Graph,
    v: &GlobalViews,
    text_queue: &NegativeQueue,
    image_queue: &NegativeQueue,
    tau: f64,
    include_positive: bool,
) -> Result<Var> {
    check_tau(tau)?;
    check_queues(text_queue, image_queue)?;
    let i2t = infonce_graph(g, v.image, v.text_m, &text_queue.negatives(), tau, include_positive);
    let t2i = infonce_graph(g, v.text, v.image_m, &image_queue.negatives(), tau, include_positive);
    let s = g.sum_scalars(&[i2t, t2i]);
    Ok(g.scale(s, 0.5))
}

/// Intra-modal contrast: `1/2 [nce(T -> T+, text queue) + nce(I1 -> I2, image queue)]`.
pub fn imc_graph(
    g: &mut Graph,
    v: &GlobalViews,
    text_queue: &NegativeQueue,
    image_queue: &NegativeQueue,
    tau: f64,
    include_positive: bool,
) -> Result<Var> {
    check_tau(tau)?;
    check_queues(text_queue, image_queue)?;
    let t2t = infonce_graph(g, v.text, v.text_m, &text_queue.negatives(), tau, include_positive);
    let i2i = infonce_graph(g, v.image, v.image_m, &image_queue.negatives(), tau, include_positive);
    let s = g.sum_scalars(&[t2t, i2i]);
    Ok(g.scale(s, 0.5))
}

/// Plain inputs for the global contrastive objectives (all unit rows).
pub struct GlobalTensors<'a> {
    pub image: &'a Tensor,
    pub text: &'a Tensor,
    pub image_m: &'a Tensor,
    pub text_m: &'a Tensor,
}

fn globals_on_tape(g: &mut Graph, t: &GlobalTensors<'_>) -> Result<GlobalViews> {
    let b = t.image.rows();
    if b == 0 {
        return contract_err("empty batch");
    }
    for (x, what) in [(t.image, "image"), (t.text, "text"), (t.image_m, "momentum image"), (t.text_m, "momentum text")] {
        if x.shape() != t.image.shape() {
            return contract_err(format!("{what} vectors differ in shape"));
        }
        check_unit_rows(x, what)?;
    }
    Ok(GlobalViews {
        image: g.constant(t.image.clone()),
        text: g.constant(t.text.clone()),
        image_m: g.constant(t.image_m.clone()),
        text_m: g.constant(t.text_m.clone()),
    })
}

pub fn cma_loss(t: &GlobalTensors<'_>, text_queue: &NegativeQueue, image_queue: &NegativeQueue, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let v = globals_on_tape(&mut g, t)?;
    let l = cma_graph(&mut g, &v, text_queue, image_queue, tau, true)?;
    Ok(g.value(l).item())
}

pub fn imc_loss(t: &GlobalTensors<'_>, text_queue: &NegativeQueue, image_queue: &NegativeQueue, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let v = globals_on_tape(&mut g, t)?;
    let l = imc_graph(&mut g, &v, text_queue, image_queue, tau, true)?;
    Ok(g.value(l).item())
}

fn perfect_square_root(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

/// Block-averages each sample's `M` locals, laid out row-major on a
/// `sqrt(M) x sqrt(M)` grid, down to `target` locals.
pub fn pool_patches(locals: &Tensor, batch: usize, target: usize) -> Result<Tensor> {
    if batch == 0 || locals.rows() % batch != 0 {
        return contract_err("locals do not split evenly across the batch");
    }
    let m = locals.rows() / batch;
    let side = perfect_square_root(m).ok_or_else(|| TclError::Config(format!("{m} patches do not form a square grid")))?;
    let tside = perfect_square_root(target)
        .filter(|&t| t > 0)
        .ok_or_else(|| TclError::Config(format!("pool target {target} is not a positive perfect square")))?;
    if side % tside != 0 {
        return config_err(format!("a {side}x{side} grid does not pool evenly to {tside}x{tside}"));
    }
    let blk = side / tside;
    let d = locals.cols();
    let mut out = Tensor::zeros(batch * target, d);
    let inv = 1.0 / (blk * blk) as f64;
    for b in 0..batch {
        for ty in 0..tside {
            for tx in 0..tside {
                let o = out.row_mut(b * target + ty * tside + tx);
                for dy in 0..blk {
                    for dx in 0..blk {
                        let src = locals.row(b * m + (ty * blk + dy) * side + tx * blk + dx);
                        for (a, s) in o.iter_mut().zip(src) {
                            *a += s * inv;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Projected locals for the local-MI objective. Rows are grouped by sample,
/// `per_sample` rows each; `valid` marks rows that take part.
pub struct LocalSet<'a> {
    pub vectors: &'a Tensor,
    pub per_sample: usize,
    pub valid: Option<&'a [bool]>,
}

impl LocalSet<'_> {
    fn is_valid(&self, r: usize) -> bool {
        self.valid.is_none_or(|v| v[r])
    }
}

/// Groups for one modality of the local-MI objective: anchor `i`'s positives
/// are its own valid locals, negatives are every valid local of the other
/// samples. Each sample's terms are averaged, then averaged over the batch.
fn lmi_groups(batch: usize, locals: &LocalSet<'_>, weight: f64) -> Vec<NceGroup> {
    let per = locals.per_sample;
    let owned: Vec<Vec<usize>> =
        (0..batch).map(|i| (i * per..(i + 1) * per).filter(|&r| locals.is_valid(r)).collect()).collect();
    (0..batch)
        .filter(|&i| !owned[i].is_empty())
        .map(|i| NceGroup {
            row: i,
            positives: owned[i].clone(),
            negatives: (0..batch).filter(|&j| j != i).flat_map(|j| owned[j].iter().copied()).collect(),
            weight: weight / (owned[i].len() as f64 * batch as f64),
        })
        .collect()
}

/// Local MI maximization: `1/2 [mean_i nce(I1, I2^i, in-batch patches) +
/// mean_j nce(T, T+^j, in-batch tokens)]`, averaged over the batch.
pub fn lmi_graph(
    g: &mut Graph,
    image_anchor: Var,
    image_locals: &LocalSet<'_>,
    text_anchor: Var,
    text_locals: &LocalSet<'_>,
    tau: f64,
) -> Result<Var> {
    check_tau(tau)?;
    let b = g.value(image_anchor).rows();
    if b == 0 || g.value(text_anchor).rows() != b {
        return contract_err("local MI anchors must share a non-empty batch");
    }
    if image_locals.vectors.rows() != b * image_locals.per_sample || text_locals.vectors.rows() != b * text_locals.per_sample {
        return contract_err("local sets do not match the batch size");
    }
    if b == 1 {
        log::warn!("local MI with batch size 1 has no in-batch negatives; the term is identically zero");
    }
    let mut parts = Vec::with_capacity(2);
    for (anchor, locals) in [(image_anchor, image_locals), (text_anchor, text_locals)] {
        let groups = lmi_groups(b, locals, 0.5);
        let cand = g.constant(locals.vectors.clone());
        let scores = g.matmul_t(anchor, cand);
        parts.push(g.infonce(scores, &groups, tau, true));
    }
    Ok(g.sum_scalars(&parts))
}

pub fn lmi_loss(
    image_anchor: &Tensor,
    image_locals: &LocalSet<'_>,
    text_anchor: &Tensor,
    text_locals: &LocalSet<'_>,
    tau: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let ia = g.constant(image_anchor.clone());
    let ta = g.constant(text_anchor.clone());
    let l = lmi_graph(&mut g, ia, image_locals, ta, text_locals, tau)?;
    Ok(g.value(l).item())
}

/// How ITM negatives are drawn from the batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ItmSampling {
    /// Proportional to `exp(sim / tau)` over non-matching candidates.
    Hard,
    Uniform,
}

/// One sampled negative text per image and one negative image per text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItmNegatives {
    pub text_for_image: Vec<usize>,
    pub image_for_text: Vec<usize>,
}

fn draw_excluding<R: Rng>(rng: &mut R, weights: impl Iterator<Item = f64>, exclude: usize) -> usize {
    let w: Vec<f64> = weights.enumerate().map(|(j, w)| if j == exclude { 0.0 } else { w }).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = None;
    for (j, &wj) in w.iter().enumerate() {
        if wj <= 0.0 {
            continue;
        }
        last = Some(j);
        if u < wj {
            return j;
        }
        u -= wj;
    }
    last.expect("at least one non-matching candidate")
}

/// Samples ITM negatives from an image-to-text similarity matrix
/// (`sim[i][j]` between image `i` and text `j`). Returns `None` for a batch
/// of one, where no non-matching candidate exists.
pub fn sample_itm_negatives(sim: &Tensor, tau: f64, mode: ItmSampling, seed: u64) -> Result<Option<ItmNegatives>> {
    check_tau(tau)?;
    let b = sim.rows();
    if sim.cols() != b {
        return contract_err("similarity matrix must be square");
    }
    if b < 2 {
        log::warn!("ITM with batch size 1 has no negative candidates; skipping negative pairs");
        return Ok(None);
    }
    let mut rng = seed::rng(seed);
    let weight = |s: f64, row_max: f64| match mode {
        ItmSampling::Hard => ((s - row_max) / tau).exp(),
        ItmSampling::Uniform => 1.0,
    };
    let mut text_for_image = Vec::with_capacity(b);
    for i in 0..b {
        let mx = (0..b).filter(|&j| j != i).map(|j| sim.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
        text_for_image.push(draw_excluding(&mut rng, (0..b).map(|j| weight(sim.get(i, j), mx)), i));
    }
    let mut image_for_text = Vec::with_capacity(b);
    for j in 0..b {
        let mx = (0..b).filter(|&i| i != j).map(|i| sim.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
        image_for_text.push(draw_excluding(&mut rng, (0..b).map(|i| weight(sim.get(i, j), mx)), j));
    }
    Ok(Some(ItmNegatives { text_for_image, image_for_text }))
}

pub const ITM_MATCH: usize = 1;
pub const ITM_MISMATCH: usize = 0;

/// Mean binary cross-entropy of matching logits `[pairs, 2]` against labels.
pub fn itm_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.cols() != 2 || logits.rows() != labels.len() || labels.iter().any(|&l| l > 1) {
        return contract_err("ITM expects [pairs, 2] logits and 0/1 labels");
    }
    Ok(cross_entropy_value(logits, labels).0)
}

/// Mean cross-entropy over masked positions; zero when nothing is masked.
pub fn mlm_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    check_mlm_labels(logits.cols(), logits.rows(), labels)?;
    Ok(cross_entropy_value(logits, labels).0)
}

pub(crate) fn check_mlm_labels(vocab: usize, rows: usize, labels: &[usize]) -> Result<()> {
    if rows != labels.len() {
        return contract_err("one MLM label per masked position");
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= vocab) {
        return contract_err(format!("MLM label {bad} >= vocabulary size {vocab}"));
    }
    Ok(())
}

/// Which terms enter the total objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossGates {
    pub cma: bool,
    pub imc: bool,
    pub lmi: bool,
    pub itm: bool,
    pub mlm: bool,
}

impl LossGates {
    pub const ALL: LossGates = LossGates { cma: true, imc: true, lmi: true, itm: true, mlm: true };
    pub const NONE: LossGates = LossGates { cma: false, imc: false, lmi: false, itm: false, mlm: false };
    /// Alignment, matching and masked LM only.
    pub const BASELINE: LossGates = LossGates { cma: true, imc: false, lmi: false, itm: true, mlm: true };
}

/// The five objective values and their unweighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cma: f64,
    pub imc: f64,
    pub lmi: f64,
    pub itm: f64,
    pub mlm: f64,
    pub total: f64,
}

/// Raw per-term values before gating.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub cma: f64,
    pub imc: f64,
    pub lmi: f64,
    pub itm: f64,
    pub mlm: f64,
}

/// Zeroes disabled terms and sums the rest. A NaN or negative enabled term is an error.
pub fn total_loss(terms: LossTerms, gates: LossGates) -> Result<LossReport> {
    let pick = |on: bool, v: f64, name: &str| -> Result<f64> {
        if !on {
            return Ok(0.0);
        }
        if !v.is_finite() {
            return Err(TclError::Numerical(format!("{name} loss is {v}")));
        }
        if v < -1e-12 {
            return Err(TclError::Numerical(format!("{name} loss is negative ({v})")));
        }
        Ok(v)
    };
    let cma = pick(gates.cma, terms.cma, "cma")?;
    let imc = pick(gates.imc, terms.imc, "imc")?;
    let lmi = pick(gates.lmi, terms.lmi, "lmi")?;
    let itm = pick(gates.itm, terms.itm, "itm")?;
    let mlm = pick(gates.mlm, terms.mlm, "mlm")?;
    Ok(LossReport { cma, imc, lmi, itm, mlm, total: cma + imc + lmi + itm + mlm })
}

/// Naive per-element InfoNCE, used as a reference in tests.
#[doc(hidden)]
pub fn infonce_reference(anchors: &Tensor, positives: &Tensor, negatives: &Tensor, tau: f64) -> f64 {
    let b = anchors.rows();
    let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    for i in 0..b {
        let pos = (dot(anchors.row(i), positives.row(i)) / tau).exp();
        let mut denom = pos;
        for k in 0..negatives.rows() {
            denom += (dot(anchors.row(i), negatives.row(k)) / tau).exp();
        }
        total += -(pos / denom).ln();
    }
    total / b as f64
}

#[doc(hidden)]
pub fn infonce_groups(scores: &Tensor, groups: &[NceGroup], tau: f64) -> f64 {
    infonce_groups_value(scores, groups, tau, true).0
}

#[cfg(test)]
mod tests;
