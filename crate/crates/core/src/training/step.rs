//! One optimization step: momentum targets, online forward, the five
//! objectives, AdamW, EMA and queue updates.

use std::rc::Rc;

use crate::autograd::{Graph, Var};
use crate::encoders::{EncodedBatch, HeadRole, Model, ModelConfig, ModelParams, ParamSet};
use crate::error::{contract_err, Result};
use crate::momentum::{MomentumPair, NegativeQueue, QueueKind};
use crate::objectives::{
    self, cma_graph, imc_graph, lmi_graph, sample_itm_negatives, total_loss, GlobalViews, ItmNegatives, ItmSampling, LocalSet,
    LossGates, LossReport, LossTerms, ITM_MATCH, ITM_MISMATCH,
};
use crate::seed::{self, tag};
use crate::synthdata::{augment_with, mlm_mask, Image, MaskedText, SyntheticPair, TokenId};
use crate::tensor::Tensor;

use super::config::{LocalLayer, TrainConfig};
use super::optim::{adamw_step, AdamWConfig, Moments};

/// Loss-side settings shared by training and the gradient checker.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub tau: f64,
    pub gates: LossGates,
    pub infonce_positive: bool,
    pub itm_sampling: ItmSampling,
    pub lmi_pool: usize,
    pub lmi_layer: LocalLayer,
}

impl LossSettings {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        LossSettings {
            tau: cfg.tau,
            gates: cfg.gates,
            infonce_positive: cfg.infonce_positive,
            itm_sampling: cfg.itm_sampling,
            lmi_pool: cfg.lmi_pool,
            lmi_layer: cfg.lmi_layer,
        }
    }
}

/// Everything random about one step, fixed up front.
#[derive(Clone, Debug)]
pub struct StepBatch {
    /// Online view I1 per sample.
    pub view_a: Vec<Image>,
    /// Momentum view I2 per sample.
    pub view_b: Vec<Image>,
    pub captions: Vec<Vec<TokenId>>,
    pub masked: Vec<MaskedText>,
    pub online_dropout: Option<u64>,
    pub momentum_dropout: Option<u64>,
    pub itm_seed: u64,
}

impl StepBatch {
    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    /// Views, captions and masks for `indices` of `data`. Per-sample seeds
    /// depend on (seed, epoch, index); per-step seeds on (seed, step).
    pub fn assemble(cfg: &TrainConfig, data: &[SyntheticPair], indices: &[usize], epoch: usize, step: u64) -> Result<Self> {
        let aug = cfg.augment_config();
        let aug_root = seed::derive(cfg.seed, tag::AUGMENT);
        let mlm_root = seed::derive(cfg.seed, tag::MLM);
        let mut view_a = Vec::with_capacity(indices.len());
        let mut view_b = Vec::with_capacity(indices.len());
        let mut captions = Vec::with_capacity(indices.len());
        let mut masked = Vec::with_capacity(indices.len());
        for &i in indices {
            let pair = data.get(i).ok_or_else(|| crate::TclError::Contract(format!("sample index {i} out of range")))?;
            let views = augment_with(&pair.image, seed::derive2(aug_root, epoch as u64, i as u64), &aug);
            view_a.push(views.view_a);
            view_b.push(views.view_b);
            captions.push(pair.caption.clone());
            masked.push(mlm_mask(&pair.caption, seed::derive2(mlm_root, epoch as u64, i as u64), cfg.mlm_rate, cfg.mask_split())?);
        }
        Ok(StepBatch {
            view_a,
            view_b,
            captions,
            masked,
            online_dropout: Some(seed::derive2(cfg.seed, tag::ONLINE_DROPOUT, step)),
            momentum_dropout: Some(seed::derive2(cfg.seed, tag::MOMENTUM_DROPOUT, step)),
            itm_seed: seed::derive2(cfg.seed, tag::ITM, step),
        })
    }
}

/// Detached outputs of the momentum encoders for one batch.
#[derive(Clone, Debug)]
pub struct MomentumTargets {
    /// `f^_v(v^_cls)` of view I2, `[B, d_proj]`.
    pub image: Tensor,
    /// `f^_t(t^_cls)` of the dropout-perturbed text, `[B, d_proj]`.
    pub text: Tensor,
    /// Projected (pooled) patch locals, grouped by sample.
    pub image_locals: Option<(Tensor, usize)>,
    /// Projected token locals, grouped by sample, with validity flags.
    pub text_locals: Option<(Tensor, usize, Vec<bool>)>,
}

fn tap_for(settings: &LossSettings, layers: usize) -> Option<usize> {
    (settings.gates.lmi && settings.lmi_layer == LocalLayer::Intermediate).then(|| ModelConfig::intermediate_layer(layers))
}

fn local_states(g: &Graph, enc: &EncodedBatch, use_tap: bool) -> Tensor {
    let src = if use_tap { g.value(enc.tap.expect("tap requested")) } else { g.value(enc.states) };
    src.gather_rows(&enc.local_rows())
}

/// Runs the shadow encoders (no gradients) over I2 and T+.
pub fn momentum_targets(
    model: &Model,
    shadow_vision: &ParamSet,
    shadow_text: &ParamSet,
    batch: &StepBatch,
    settings: &LossSettings,
) -> Result<MomentumTargets> {
    let mut g = Graph::new();
    let pv = shadow_vision.bind(&mut g, false);
    let pt = shadow_text.bind(&mut g, false);
    let images: Vec<&Image> = batch.view_b.iter().collect();
    let texts: Vec<&[TokenId]> = batch.captions.iter().map(|c| c.as_slice()).collect();
    let vtap = tap_for(settings, model.cfg.vision_layers);
    let ttap = tap_for(settings, model.cfg.text_layers);
    let iv = model.encode_images(&mut g, &pv, &images, vtap)?;
    let tv = model.encode_texts(&mut g, &pt, &texts, batch.momentum_dropout, ttap)?;
    let vhead = model.vision_projection(shadow_vision, HeadRole::MomentumVision);
    let thead = model.text_projection(shadow_text, HeadRole::MomentumText);
    let image = vhead.apply(&g.value(iv.states).gather_rows(&iv.cls_rows()));
    let text = thead.apply(&g.value(tv.states).gather_rows(&tv.cls_rows()));
    let (image_locals, text_locals) = if settings.gates.lmi {
        let b = batch.len();
        let raw = local_states(&g, &iv, vtap.is_some());
        let (pooled, per) = if settings.lmi_pool > 0 {
            (objectives::pool_patches(&raw, b, settings.lmi_pool)?, settings.lmi_pool)
        } else {
            (raw, iv.seq - 1)
        };
        let il = vhead.apply(&pooled);
        let rows = tv.local_rows();
        let tl = thead.apply(&local_states(&g, &tv, ttap.is_some()));
        let valid: Vec<bool> = rows.iter().map(|&r| tv.valid[r]).collect();
        (Some((il, per)), Some((tl, tv.seq - 1, valid)))
    } else {
        (None, None)
    };
    Ok(MomentumTargets { image, text, image_locals, text_locals })
}

/// Online parameter sets entering the tape.
#[derive(Clone, Copy)]
pub struct OnlineParams<'a> {
    pub vision: &'a ParamSet,
    pub text: &'a ParamSet,
    pub fusion: &'a ParamSet,
}

/// Tape nodes of one loss evaluation. Disabled terms are `None`.
pub struct ForwardPass {
    pub graph: Graph,
    pub vision: Vec<Var>,
    pub text: Vec<Var>,
    pub fusion: Vec<Var>,
    pub cma: Option<Var>,
    pub imc: Option<Var>,
    pub lmi: Option<Var>,
    pub itm: Option<Var>,
    pub mlm: Option<Var>,
    pub total: Var,
    pub itm_negatives: Option<ItmNegatives>,
}

impl ForwardPass {
    fn value(&self, v: Option<Var>) -> f64 {
        v.map_or(0.0, |v| self.graph.value(v).item())
    }

    pub fn terms(&self) -> LossTerms {
        LossTerms {
            cma: self.value(self.cma),
            imc: self.value(self.imc),
            lmi: self.value(self.lmi),
            itm: self.value(self.itm),
            mlm: self.value(self.mlm),
        }
    }

    pub fn term(&self, name: &str) -> Option<Var> {
        match name {
            "cma" => self.cma,
            "imc" => self.imc,
            "lmi" => self.lmi,
            "itm" => self.itm,
            "mlm" => self.mlm,
            "total" => Some(self.total),
            _ => None,
        }
    }
}

/// Builds the online tape and every enabled loss term. When
/// `itm_negatives` is `None` they are sampled from the batch similarities.
#[allow(clippy::too_many_arguments)]
pub fn forward_losses(
    model: &Model,
    online: OnlineParams<'_>,
    batch: &StepBatch,
    targets: &MomentumTargets,
    text_queue: &NegativeQueue,
    image_queue: &NegativeQueue,
    settings: &LossSettings,
    itm_negatives: Option<ItmNegatives>,
) -> Result<ForwardPass> {
    let b = batch.len();
    if b == 0 {
        return contract_err("empty batch");
    }
    let gates = settings.gates;
    let mut g = Graph::new();
    let pv = online.vision.bind(&mut g, true);
    let pt = online.text.bind(&mut g, true);
    let pf = online.fusion.bind(&mut g, true);

    let images: Vec<&Image> = batch.view_a.iter().collect();
    let iv = model.encode_images(&mut g, &pv, &images, None)?;
    let mut texts: Vec<&[TokenId]> = batch.captions.iter().map(|c| c.as_slice()).collect();
    if gates.mlm {
        texts.extend(batch.masked.iter().map(|m| m.input_ids.as_slice()));
    }
    let tv = model.encode_texts(&mut g, &pt, &texts, batch.online_dropout, None)?;
    let seq = tv.seq;

    let icls = iv.cls(&mut g);
    let image = model.project(&mut g, model.vision_head(&pv), icls);
    let tcls = g.gather_rows(tv.states, Rc::new((0..b).map(|i| i * seq).collect()));
    let text = model.project(&mut g, model.text_head(&pt), tcls);

    let views = GlobalViews {
        image,
        text,
        image_m: g.constant(targets.image.clone()),
        text_m: g.constant(targets.text.clone()),
    };
    let tau = settings.tau;
    let cma = gates.cma.then(|| cma_graph(&mut g, &views, text_queue, image_queue, tau, settings.infonce_positive)).transpose()?;
    let imc = gates.imc.then(|| imc_graph(&mut g, &views, text_queue, image_queue, tau, settings.infonce_positive)).transpose()?;
    let lmi = if gates.lmi {
        let (il, iper) = targets.image_locals.as_ref().ok_or_else(|| crate::TclError::Contract("momentum locals missing".into()))?;
        let (tl, tper, tvalid) = targets.text_locals.as_ref().ok_or_else(|| crate::TclError::Contract("momentum locals missing".into()))?;
        let iset = LocalSet { vectors: il, per_sample: *iper, valid: None };
        let tset = LocalSet { vectors: tl, per_sample: *tper, valid: Some(tvalid) };
        Some(lmi_graph(&mut g, image, &iset, text, &tset, tau)?)
    } else {
        None
    };

    // fused pairs: positives, ITM negatives, then masked texts
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let mut negatives = None;
    if gates.itm {
        pairs.extend((0..b).map(|i| (i, i)));
        let negs = match itm_negatives {
            Some(n) => Some(n),
            None => {
                let sim = g.value(image).matmul_t(g.value(text));
                sample_itm_negatives(&sim, tau, settings.itm_sampling, batch.itm_seed)?
            }
        };
        if let Some(n) = &negs {
            if n.text_for_image.len() != b || n.image_for_text.len() != b {
                return contract_err("ITM negatives do not match the batch");
            }
            pairs.extend((0..b).map(|i| (i, n.text_for_image[i])));
            pairs.extend((0..b).map(|j| (n.image_for_text[j], j)));
        }
        negatives = negs;
    }
    let n_itm = pairs.len();
    let mut mlm_rows = Vec::new();
    let mut mlm_labels = Vec::new();
    if gates.mlm {
        for (i, m) in batch.masked.iter().enumerate() {
            let k = pairs.len();
            pairs.push((i, b + i));
            for &pos in &m.mask_positions {
                mlm_rows.push(k * seq + pos);
                mlm_labels.push(m.labels[pos].expect("label at masked position") as usize);
            }
        }
        objectives::check_mlm_labels(model.cfg.vocab_size, mlm_rows.len(), &mlm_labels)?;
    }

    let (mut itm, mut mlm) = (None, None);
    if !pairs.is_empty() {
        let fused = model.fuse(&mut g, &pf, &iv, &tv, &pairs, 1.0)?;
        if gates.itm {
            let cls = g.gather_rows(fused, Rc::new((0..n_itm).map(|k| k * seq).collect()));
            let logits = model.fusion.itm_head.forward(&mut g, &pf, cls);
            let labels: Vec<usize> = (0..n_itm).map(|k| if k < b { ITM_MATCH } else { ITM_MISMATCH }).collect();
            itm = Some(g.cross_entropy(logits, &labels));
        }
        if gates.mlm {
            mlm = Some(if mlm_rows.is_empty() {
                g.constant(Tensor::scalar(0.0))
            } else {
                let logits = model.mlm_logits(&mut g, &pf, fused, mlm_rows);
                g.cross_entropy(logits, &mlm_labels)
            });
        }
    }

    let parts: Vec<Var> = [cma, imc, lmi, itm, mlm].into_iter().flatten().collect();
    let total = if parts.is_empty() { g.constant(Tensor::scalar(0.0)) } else { g.sum_scalars(&parts) };
    Ok(ForwardPass { graph: g, vision: pv, text: pt, fusion: pf, cma, imc, lmi, itm, mlm, total, itm_negatives: negatives })
}

/// Gradients of `loss` for each parameter, zero where unreached.
pub fn collect_grads(fp: &ForwardPass, loss: Var, params: &[Var]) -> Vec<Tensor> {
    let mut grads = fp.graph.backward(loss);
    params
        .iter()
        .map(|&v| {
            grads.take(v).unwrap_or_else(|| {
                let t = fp.graph.value(v);
                Tensor::zeros(t.rows(), t.cols())
            })
        })
        .collect()
}

/// Optimizer moments for the three online sets plus the shared step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub vision: Moments,
    pub text: Moments,
    pub fusion: Moments,
    pub t: u64,
}

/// Complete mutable training state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub vision: MomentumPair,
    pub text: MomentumPair,
    pub fusion: ParamSet,
    pub opt: OptState,
    pub text_queue: NegativeQueue,
    pub image_queue: NegativeQueue,
}

impl TrainState {
    /// Fresh state: shadows copied from the online sets, queues warm-started.
    pub fn new(cfg: &TrainConfig, params: ModelParams) -> Result<Self> {
        let qseed = seed::derive(cfg.seed, tag::QUEUE_INIT);
        let d = cfg.model.d_proj;
        let opt = OptState {
            vision: Moments::zeros_like(&params.vision),
            text: Moments::zeros_like(&params.text),
            fusion: Moments::zeros_like(&params.fusion),
            t: 0,
        };
        Ok(TrainState {
            step: 0,
            vision: MomentumPair::new(params.vision, cfg.momentum)?,
            text: MomentumPair::new(params.text, cfg.momentum)?,
            fusion: params.fusion,
            opt,
            text_queue: NegativeQueue::warm_started(QueueKind::Text, cfg.queue_size, d, seed::derive(qseed, 1))?,
            image_queue: NegativeQueue::warm_started(QueueKind::Image, cfg.queue_size, d, seed::derive(qseed, 2))?,
        })
    }

    pub fn online(&self) -> OnlineParams<'_> {
        OnlineParams { vision: &self.vision.online, text: &self.text.online, fusion: &self.fusion }
    }

    pub fn online_params(&self) -> ModelParams {
        ModelParams { vision: self.vision.online.clone(), text: self.text.online.clone(), fusion: self.fusion.clone() }
    }
}

/// Result of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub report: LossReport,
    pub lr: f64,
}

/// Applies one step in order: momentum targets, online forward, total loss,
/// AdamW, EMA of both encoder pairs, then enqueue of the momentum `[CLS]`
/// projections.
pub fn train_step(model: &Model, state: &mut TrainState, cfg: &TrainConfig, batch: &StepBatch) -> Result<StepOutcome> {
    let settings = LossSettings::from_config(cfg);
    let targets = momentum_targets(model, &state.vision.shadow, &state.text.shadow, batch, &settings)?;
    let fp = forward_losses(model, state.online(), batch, &targets, &state.text_queue, &state.image_queue, &settings, None)?;
    let report = total_loss(fp.terms(), cfg.gates)?;

    let all: Vec<Var> = fp.vision.iter().chain(&fp.text).chain(&fp.fusion).copied().collect();
    let mut grads = collect_grads(&fp, fp.total, &all);
    let fusion_grads = grads.split_off(fp.vision.len() + fp.text.len());
    let text_grads = grads.split_off(fp.vision.len());
    let vision_grads = grads;
    drop(fp);

    let lr = cfg.schedule().at(state.step as usize);
    let opt_cfg = AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() };
    state.opt.t += 1;
    let t = state.opt.t;
    adamw_step(&mut state.vision.online, &vision_grads, &mut state.opt.vision, lr, t, &opt_cfg)?;
    adamw_step(&mut state.text.online, &text_grads, &mut state.opt.text, lr, t, &opt_cfg)?;
    adamw_step(&mut state.fusion, &fusion_grads, &mut state.opt.fusion, lr, t, &opt_cfg)?;

    state.vision.ema_update()?;
    state.text.ema_update()?;
    state.image_queue.enqueue(&targets.image)?;
    state.text_queue.enqueue(&targets.text)?;
    state.step += 1;
    Ok(StepOutcome { report, lr })
}
