//! Toy vision, text and fusion transformers.
//!
//! Encoders are layouts of parameter indices; forward passes put a
//! [`ParamSet`] on a [`Graph`] and run batched. The same layout drives the
//! online parameters and their EMA shadow.

mod blocks;
mod params;

use std::rc::Rc;

use serde::{Deserialize, Serialize};

pub use blocks::{CrossKv, Dropout};
pub use params::{ParamRole, ParamSet};

use crate::autograd::{Graph, Var};
use crate::error::{config_err, contract_err, Result};
use crate::seed;
use crate::synthdata::{Image, TokenId, MAX_LEN, PAD, VOCAB_SIZE};
use crate::tensor::Tensor;
use blocks::{Block, FusionBlock, Linear, Norm};
use params::ParamBuilder;

/// Added to a vector's norm before normalizing.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub vision_layers: usize,
    pub text_layers: usize,
    pub fusion_layers: usize,
    pub mlp_ratio: usize,
    pub d_proj: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub text_dropout: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            patch: 8,
            d_model: 64,
            heads: 4,
            vision_layers: 2,
            text_layers: 2,
            fusion_layers: 2,
            mlp_ratio: 4,
            d_proj: 32,
            vocab_size: VOCAB_SIZE,
            max_len: MAX_LEN,
            text_dropout: 0.1,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration used for gradient checks.
    pub fn micro() -> Self {
        ModelConfig {
            image_size: 8,
            patch: 4,
            d_model: 8,
            heads: 2,
            vision_layers: 1,
            text_layers: 1,
            fusion_layers: 1,
            mlp_ratio: 2,
            d_proj: 4,
            vocab_size: VOCAB_SIZE,
            max_len: MAX_LEN,
            text_dropout: 0.1,
            init_std: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return config_err(format!("image_size {} is not divisible by patch {}", self.image_size, self.patch));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return config_err(format!("d_model {} is not divisible by heads {}", self.d_model, self.heads));
        }
        if self.vision_layers == 0 || self.text_layers == 0 || self.fusion_layers == 0 {
            return config_err("every encoder needs at least one layer");
        }
        if !(0.0..1.0).contains(&self.text_dropout) {
            return config_err("text_dropout must lie in [0, 1)");
        }
        if self.max_len < 2 {
            return config_err("max_len must leave room for [CLS] and one token");
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side().pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        Image::CHANNELS * self.patch * self.patch
    }

    /// Layer whose outputs serve as intermediate locals: `floor(3L/4)`, at least 1.
    pub fn intermediate_layer(layers: usize) -> usize {
        (3 * layers / 4).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Vision,
    Text,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Online,
    Momentum,
}

/// One encoder's output for a batch: a `[CLS]` row per sample plus that
/// sample's local rows (patches or tokens).
#[derive(Clone, Debug)]
pub struct EmbeddingSet {
    /// `[batch, d]`
    pub cls: Tensor,
    /// `[batch * locals_per_sample, d]`
    pub locals: Tensor,
    pub locals_per_sample: usize,
    /// `false` for padded text positions; always `true` for vision.
    pub local_valid: Vec<bool>,
    pub modality: Modality,
    pub source: Source,
}

impl EmbeddingSet {
    pub fn batch(&self) -> usize {
        self.cls.rows()
    }

    pub fn valid_count(&self, sample: usize) -> usize {
        let l = self.locals_per_sample;
        self.local_valid[sample * l..(sample + 1) * l].iter().filter(|&&v| v).count()
    }
}

/// Which projection head a weight matrix plays.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadRole {
    Vision,
    Text,
    MomentumVision,
    MomentumText,
}

impl HeadRole {
    pub fn modality(self) -> Modality {
        match self {
            HeadRole::Vision | HeadRole::MomentumVision => Modality::Vision,
            HeadRole::Text | HeadRole::MomentumText => Modality::Text,
        }
    }

    pub fn source(self) -> Source {
        match self {
            HeadRole::Vision | HeadRole::Text => Source::Online,
            HeadRole::MomentumVision | HeadRole::MomentumText => Source::Momentum,
        }
    }
}

/// Linear map to the contrastive space followed by L2 normalization.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    /// `[d_model, d_proj]`
    pub weight: Tensor,
    pub role: HeadRole,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectWhich {
    Cls,
    /// Valid locals only, in sample order.
    Locals,
    /// Locals block-averaged on the patch grid down to `target` vectors per sample.
    PooledLocals { target: usize },
}

impl ProjectionHead {
    /// Projects rows of `x` and normalizes them to unit length.
    pub fn apply(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.weight).l2_normalize_rows(NORM_EPS)
    }

    pub fn project(&self, set: &EmbeddingSet, which: ProjectWhich) -> Result<Tensor> {
        if set.modality != self.role.modality() || set.source != self.role.source() {
            return contract_err(format!("{:?} head applied to {:?}/{:?} embeddings", self.role, set.modality, set.source));
        }
        match which {
            ProjectWhich::Cls => Ok(self.apply(&set.cls)),
            ProjectWhich::Locals => {
                let idx: Vec<usize> = (0..set.local_valid.len()).filter(|&i| set.local_valid[i]).collect();
                Ok(self.apply(&set.locals.gather_rows(&idx)))
            }
            ProjectWhich::PooledLocals { target } => {
                let pooled = crate::objectives::pool_patches(&set.locals, set.batch(), target)?;
                Ok(self.apply(&pooled))
            }
        }
    }
}

/// Splits a `(3, H, W)` image into `patch x patch` tiles in row-major order.
/// Each row is one tile flattened channel-major.
pub fn patchify(image: &Image, patch: usize) -> Result<Tensor> {
    if patch == 0 || image.height % patch != 0 || image.width % patch != 0 {
        return config_err(format!("{}x{} image is not divisible into {patch}x{patch} patches", image.height, image.width));
    }
    let (ph, pw) = (image.height / patch, image.width / patch);
    let dim = Image::CHANNELS * patch * patch;
    let mut out = Tensor::zeros(ph * pw, dim);
    for py in 0..ph {
        for px in 0..pw {
            let row = out.row_mut(py * pw + px);
            let mut k = 0;
            for c in 0..Image::CHANNELS {
                for dy in 0..patch {
                    for dx in 0..patch {
                        row[k] = image.at(c, py * patch + dy, px * patch + dx);
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, patch: usize, height: usize, width: usize) -> Image {
    let pw = width / patch;
    let mut img = Image::zeros(height, width);
    for p in 0..patches.rows() {
        let (py, px) = (p / pw, p % pw);
        let row = patches.row(p);
        let mut k = 0;
        for c in 0..Image::CHANNELS {
            for dy in 0..patch {
                for dx in 0..patch {
                    img.set(c, py * patch + dy, px * patch + dx, row[k]);
                    k += 1;
                }
            }
        }
    }
    img
}

#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub patch_embed: Linear,
    pub cls: usize,
    pub pos: usize,
    pub blocks: Vec<Block>,
    pub ln_f: Norm,
    pub proj: usize,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub tok_embed: usize,
    pub pos: usize,
    pub blocks: Vec<Block>,
    pub ln_f: Norm,
    pub proj: usize,
}

#[derive(Clone, Debug)]
pub struct FusionEncoder {
    pub blocks: Vec<FusionBlock>,
    pub ln_f: Norm,
    pub itm_head: Linear,
    pub mlm_head: Linear,
}

/// Batched encoder output still on the tape.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    /// `[batch * seq, d]`, position 0 of each sample is `[CLS]`.
    pub states: Var,
    pub batch: usize,
    pub seq: usize,
    /// Per-position attention validity (`[batch * seq]`).
    pub valid: Rc<Vec<bool>>,
    /// States after the intermediate layer, when requested.
    pub tap: Option<Var>,
}

impl EncodedBatch {
    pub fn cls_rows(&self) -> Rc<Vec<usize>> {
        Rc::new((0..self.batch).map(|b| b * self.seq).collect())
    }

    /// Row indices of every non-`[CLS]` position.
    pub fn local_rows(&self) -> Vec<usize> {
        (0..self.batch).flat_map(|b| (1..self.seq).map(move |i| b * self.seq + i)).collect()
    }

    pub fn cls(&self, g: &mut Graph) -> Var {
        g.gather_rows(self.states, self.cls_rows())
    }

    /// Detaches into a plain [`EmbeddingSet`]; `use_tap` reads the intermediate layer's locals.
    pub fn to_embedding_set(&self, g: &Graph, modality: Modality, source: Source, use_tap: bool) -> EmbeddingSet {
        let states = g.value(self.states);
        let local_src = if use_tap { g.value(self.tap.expect("encoder run without a tap")) } else { states };
        let locals = self.local_rows();
        EmbeddingSet {
            cls: states.gather_rows(&self.cls_rows()),
            locals: local_src.gather_rows(&locals),
            locals_per_sample: self.seq - 1,
            local_valid: locals.iter().map(|&i| self.valid[i]).collect(),
            modality,
            source,
        }
    }
}

/// The full architecture: three encoder layouts over three parameter sets.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    pub fusion: FusionEncoder,
}

/// Online parameters for the three encoders (projection heads live with
/// their encoder; ITM/MLM heads with fusion).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub vision: ParamSet,
    pub text: ParamSet,
    pub fusion: ParamSet,
}

impl ModelParams {
    pub fn numel(&self) -> usize {
        self.vision.numel() + self.text.numel() + self.fusion.numel()
    }
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<(Model, ModelParams)> {
        cfg.validate()?;
        let d = cfg.d_model;
        let hidden = d * cfg.mlp_ratio;
        let mut rng = seed::rng(seed::derive(seed, seed::tag::INIT));

        let mut pb = ParamBuilder::new("vision", &mut rng, cfg.init_std);
        let patch_embed = Linear::new(&mut pb, "patch_embed", cfg.patch_dim(), d, true);
        let cls = pb.normal("cls", 1, d);
        let pos = pb.normal("pos", cfg.num_patches() + 1, d);
        let blocks = (0..cfg.vision_layers).map(|i| Block::new(&mut pb, &format!("block{i}"), d, hidden)).collect();
        let ln_f = Norm::new(&mut pb, "ln_f", d);
        let proj = pb.normal("proj", d, cfg.d_proj);
        let vision = VisionEncoder { patch_embed, cls, pos, blocks, ln_f, proj };
        let vision_params = pb.set;

        let mut pb = ParamBuilder::new("text", &mut rng, cfg.init_std);
        let tok_embed = pb.normal("tok_embed", cfg.vocab_size, d);
        let pos = pb.normal("pos", cfg.max_len, d);
        let blocks = (0..cfg.text_layers).map(|i| Block::new(&mut pb, &format!("block{i}"), d, hidden)).collect();
        let ln_f = Norm::new(&mut pb, "ln_f", d);
        let proj = pb.normal("proj", d, cfg.d_proj);
        let text = TextEncoder { tok_embed, pos, blocks, ln_f, proj };
        let text_params = pb.set;

        let mut pb = ParamBuilder::new("fusion", &mut rng, cfg.init_std);
        let blocks = (0..cfg.fusion_layers).map(|i| FusionBlock::new(&mut pb, &format!("block{i}"), d, hidden)).collect();
        let ln_f = Norm::new(&mut pb, "ln_f", d);
        let itm_head = Linear::new(&mut pb, "itm_head", d, 2, true);
        let mlm_head = Linear::new(&mut pb, "mlm_head", d, cfg.vocab_size, true);
        let fusion = FusionEncoder { blocks, ln_f, itm_head, mlm_head };
        let fusion_params = pb.set;

        Ok((Model { cfg, vision, text, fusion }, ModelParams { vision: vision_params, text: text_params, fusion: fusion_params }))
    }

    /// Runs the vision encoder over a batch of images. `tap` keeps the
    /// states after that many blocks.
    pub fn encode_images(&self, g: &mut Graph, p: &[Var], images: &[&Image], tap: Option<usize>) -> Result<EncodedBatch> {
        let cfg = &self.cfg;
        let b = images.len();
        if b == 0 {
            return contract_err("empty image batch");
        }
        let m = cfg.num_patches();
        let mut patches = Vec::with_capacity(b);
        for img in images {
            if img.height != cfg.image_size || img.width != cfg.image_size {
                return contract_err(format!("image is {}x{}, model expects {}", img.height, img.width, cfg.image_size));
            }
            patches.push(patchify(img, cfg.patch)?);
        }
        let refs: Vec<&Tensor> = patches.iter().collect();
        let x = g.constant(Tensor::concat_rows(&refs));
        let x = self.vision.patch_embed.forward(g, p, x);
        // [cls; patches of sample 0; patches of sample 1; ...] -> per-sample [cls, patches]
        let with_cls = g.concat_rows(&[p[self.vision.cls], x]);
        let seq = m + 1;
        let order: Vec<usize> = (0..b).flat_map(|s| std::iter::once(0).chain((0..m).map(move |i| 1 + s * m + i))).collect();
        let x = g.gather_rows(with_cls, Rc::new(order));
        let pos_idx: Vec<usize> = (0..b).flat_map(|_| 0..seq).collect();
        let pos = g.gather_rows(p[self.vision.pos], Rc::new(pos_idx));
        let mut x = g.add(x, pos);
        let mut tap_states = None;
        let mut none = None;
        for (i, blk) in self.vision.blocks.iter().enumerate() {
            x = blk.forward(g, p, x, b, seq, cfg.heads, None, &mut none);
            if tap == Some(i + 1) {
                tap_states = Some(x);
            }
        }
        let states = self.vision.ln_f.forward(g, p, x);
        Ok(EncodedBatch { states, batch: b, seq, valid: Rc::new(vec![true; b * seq]), tap: tap_states })
    }

    /// Runs the text encoder. With `dropout_seed` set, dropout is active
    /// regardless of whether gradients are needed.
    pub fn encode_texts(
        &self,
        g: &mut Graph,
        p: &[Var],
        texts: &[&[TokenId]],
        dropout_seed: Option<u64>,
        tap: Option<usize>,
    ) -> Result<EncodedBatch> {
        let cfg = &self.cfg;
        let b = texts.len();
        if b == 0 {
            return contract_err("empty text batch");
        }
        let seq = cfg.max_len;
        let mut ids = Vec::with_capacity(b * seq);
        for t in texts {
            if t.len() != seq {
                return contract_err(format!("token sequence length {} != {seq}", t.len()));
            }
            if let Some(&bad) = t.iter().find(|&&id| id as usize >= cfg.vocab_size) {
                return contract_err(format!("token id {bad} >= vocabulary size {}", cfg.vocab_size));
            }
            ids.extend(t.iter().map(|&id| id as usize));
        }
        let valid: Vec<bool> = texts.iter().flat_map(|t| t.iter().enumerate().map(|(i, &id)| i == 0 || id != PAD)).collect();
        let x = g.gather_rows(p[self.text.tok_embed], Rc::new(ids));
        let pos_idx: Vec<usize> = (0..b).flat_map(|_| 0..seq).collect();
        let pos = g.gather_rows(p[self.text.pos], Rc::new(pos_idx));
        let x = g.add(x, pos);
        let mut dropout = dropout_seed.filter(|_| cfg.text_dropout > 0.0).map(|s| Dropout::new(cfg.text_dropout, s));
        let mut x = match &mut dropout {
            Some(d) => d.apply(g, x),
            None => x,
        };
        let mut tap_states = None;
        for (i, blk) in self.text.blocks.iter().enumerate() {
            x = blk.forward(g, p, x, b, seq, cfg.heads, Some(&valid), &mut dropout);
            if tap == Some(i + 1) {
                tap_states = Some(x);
            }
        }
        let states = self.text.ln_f.forward(g, p, x);
        Ok(EncodedBatch { states, batch: b, seq, valid: Rc::new(valid), tap: tap_states })
    }

    /// Fuses text sequences with images. `pairs[k] = (image index, text index)`
    /// into `images` and `texts`. Returns states `[pairs * text_seq, d]`.
    pub fn fuse(
        &self,
        g: &mut Graph,
        p: &[Var],
        images: &EncodedBatch,
        texts: &EncodedBatch,
        pairs: &[(usize, usize)],
        cross_gate: f64,
    ) -> Result<Var> {
        if pairs.iter().any(|&(i, t)| i >= images.batch || t >= texts.batch) {
            return contract_err("fusion pair index out of range");
        }
        if pairs.is_empty() {
            return contract_err("fusion needs at least one pair");
        }
        let seq = texts.seq;
        let rows: Vec<usize> = pairs.iter().flat_map(|&(_, t)| (t * seq)..((t + 1) * seq)).collect();
        let mask: Vec<bool> = rows.iter().map(|&r| texts.valid[r]).collect();
        let mut x = g.gather_rows(texts.states, Rc::new(rows));
        let pair_images: Vec<usize> = pairs.iter().map(|&(i, _)| i).collect();
        let kv = CrossKv { image_states: images.states, image_seq: images.seq, pair_images: &pair_images, gate: cross_gate };
        for blk in &self.fusion.blocks {
            x = blk.forward(g, p, x, pairs.len(), seq, self.cfg.heads, &mask, &kv);
        }
        Ok(self.fusion.ln_f.forward(g, p, x))
    }

    /// Matching logits `[pairs, 2]` from each pair's fused `[CLS]`; column 1 is "matched".
    pub fn itm_logits(&self, g: &mut Graph, p: &[Var], fused: Var, seq: usize) -> Var {
        let n = g.value(fused).rows() / seq;
        let cls = g.gather_rows(fused, Rc::new((0..n).map(|k| k * seq).collect()));
        self.fusion.itm_head.forward(g, p, cls)
    }

    /// Vocabulary logits at the given fused rows.
    pub fn mlm_logits(&self, g: &mut Graph, p: &[Var], fused: Var, rows: Vec<usize>) -> Var {
        let h = g.gather_rows(fused, Rc::new(rows));
        self.fusion.mlm_head.forward(g, p, h)
    }

    /// Projects and normalizes rows of `x` with a head weight on the tape.
    pub fn project(&self, g: &mut Graph, head: Var, x: Var) -> Var {
        let y = g.matmul(x, head);
        g.l2_normalize(y, NORM_EPS)
    }

    pub fn vision_head(&self, p: &[Var]) -> Var {
        p[self.vision.proj]
    }

    pub fn text_head(&self, p: &[Var]) -> Var {
        p[self.text.proj]
    }

    pub fn vision_projection(&self, params: &ParamSet, role: HeadRole) -> ProjectionHead {
        ProjectionHead { weight: params.get(self.vision.proj).clone(), role }
    }

    pub fn text_projection(&self, params: &ParamSet, role: HeadRole) -> ProjectionHead {
        ProjectionHead { weight: params.get(self.text.proj).clone(), role }
    }

    /// Gradient-free image encoding into an [`EmbeddingSet`].
    pub fn vision_encode(&self, params: &ParamSet, images: &[&Image], source: Source) -> Result<EmbeddingSet> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let enc = self.encode_images(&mut g, &p, images, None)?;
        Ok(enc.to_embedding_set(&g, Modality::Vision, source, false))
    }

    /// Gradient-free text encoding into an [`EmbeddingSet`].
    pub fn text_encode(&self, params: &ParamSet, texts: &[&[TokenId]], dropout_seed: Option<u64>, source: Source) -> Result<EmbeddingSet> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let enc = self.encode_texts(&mut g, &p, texts, dropout_seed, None)?;
        Ok(enc.to_embedding_set(&g, Modality::Text, source, false))
    }
}

/// Gradient-free fusion output for one batch of pairs.
#[derive(Clone, Debug)]
pub struct FusionOutput {
    /// `[pairs, d]`
    pub joint_cls: Tensor,
    /// `[pairs * text_seq, d]`
    pub token_states: Tensor,
    /// `[pairs, 2]` raw matching logits.
    pub itm_logits: Tensor,
    /// Vocabulary logits at `mlm_rows`, in order.
    pub mlm_logits: Tensor,
    pub mlm_rows: Vec<usize>,
}

impl FusionOutput {
    /// Softmax matching probabilities per pair.
    pub fn itm_probs(&self) -> Tensor {
        let mut p = self.itm_logits.clone();
        for r in 0..p.rows() {
            crate::autograd::softmax_in_place(p.row_mut(r));
        }
        p
    }
}

impl Model {
    /// Encodes `images` and `texts` with online parameters, fuses the listed
    /// pairs and evaluates both heads. MLM logits are produced only at the
    /// given `(pair, position)` sites.
    pub fn fuse_detached(
        &self,
        params: &ModelParams,
        images: &[&Image],
        texts: &[&[TokenId]],
        pairs: &[(usize, usize)],
        mlm_sites: &[(usize, usize)],
    ) -> Result<FusionOutput> {
        let mut g = Graph::new();
        let pv = params.vision.bind(&mut g, false);
        let pt = params.text.bind(&mut g, false);
        let pf = params.fusion.bind(&mut g, false);
        let iv = self.encode_images(&mut g, &pv, images, None)?;
        let tv = self.encode_texts(&mut g, &pt, texts, None, None)?;
        let fused = self.fuse(&mut g, &pf, &iv, &tv, pairs, 1.0)?;
        let seq = tv.seq;
        let itm = self.itm_logits(&mut g, &pf, fused, seq);
        let rows: Vec<usize> = mlm_sites.iter().map(|&(k, pos)| k * seq + pos).collect();
        let mlm = self.mlm_logits(&mut g, &pf, fused, rows.clone());
        let fused_v = g.value(fused);
        let cls: Vec<usize> = (0..pairs.len()).map(|k| k * seq).collect();
        Ok(FusionOutput {
            joint_cls: fused_v.gather_rows(&cls),
            token_states: fused_v.clone(),
            itm_logits: g.value(itm).clone(),
            mlm_logits: g.value(mlm).clone(),
            mlm_rows: rows,
        })
    }
}
