//! Zero-shot image-text retrieval metrics.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{HeadRole, Model, ModelParams, Source};
use crate::error::{contract_err, Result};
use crate::synthdata::{Image, SyntheticPair, TokenId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

impl Recall {
    pub fn mean(&self) -> f64 {
        (self.r1 + self.r5 + self.r10) / 3.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// Image queries, text targets.
    pub tr_recall: Recall,
    /// Text queries, image targets.
    pub ir_recall: Recall,
    /// Average of the six recalls.
    pub mean_recall: f64,
    pub n_queries: usize,
}

/// 0-based rank of `target` in row `q` of `sim` (descending), ties broken by
/// lower index first.
fn rank_of(scores: impl Iterator<Item = f64>, target: usize, target_score: f64) -> usize {
    scores
        .enumerate()
        .filter(|&(j, s)| s > target_score || (s == target_score && j < target))
        .count()
}

fn recall_from_ranks(ranks: &[usize]) -> Recall {
    let n = ranks.len() as f64;
    let at = |k: usize| ranks.iter().filter(|&&r| r < k).count() as f64 / n;
    Recall { r1: at(1), r5: at(5), r10: at(10) }
}

/// Recall@{1,5,10} in both directions from a similarity matrix
/// `sim[i][j]` (image `i`, text `j`); `matches[i]` is image `i`'s text.
pub fn retrieval_from_similarity(sim: &Tensor, matches: &[usize]) -> Result<RetrievalResult> {
    let (n_img, n_txt) = sim.shape();
    if matches.len() != n_img || n_img == 0 {
        return contract_err("one ground-truth text per image is required");
    }
    let mut image_of = vec![usize::MAX; n_txt];
    for (i, &t) in matches.iter().enumerate() {
        if t >= n_txt || image_of[t] != usize::MAX {
            return contract_err("ground-truth pairs must map images to distinct texts");
        }
        image_of[t] = i;
    }
    let tr: Vec<usize> = (0..n_img).map(|i| rank_of(sim.row(i).iter().copied(), matches[i], sim.get(i, matches[i]))).collect();
    let ir: Vec<usize> = (0..n_txt)
        .filter(|&t| image_of[t] != usize::MAX)
        .map(|t| {
            let i = image_of[t];
            rank_of((0..n_img).map(|r| sim.get(r, t)), i, sim.get(i, t))
        })
        .collect();
    let tr_recall = recall_from_ranks(&tr);
    let ir_recall = recall_from_ranks(&ir);
    Ok(RetrievalResult { tr_recall, ir_recall, mean_recall: (tr_recall.mean() + ir_recall.mean()) / 2.0, n_queries: n_img })
}

/// Cosine-similarity retrieval between projected image and text embeddings.
pub fn retrieval_eval(image: &Tensor, text: &Tensor, matches: &[usize]) -> Result<RetrievalResult> {
    if image.cols() != text.cols() {
        return contract_err(format!("image embeddings have dim {}, text embeddings {}", image.cols(), text.cols()));
    }
    retrieval_from_similarity(&image.matmul_t(text), matches)
}

const EMBED_CHUNK: usize = 64;

/// Projected online `[CLS]` vectors for un-augmented images and captions
/// without dropout.
pub fn embed_pairs(model: &Model, params: &ModelParams, pairs: &[SyntheticPair]) -> Result<(Tensor, Tensor)> {
    let vhead = model.vision_projection(&params.vision, HeadRole::Vision);
    let thead = model.text_projection(&params.text, HeadRole::Text);
    let mut img_parts = Vec::new();
    let mut txt_parts = Vec::new();
    for chunk in pairs.chunks(EMBED_CHUNK) {
        let images: Vec<&Image> = chunk.iter().map(|p| &p.image).collect();
        let texts: Vec<&[TokenId]> = chunk.iter().map(|p| p.caption.as_slice()).collect();
        let iv = model.vision_encode(&params.vision, &images, Source::Online)?;
        let tv = model.text_encode(&params.text, &texts, None, Source::Online)?;
        img_parts.push(vhead.apply(&iv.cls));
        txt_parts.push(thead.apply(&tv.cls));
    }
    let cat = |parts: &[Tensor]| Tensor::concat_rows(&parts.iter().collect::<Vec<_>>());
    Ok((cat(&img_parts), cat(&txt_parts)))
}

/// Retrieval over `pairs`, where pair `i`'s image matches its own caption.
pub fn retrieval_eval_model(model: &Model, params: &ModelParams, pairs: &[SyntheticPair]) -> Result<RetrievalResult> {
    let (img, txt) = embed_pairs(model, params, pairs)?;
    retrieval_eval(&img, &txt, &(0..pairs.len()).collect::<Vec<_>>())
}

pub const SIMILARITY_MAGIC: &[u8; 4] = b"TCLS";

/// Writes a similarity matrix: magic `TCLS`, version u32 (1), rows u32,
/// cols u32, then `rows * cols` f32 values row-major, all little-endian.
pub fn write_similarity<W: Write>(mut w: W, sim: &Tensor) -> Result<()> {
    w.write_all(SIMILARITY_MAGIC)?;
    for v in [1u32, sim.rows() as u32, sim.cols() as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    let bytes: Vec<u8> = sim.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn save_similarity(path: &Path, sim: &Tensor) -> Result<()> {
    write_similarity(std::io::BufWriter::new(std::fs::File::create(path)?), sim)
}
