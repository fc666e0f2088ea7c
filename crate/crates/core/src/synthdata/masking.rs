//! BERT-style token masking for the masked-language-modeling objective.

use rand::Rng;

use super::vocab::{self, TokenId, FIRST_WORD, MASK, VOCAB_SIZE};
use crate::error::{config_err, Result};
use crate::seed;

/// How selected positions are rewritten: `[MASK]`, a random word, or kept.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSplit {
    pub mask: f64,
    pub random: f64,
    pub keep: f64,
}

impl Default for MaskSplit {
    fn default() -> Self {
        MaskSplit { mask: 0.8, random: 0.1, keep: 0.1 }
    }
}

pub const DEFAULT_MASK_RATE: f64 = 0.15;

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedText {
    pub input_ids: Vec<TokenId>,
    /// Original id at selected positions, `None` elsewhere.
    pub labels: Vec<Option<TokenId>>,
    pub mask_positions: Vec<usize>,
}

/// Selects each non-special position with probability `rate` and rewrites it
/// according to `split`. Deterministic in `seed`.
pub fn mlm_mask(caption: &[TokenId], seed: u64, rate: f64, split: MaskSplit) -> Result<MaskedText> {
    if !(0.0..=1.0).contains(&rate) {
        return config_err(format!("mask rate {rate} outside [0, 1]"));
    }
    let parts = [split.mask, split.random, split.keep];
    if parts.iter().any(|p| *p < 0.0) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return config_err("mask split must be non-negative and sum to 1");
    }
    let mut rng = seed::rng(seed);
    let mut input_ids = caption.to_vec();
    let mut labels = vec![None; caption.len()];
    let mut mask_positions = Vec::new();
    for (i, &tok) in caption.iter().enumerate() {
        if vocab::is_special(tok) {
            continue;
        }
        // two draws per eligible position keep the stream layout rate-independent
        let pick: f64 = rng.random();
        let how: f64 = rng.random();
        if pick >= rate {
            continue;
        }
        mask_positions.push(i);
        labels[i] = Some(tok);
        input_ids[i] = if how < split.mask {
            MASK
        } else if how < split.mask + split.random {
            rng.random_range(FIRST_WORD..VOCAB_SIZE as TokenId)
        } else {
            tok
        };
    }
    Ok(MaskedText { input_ids, labels, mask_positions })
}
