//! Procedural shapes-on-a-grid images with template captions.
//!
//! Each image places one or two solid shapes in distinct cells of a
//! `grid x grid` layout; its caption names every object's color, shape and
//! cell, so the text describes exactly the salient content of the image.

mod augment;
mod io;
mod masking;
mod render;
pub mod vocab;

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::seed;

pub use augment::{augment, augment_with, AugmentConfig, AugmentStrength, AugmentedViews};
pub use io::{read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use masking::{mlm_mask, MaskSplit, MaskedText, DEFAULT_MASK_RATE};
pub use render::render;
pub use vocab::{TokenId, CLS, MASK, MAX_LEN, PAD, VOCAB_SIZE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Cross];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
}

impl Color {
    pub const ALL: [Color; 6] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Magenta, Color::Cyan];

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Magenta => [1.0, 0.0, 1.0],
            Color::Cyan => [0.0, 1.0, 1.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: Color,
    pub row: usize,
    pub col: usize,
}

/// Objects in row-major cell order; at most one object per cell.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scene {
    pub grid: usize,
    pub objects: Vec<SceneObject>,
}

/// Channel-major `(3, H, W)` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn zeros(height: usize, width: usize) -> Self {
        Image { height, width, data: vec![0.0; Self::CHANNELS * height * width] }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    pub image: Image,
    /// `[CLS]`-prefixed token ids padded with `[PAD]` to [`MAX_LEN`].
    pub caption: Vec<TokenId>,
    pub scene: Scene,
    pub pair_id: u64,
}

impl SyntheticPair {
    /// Count of non-special caption tokens.
    pub fn caption_len(&self) -> usize {
        self.caption.iter().filter(|&&t| !vocab::is_special(t)).count()
    }
}

/// Dataset generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub grid: usize,
    pub image_size: usize,
    /// Probability that a scene holds two objects instead of one.
    pub two_object_prob: f64,
    /// Swap synonym-eligible words (pair-id seeded) when rendering captions.
    pub synonyms: bool,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec { grid: 2, image_size: 64, two_object_prob: 0.5, synonyms: false }
    }
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.grid) {
            return config_err(format!("grid must be 2, 3 or 4 (got {})", self.grid));
        }
        if self.image_size < 4 * self.grid {
            return config_err(format!("image_size {} too small for grid {}", self.image_size, self.grid));
        }
        if !(0.0..=1.0).contains(&self.two_object_prob) {
            return config_err("two_object_prob must lie in [0, 1]");
        }
        Ok(())
    }

    /// Number of distinct scenes the generator can produce.
    pub fn scene_space(&self) -> u64 {
        let cells = (self.grid * self.grid) as u64;
        let kinds = (ShapeKind::ALL.len() * Color::ALL.len()) as u64;
        let one = if self.two_object_prob < 1.0 { cells * kinds } else { 0 };
        let two = if self.two_object_prob > 0.0 { cells * (cells - 1) / 2 * kinds * kinds } else { 0 };
        one + two
    }
}

fn sample_scene<R: Rng>(spec: &DataSpec, rng: &mut R) -> Scene {
    let cells = spec.grid * spec.grid;
    let n = if rng.random::<f64>() < spec.two_object_prob { 2 } else { 1 };
    let mut chosen: Vec<usize> = Vec::with_capacity(n);
    while chosen.len() < n {
        let c = rng.random_range(0..cells);
        if !chosen.contains(&c) {
            chosen.push(c);
        }
    }
    chosen.sort_unstable();
    let objects = chosen
        .into_iter()
        .map(|cell| SceneObject {
            shape: ShapeKind::ALL[rng.random_range(0..ShapeKind::ALL.len())],
            color: Color::ALL[rng.random_range(0..Color::ALL.len())],
            row: cell / spec.grid,
            col: cell % spec.grid,
        })
        .collect();
    Scene { grid: spec.grid, objects }
}

/// Builds the caption for `scene`, choosing synonyms from a `pair_id`-seeded stream.
pub fn caption_for(scene: &Scene, pair_id: u64, seed: u64, synonyms: bool) -> Vec<TokenId> {
    let mut rng = seed::rng(seed::derive2(seed, seed::tag::SYNONYM, pair_id));
    vocab::encode_caption(scene, |_| synonyms && rng.random::<bool>())
}

/// Generates `count` pairs with pairwise-distinct scenes.
///
/// Deterministic in `(count, seed, spec)`. Fails when `count` exceeds the
/// number of distinct scenes the grid admits.
pub fn generate_dataset(count: usize, seed: u64, spec: &DataSpec) -> Result<Vec<SyntheticPair>> {
    spec.validate()?;
    if count == 0 {
        return config_err("dataset count must be at least 1");
    }
    if count as u64 > spec.scene_space() {
        return config_err(format!("count {count} exceeds the {} distinct scenes available", spec.scene_space()));
    }
    let mut rng = seed::rng(seed);
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let scene = sample_scene(spec, &mut rng);
        if !seen.insert(scene.clone()) {
            continue;
        }
        let pair_id = out.len() as u64;
        let caption = caption_for(&scene, pair_id, seed, spec.synonyms);
        let image = render(&scene, spec.image_size);
        out.push(SyntheticPair { image, caption, scene, pair_id });
    }
    Ok(out)
}
