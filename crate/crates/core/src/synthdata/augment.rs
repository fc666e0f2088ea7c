//! Two-view image augmentation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Image;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugmentStrength {
    /// Random resized crop and horizontal flip only.
    Weak,
    /// Crop and flip plus brightness/contrast jitter and channel noise.
    Strong,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub crop: bool,
    /// Range of the crop's area as a fraction of the image.
    pub crop_scale: (f64, f64),
    /// Range of the crop's width/height ratio.
    pub crop_ratio: (f64, f64),
    pub flip_prob: f64,
    /// Brightness factor drawn from `1 ± brightness`.
    pub brightness: f64,
    /// Contrast factor drawn from `1 ± contrast`.
    pub contrast: f64,
    pub noise_std: f64,
    /// Draw both views from the same sub-seed.
    pub shared_view: bool,
}

impl AugmentConfig {
    /// No transform at all: both views equal the input.
    pub fn identity() -> Self {
        AugmentConfig {
            crop: false,
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            noise_std: 0.0,
            shared_view: false,
        }
    }

    pub fn for_strength(strength: AugmentStrength) -> Self {
        let weak = AugmentConfig { crop: true, crop_scale: (0.8, 1.0), crop_ratio: (0.9, 1.1), ..Self::identity() };
        match strength {
            AugmentStrength::Weak => weak,
            AugmentStrength::Strong => AugmentConfig { brightness: 0.3, contrast: 0.3, noise_std: 0.03, ..weak },
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.crop && self.flip_prob == 0.0 && self.brightness == 0.0 && self.contrast == 0.0 && self.noise_std == 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedViews {
    pub view_a: Image,
    pub view_b: Image,
    pub rng_seed: u64,
}

/// Produces two views of `image` with the default transforms for `strength`.
pub fn augment(image: &Image, seed: u64, strength: AugmentStrength) -> AugmentedViews {
    augment_with(image, seed, &AugmentConfig::for_strength(strength))
}

/// Produces two views of `image`; each view draws from its own sub-seed of
/// `seed` unless `cfg.shared_view` is set.
pub fn augment_with(image: &Image, seed: u64, cfg: &AugmentConfig) -> AugmentedViews {
    let seed_a = seed::derive(seed, seed::tag::VIEW_A);
    let seed_b = if cfg.shared_view { seed_a } else { seed::derive(seed, seed::tag::VIEW_B) };
    AugmentedViews {
        view_a: transform(image, &mut seed::rng(seed_a), cfg),
        view_b: transform(image, &mut seed::rng(seed_b), cfg),
        rng_seed: seed,
    }
}

fn transform(image: &Image, rng: &mut ChaCha8Rng, cfg: &AugmentConfig) -> Image {
    let mut out = if cfg.crop { resized_crop(image, rng, cfg) } else { image.clone() };
    if cfg.flip_prob > 0.0 && rng.random::<f64>() < cfg.flip_prob {
        flip_horizontal(&mut out);
    }
    if cfg.brightness > 0.0 {
        let f = 1.0 + rng.random_range(-cfg.brightness..=cfg.brightness);
        out.data.iter_mut().for_each(|v| *v *= f);
    }
    if cfg.contrast > 0.0 {
        let f = 1.0 + rng.random_range(-cfg.contrast..=cfg.contrast);
        let mean = out.data.iter().sum::<f64>() / out.data.len() as f64;
        out.data.iter_mut().for_each(|v| *v = (*v - mean) * f + mean);
    }
    if cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_std).expect("noise std is finite and positive");
        out.data.iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    out
}

fn resized_crop(image: &Image, rng: &mut ChaCha8Rng, cfg: &AugmentConfig) -> Image {
    let (h, w) = (image.height as f64, image.width as f64);
    let area = sample_range(rng, cfg.crop_scale);
    let (lr0, lr1) = (cfg.crop_ratio.0.ln(), cfg.crop_ratio.1.ln());
    let ratio = sample_range(rng, (lr0, lr1)).exp();
    let cw = ((area * ratio).sqrt() * w).clamp(1.0, w);
    let ch = ((area / ratio).sqrt() * h).clamp(1.0, h);
    let x0 = rng.random::<f64>() * (w - cw);
    let y0 = rng.random::<f64>() * (h - ch);
    let mut out = Image::zeros(image.height, image.width);
    for y in 0..image.height {
        let sy = (y0 + (y as f64 + 0.5) * ch / h - 0.5).clamp(0.0, h - 1.0);
        let (ya, fy) = (sy.floor() as usize, sy - sy.floor());
        let yb = (ya + 1).min(image.height - 1);
        for x in 0..image.width {
            let sx = (x0 + (x as f64 + 0.5) * cw / w - 0.5).clamp(0.0, w - 1.0);
            let (xa, fx) = (sx.floor() as usize, sx - sx.floor());
            let xb = (xa + 1).min(image.width - 1);
            for c in 0..Image::CHANNELS {
                let top = image.at(c, ya, xa) * (1.0 - fx) + image.at(c, ya, xb) * fx;
                let bot = image.at(c, yb, xa) * (1.0 - fx) + image.at(c, yb, xb) * fx;
                out.set(c, y, x, top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn flip_horizontal(img: &mut Image) {
    let w = img.width;
    for c in 0..Image::CHANNELS {
        for y in 0..img.height {
            for x in 0..w / 2 {
                let a = img.at(c, y, x);
                let b = img.at(c, y, w - 1 - x);
                img.set(c, y, x, b);
                img.set(c, y, w - 1 - x, a);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{generate_dataset, DataSpec};
    use super::*;
    use proptest::prelude::*;

    fn sample_image() -> Image {
        generate_dataset(1, 21, &DataSpec::default()).unwrap().remove(0).image
    }

    #[test]
    fn strong_views_differ() {
        let v = augment(&sample_image(), 4, AugmentStrength::Strong);
        assert_ne!(v.view_a, v.view_b);
    }

    #[test]
    fn identity_config_returns_the_input() {
        let img = sample_image();
        let v = augment_with(&img, 4, &AugmentConfig::identity());
        assert_eq!(v.view_a, img);
        assert_eq!(v.view_b, img);
    }

    #[test]
    fn augmentation_is_deterministic() {
        let img = sample_image();
        assert_eq!(augment(&img, 5, AugmentStrength::Strong), augment(&img, 5, AugmentStrength::Strong));
    }

    #[test]
    fn weak_shared_views_coincide() {
        let img = sample_image();
        let cfg = AugmentConfig { shared_view: true, ..AugmentConfig::for_strength(AugmentStrength::Weak) };
        let v = augment_with(&img, 8, &cfg);
        assert_eq!(v.view_a, v.view_b);
        assert_ne!(v.view_a, img);
    }

    #[test]
    fn flip_is_an_involution() {
        let img = Image { height: 4, width: 4, data: (0..48).map(|i| i as f64 / 47.0).collect() };
        let mut f = img.clone();
        flip_horizontal(&mut f);
        assert_ne!(f, img);
        flip_horizontal(&mut f);
        assert_eq!(f, img);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn views_keep_shape_and_range(seed in any::<u64>(), strong in any::<bool>(), flip in 0.0f64..1.0) {
            let img = Image { height: 16, width: 16, data: (0..768).map(|i| (i % 7) as f64 / 6.0).collect() };
            let strength = if strong { AugmentStrength::Strong } else { AugmentStrength::Weak };
            let cfg = AugmentConfig { flip_prob: flip, ..AugmentConfig::for_strength(strength) };
            let v = augment_with(&img, seed, &cfg);
            for view in [&v.view_a, &v.view_b] {
                prop_assert_eq!((view.height, view.width, view.data.len()), (16, 16, 768));
                prop_assert!(view.in_unit_range());
            }
        }
    }
}
