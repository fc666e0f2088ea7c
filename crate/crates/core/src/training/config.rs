//! Flat `key = value` training configuration.
//!
//! One key per setting. Lines starting with `#` are comments. Unknown keys
//! are rejected with the list of valid ones.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoders::ModelConfig;
use crate::error::{config_err, Result, TclError};
use crate::objectives::{ItmSampling, LossGates};
use crate::synthdata::{AugmentConfig, AugmentStrength, DataSpec, MaskSplit, DEFAULT_MASK_RATE};

/// Which encoder layer supplies the locals for the local-MI objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LocalLayer {
    Last,
    Intermediate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_peak: f64,
    pub lr_floor: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub queue_size: usize,
    pub tau: f64,
    pub gates: LossGates,
    /// Keep the positive in the InfoNCE denominator.
    pub infonce_positive: bool,
    pub itm_sampling: ItmSampling,
    pub mlm_rate: f64,
    pub augment: AugmentStrength,
    /// Both image views share one sub-seed (I1 = I2).
    pub shared_view: bool,
    /// Pooled locals per image for local MI; 0 disables pooling.
    pub lmi_pool: usize,
    pub lmi_layer: LocalLayer,
    pub train_size: usize,
    pub eval_size: usize,
    pub data: DataSpec,
    pub model: ModelConfig,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 20,
            batch_size: 32,
            lr_init: 1e-5,
            lr_peak: 1e-4,
            lr_floor: 1e-5,
            warmup_steps: 100,
            weight_decay: 0.02,
            momentum: 0.995,
            queue_size: 1024,
            tau: 0.07,
            gates: LossGates::ALL,
            infonce_positive: true,
            itm_sampling: ItmSampling::Hard,
            mlm_rate: DEFAULT_MASK_RATE,
            augment: AugmentStrength::Strong,
            shared_view: false,
            lmi_pool: 16,
            lmi_layer: LocalLayer::Last,
            train_size: 512,
            eval_size: 128,
            data: DataSpec::default(),
            model: ModelConfig::default(),
            checkpoint_every: 0,
        }
    }
}

/// Every accepted key with a one-line description.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("seed", "master seed for data, init, augmentation, dropout, masking and sampling"),
    ("epochs", "passes over the training split"),
    ("batch_size", "pairs per step"),
    ("lr_init", "learning rate at step 0"),
    ("lr_peak", "learning rate reached at the end of warmup"),
    ("lr_floor", "learning rate at the final step (cosine endpoint)"),
    ("warmup_steps", "linear warmup length in steps"),
    ("weight_decay", "decoupled weight decay"),
    ("momentum", "EMA coefficient m of the momentum encoders, in [0, 1]"),
    ("queue_size", "capacity K of each negative queue"),
    ("tau", "InfoNCE temperature shared by every contrastive term"),
    ("loss.cma", "enable cross-modal alignment (true/false)"),
    ("loss.imc", "enable intra-modal contrast"),
    ("loss.lmi", "enable local mutual-information maximization"),
    ("loss.itm", "enable image-text matching"),
    ("loss.mlm", "enable masked language modeling"),
    ("infonce_positive", "include the positive in the InfoNCE denominator"),
    ("itm_sampling", "ITM negative sampling: hard or uniform"),
    ("mlm_rate", "probability of selecting a token for masking"),
    ("augment", "image augmentation strength: weak or strong"),
    ("shared_view", "use one augmented view for both image branches"),
    ("lmi_pool", "pooled patches per image for local MI (perfect square; 0 = no pooling)"),
    ("lmi_layer", "locals for local MI from the last or intermediate layer"),
    ("train_size", "training pairs"),
    ("eval_size", "held-out pairs for retrieval"),
    ("data.grid", "scene grid side (2, 3 or 4)"),
    ("data.two_object_prob", "probability that a scene has two objects"),
    ("data.synonyms", "vary caption wording with synonyms"),
    ("model.image_size", "image side in pixels"),
    ("model.patch", "patch side in pixels"),
    ("model.d_model", "transformer width"),
    ("model.heads", "attention heads"),
    ("model.vision_layers", "vision encoder depth"),
    ("model.text_layers", "text encoder depth"),
    ("model.fusion_layers", "fusion encoder depth"),
    ("model.mlp_ratio", "MLP hidden width as a multiple of d_model"),
    ("model.d_proj", "contrastive projection width"),
    ("model.dropout", "text dropout rate"),
    ("model.init_std", "standard deviation of weight initialization"),
    ("checkpoint_every", "steps between checkpoints (0 = final only)"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| TclError::Config(format!("invalid value {value:?} for key {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => config_err(format!("invalid value {value:?} for key {key} (expected true/false)")),
    }
}

impl TrainConfig {
    /// Desk default shrunk for fast checks: 8x8 images, width 8, one layer each.
    pub fn micro() -> Self {
        let model = ModelConfig::micro();
        TrainConfig {
            data: DataSpec { image_size: model.image_size, ..DataSpec::default() },
            model,
            lmi_pool: 4,
            ..TrainConfig::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = key.trim();
        match k {
            "seed" => self.seed = parse(k, value)?,
            "epochs" => self.epochs = parse(k, value)?,
            "batch_size" => self.batch_size = parse(k, value)?,
            "lr_init" => self.lr_init = parse(k, value)?,
            "lr_peak" => self.lr_peak = parse(k, value)?,
            "lr_floor" => self.lr_floor = parse(k, value)?,
            "warmup_steps" => self.warmup_steps = parse(k, value)?,
            "weight_decay" => self.weight_decay = parse(k, value)?,
            "momentum" => self.momentum = parse(k, value)?,
            "queue_size" => self.queue_size = parse(k, value)?,
            "tau" => self.tau = parse(k, value)?,
            "loss.cma" => self.gates.cma = parse_bool(k, value)?,
            "loss.imc" => self.gates.imc = parse_bool(k, value)?,
            "loss.lmi" => self.gates.lmi = parse_bool(k, value)?,
            "loss.itm" => self.gates.itm = parse_bool(k, value)?,
            "loss.mlm" => self.gates.mlm = parse_bool(k, value)?,
            "infonce_positive" => self.infonce_positive = parse_bool(k, value)?,
            "itm_sampling" => {
                self.itm_sampling = match value.trim() {
                    "hard" => ItmSampling::Hard,
                    "uniform" => ItmSampling::Uniform,
                    v => return config_err(format!("invalid value {v:?} for key {k} (expected hard or uniform)")),
                }
            }
            "mlm_rate" => self.mlm_rate = parse(k, value)?,
            "augment" => {
                self.augment = match value.trim() {
                    "weak" => AugmentStrength::Weak,
                    "strong" => AugmentStrength::Strong,
                    v => return config_err(format!("invalid value {v:?} for key {k} (expected weak or strong)")),
                }
            }
            "shared_view" => self.shared_view = parse_bool(k, value)?,
            "lmi_pool" => self.lmi_pool = parse(k, value)?,
            "lmi_layer" => {
                self.lmi_layer = match value.trim() {
                    "last" => LocalLayer::Last,
                    "intermediate" => LocalLayer::Intermediate,
                    v => return config_err(format!("invalid value {v:?} for key {k} (expected last or intermediate)")),
                }
            }
            "train_size" => self.train_size = parse(k, value)?,
            "eval_size" => self.eval_size = parse(k, value)?,
            "data.grid" => self.data.grid = parse(k, value)?,
            "data.two_object_prob" => self.data.two_object_prob = parse(k, value)?,
            "data.synonyms" => self.data.synonyms = parse_bool(k, value)?,
            "model.image_size" => {
                self.model.image_size = parse(k, value)?;
                self.data.image_size = self.model.image_size;
            }
            "model.patch" => self.model.patch = parse(k, value)?,
            "model.d_model" => self.model.d_model = parse(k, value)?,
            "model.heads" => self.model.heads = parse(k, value)?,
            "model.vision_layers" => self.model.vision_layers = parse(k, value)?,
            "model.text_layers" => self.model.text_layers = parse(k, value)?,
            "model.fusion_layers" => self.model.fusion_layers = parse(k, value)?,
            "model.mlp_ratio" => self.model.mlp_ratio = parse(k, value)?,
            "model.d_proj" => self.model.d_proj = parse(k, value)?,
            "model.dropout" => self.model.text_dropout = parse(k, value)?,
            "model.init_std" => self.model.init_std = parse(k, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(k, value)?,
            _ => {
                let valid: Vec<&str> = CONFIG_KEYS.iter().map(|(k, _)| *k).collect();
                return config_err(format!("unknown config key {k:?}; valid keys: {}", valid.join(", ")));
            }
        }
        Ok(())
    }

    /// Current value of every key, in [`CONFIG_KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let g = |v: bool| v.to_string();
        let vals: Vec<String> = vec![
            self.seed.to_string(),
            self.epochs.to_string(),
            self.batch_size.to_string(),
            fmt_f(self.lr_init),
            fmt_f(self.lr_peak),
            fmt_f(self.lr_floor),
            self.warmup_steps.to_string(),
            fmt_f(self.weight_decay),
            fmt_f(self.momentum),
            self.queue_size.to_string(),
            fmt_f(self.tau),
            g(self.gates.cma),
            g(self.gates.imc),
            g(self.gates.lmi),
            g(self.gates.itm),
            g(self.gates.mlm),
            g(self.infonce_positive),
            match self.itm_sampling {
                ItmSampling::Hard => "hard".into(),
                ItmSampling::Uniform => "uniform".into(),
            },
            fmt_f(self.mlm_rate),
            match self.augment {
                AugmentStrength::Weak => "weak".into(),
                AugmentStrength::Strong => "strong".into(),
            },
            g(self.shared_view),
            self.lmi_pool.to_string(),
            match self.lmi_layer {
                LocalLayer::Last => "last".into(),
                LocalLayer::Intermediate => "intermediate".into(),
            },
            self.train_size.to_string(),
            self.eval_size.to_string(),
            self.data.grid.to_string(),
            fmt_f(self.data.two_object_prob),
            g(self.data.synonyms),
            self.model.image_size.to_string(),
            self.model.patch.to_string(),
            self.model.d_model.to_string(),
            self.model.heads.to_string(),
            self.model.vision_layers.to_string(),
            self.model.text_layers.to_string(),
            self.model.fusion_layers.to_string(),
            self.model.mlp_ratio.to_string(),
            self.model.d_proj.to_string(),
            fmt_f(self.model.text_dropout),
            fmt_f(self.model.init_std),
            self.checkpoint_every.to_string(),
        ];
        CONFIG_KEYS.iter().map(|(k, _)| *k).zip(vals).collect()
    }

    /// The resolved config as a key-value file that [`TrainConfig::parse_str`] reads back.
    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        for ((k, v), (_, doc)) in self.entries().iter().zip(CONFIG_KEYS) {
            let _ = writeln!(out, "# {doc}\n{k} = {v}");
        }
        out
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TclError::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Defaults overridden by the lines of `text`.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TclError::Config(format!("config not found: {} ({e})", path.display())))?;
        Self::parse_str(&text)
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| TclError::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k, v)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train_size.div_ceil(self.batch_size.max(1))
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch()
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig { shared_view: self.shared_view, ..AugmentConfig::for_strength(self.augment) }
    }

    pub fn mask_split(&self) -> MaskSplit {
        MaskSplit::default()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        if self.data.image_size != self.model.image_size {
            return config_err("data image size differs from model.image_size");
        }
        if self.batch_size == 0 {
            return config_err("batch_size must be at least 1");
        }
        if self.train_size == 0 || self.epochs == 0 {
            return config_err("train_size and epochs must be at least 1");
        }
        if self.queue_size < self.batch_size {
            return config_err(format!("queue_size {} is smaller than batch_size {}", self.queue_size, self.batch_size));
        }
        if !(self.tau > 0.0) {
            return config_err(format!("tau must be positive (got {})", self.tau));
        }
        crate::momentum::check_momentum(self.momentum)?;
        for (k, v) in [("lr_init", self.lr_init), ("lr_peak", self.lr_peak), ("lr_floor", self.lr_floor), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return config_err(format!("{k} must be a non-negative number (got {v})"));
            }
        }
        if self.lr_floor > self.lr_peak {
            return config_err("lr_floor must not exceed lr_peak");
        }
        if !(0.0..1.0).contains(&self.mlm_rate) {
            return config_err("mlm_rate must lie in [0, 1)");
        }
        if self.lmi_pool > 0 {
            let m = self.model.num_patches();
            let side = (m as f64).sqrt().round() as usize;
            let t = (self.lmi_pool as f64).sqrt().round() as usize;
            if t * t != self.lmi_pool || side % t != 0 {
                return config_err(format!("lmi_pool {} does not pool a {side}x{side} patch grid evenly", self.lmi_pool));
            }
        }
        let space = self.data.scene_space();
        if (self.train_size + self.eval_size) as u64 > space {
            return config_err(format!("train_size + eval_size exceeds the {space} distinct scenes available"));
        }
        Ok(())
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}
