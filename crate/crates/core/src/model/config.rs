//! Model and run configuration, with a flat `key = value` text format.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Unknown keys are errors. [`RunConfig::to_text`] writes every key, and
//! floats use Rust's shortest round-trip formatting, so text round-trips
//! exactly.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::attention::MaskPlacement;
use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::mask::DEFAULT_EPSILON;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    None,
    Gmm,
    Elm,
}

impl FromStr for MaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MaskMode::None),
            "gmm" => Ok(MaskMode::Gmm),
            "elm" => Ok(MaskMode::Elm),
            _ => Err(Error::InvalidArgument(format!("unknown mask mode {s:?} (none|gmm|elm)"))),
        }
    }
}

impl MaskMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            MaskMode::None => "none",
            MaskMode::Gmm => "gmm",
            MaskMode::Elm => "elm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Synth,
    Cifar10,
}

impl FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synth" => Ok(DatasetKind::Synth),
            "cifar10" => Ok(DatasetKind::Cifar10),
            _ => Err(Error::InvalidArgument(format!("unknown dataset {s:?} (synth|cifar10)"))),
        }
    }
}

impl DatasetKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetKind::Synth => "synth",
            DatasetKind::Cifar10 => "cifar10",
        }
    }
}

fn placement_str(p: MaskPlacement) -> &'static str {
    match p {
        MaskPlacement::PreSoftmax => "pre_softmax",
        MaskPlacement::PostSoftmax => "post_softmax",
    }
}

fn parse_placement(s: &str) -> Result<MaskPlacement> {
    match s {
        "pre_softmax" => Ok(MaskPlacement::PreSoftmax),
        "post_softmax" => Ok(MaskPlacement::PostSoftmax),
        _ => Err(Error::InvalidArgument(format!(
            "unknown mask placement {s:?} (pre_softmax|post_softmax)"
        ))),
    }
}

/// Geometry and mask setup of a [`super::TinyViT`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_side: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub classes: usize,
    pub mask: MaskMode,
    /// Kernels per mixture mask.
    pub kernels: usize,
    /// One kernel set per layer shared by all heads, instead of one per head.
    pub share_heads: bool,
    pub placement: MaskPlacement,
    pub epsilon: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_side: 32,
            channels: 1,
            patch: 4,
            dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            classes: 4,
            mask: MaskMode::Gmm,
            kernels: 5,
            share_heads: false,
            placement: MaskPlacement::PreSoftmax,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl ModelConfig {
    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch.max(1)
    }

    pub fn patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_features(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Mask slots per layer.
    pub fn mask_slots(&self) -> usize {
        if self.share_heads {
            1
        } else {
            self.heads
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_side", self.image_side),
            ("channels", self.channels),
            ("patch", self.patch),
            ("dim", self.dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("classes", self.classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.image_side % self.patch != 0 {
            return Err(Error::InvalidArgument(format!(
                "image side {} not divisible by patch size {}",
                self.image_side, self.patch
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument("epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// Everything needed to reproduce a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub dataset: DatasetKind,
    /// Dataset root; empty means "use the environment default".
    pub data_dir: String,
    /// Training samples to use (synthetic: generated; CIFAR: first n, 0 = all).
    pub train_size: usize,
    pub test_size: usize,
    pub synth: SynthSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            dataset: DatasetKind::Synth,
            data_dir: String::new(),
            train_size: 2000,
            test_size: 500,
            synth: SynthSpec::default(),
            epochs: 10,
            batch_size: 64,
            lr: 1e-3,
            min_lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.05,
            augment: false,
            seed: 0,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidArgument(format!("bad boolean {value:?} for {key}"))),
    }
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let s = &mut self.synth;
        match key {
            "image_side" => m.image_side = parse_num(key, value)?,
            "channels" => m.channels = parse_num(key, value)?,
            "patch" => m.patch = parse_num(key, value)?,
            "dim" => m.dim = parse_num(key, value)?,
            "depth" => m.depth = parse_num(key, value)?,
            "heads" => m.heads = parse_num(key, value)?,
            "mlp_ratio" => m.mlp_ratio = parse_num(key, value)?,
            "classes" => m.classes = parse_num(key, value)?,
            "mask" => m.mask = value.parse()?,
            "kernels" => m.kernels = parse_num(key, value)?,
            "share_heads" => m.share_heads = parse_bool(key, value)?,
            "placement" => m.placement = parse_placement(value)?,
            "epsilon" => m.epsilon = parse_num(key, value)?,
            "dataset" => self.dataset = value.parse()?,
            "data_dir" => self.data_dir = value.to_string(),
            "train_size" => self.train_size = parse_num(key, value)?,
            "test_size" => self.test_size = parse_num(key, value)?,
            "synth_bars" => s.bars = parse_num(key, value)?,
            "synth_bar_length" => s.bar_length = parse_num(key, value)?,
            "synth_bar_width" => s.bar_width = parse_num(key, value)?,
            "synth_orientation_noise" => s.orientation_noise = parse_num(key, value)?,
            "synth_pixel_noise" => s.pixel_noise = parse_num(key, value)?,
            "synth_seed" => s.seed = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "min_lr" => self.min_lr = parse_num(key, value)?,
            "beta1" => self.beta1 = parse_num(key, value)?,
            "beta2" => self.beta2 = parse_num(key, value)?,
            "adam_eps" => self.adam_eps = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "warmup" => {
                if parse_num::<usize>(key, value)? != 0 {
                    return Err(Error::InvalidArgument("warmup is not supported; use 0".into()));
                }
            }
            _ => return Err(Error::InvalidArgument(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("config line {}: expected key = value", n + 1))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let s = &self.synth;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("image_side", m.image_side.to_string());
        kv("channels", m.channels.to_string());
        kv("patch", m.patch.to_string());
        kv("dim", m.dim.to_string());
        kv("depth", m.depth.to_string());
        kv("heads", m.heads.to_string());
        kv("mlp_ratio", m.mlp_ratio.to_string());
        kv("classes", m.classes.to_string());
        kv("mask", m.mask.as_str().into());
        kv("kernels", m.kernels.to_string());
        kv("share_heads", m.share_heads.to_string());
        kv("placement", placement_str(m.placement).into());
        kv("epsilon", m.epsilon.to_string());
        kv("dataset", self.dataset.as_str().into());
        kv("data_dir", self.data_dir.clone());
        kv("train_size", self.train_size.to_string());
        kv("test_size", self.test_size.to_string());
        kv("synth_bars", s.bars.to_string());
        kv("synth_bar_length", s.bar_length.to_string());
        kv("synth_bar_width", s.bar_width.to_string());
        kv("synth_orientation_noise", s.orientation_noise.to_string());
        kv("synth_pixel_noise", s.pixel_noise.to_string());
        kv("synth_seed", s.seed.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", self.lr.to_string());
        kv("min_lr", self.min_lr.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("adam_eps", self.adam_eps.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("augment", self.augment.to_string());
        kv("seed", self.seed.to_string());
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.min_lr >= 0.0) {
            return Err(Error::InvalidArgument("learning rates must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.lr = 3.3e-4;
        cfg.model.mask = MaskMode::Elm;
        cfg.model.placement = MaskPlacement::PostSoftmax;
        cfg.data_dir = "/data/cifar".into();
        cfg.synth.pixel_noise = 0.123456789012345;
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_unknown_keys() {
        let cfg = RunConfig::parse("# header\n\ndepth = 3  # deeper\nmask=none\n").unwrap();
        assert_eq!(cfg.model.depth, 3);
        assert_eq!(cfg.model.mask, MaskMode::None);
        assert!(RunConfig::parse("depht = 3").is_err());
        assert!(RunConfig::parse("depth 3").is_err());
        assert!(RunConfig::parse("depth = three").is_err());
        assert!(RunConfig::parse("warmup = 5").is_err());
    }

    #[test]
    fn validation() {
        let mut m = ModelConfig::default();
        assert!(m.validate().is_ok());
        m.image_side = 30;
        assert!(m.validate().is_err());
        let mut m = ModelConfig::default();
        m.heads = 3;
        assert!(m.validate().is_err());
    }

    #[test]
    fn derived_geometry() {
        let m = ModelConfig::default();
        assert_eq!(m.grid_side(), 8);
        assert_eq!(m.patches(), 64);
        let m = ModelConfig {
            image_side: 64,
            patch: 8,
            ..ModelConfig::default()
        };
        assert_eq!(m.patches(), 64);
    }
}
