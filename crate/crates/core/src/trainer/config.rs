use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::data_eval::SyntheticSpec;
use crate::error::{Error, Result};
use crate::models::Architecture;
use crate::tensor::{NormScaling, ResizeMode};

/// Which objectives drive training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    /// Alternating reconstruction/retrieval feedback.
    Advrf,
    /// Cross-entropy on seen categories only.
    Classification,
    /// Whole-image autoencoder; embeddings come from the encoder.
    ReconOnly,
    /// The reconstruction model rebuilds `X` from `c_a` under a full mask and
    /// both sides minimize that error (no opposing-region objective).
    NonAdversarial,
}

/// Where the image-resolution mask comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSource {
    Learned,
    /// Ground-truth part masks of the synthetic dataset.
    Oracle,
    Ones,
    Half,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    Batch,
    Epoch,
}

macro_rules! str_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    _ => Err(format!("expected one of {}", [$($name),+].join(", "))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $name,)+ })
            }
        }
    };
}

str_enum!(Regime { Advrf => "advrf", Classification => "classification", ReconOnly => "recon_only", NonAdversarial => "non_adversarial" });
str_enum!(MaskSource { Learned => "learned", Oracle => "oracle", Ones => "ones", Half => "half" });
str_enum!(Granularity { Batch => "batch", Epoch => "epoch" });

/// Every training, architecture and synthetic-data knob.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub warmup_epochs: usize,
    /// Evaluate unseen Recall@K every this many epochs (0 disables).
    pub eval_every: usize,
    /// Write a checkpoint every this many epochs (0 writes only the final one).
    pub checkpoint_every: usize,

    pub image_size: usize,
    pub backbone_widths: Vec<usize>,
    pub backbone_strides: Vec<usize>,
    pub feature_channels: usize,
    pub encoder_widths: [usize; 4],
    pub encoder_channels: usize,
    pub decoder_depth: usize,
    pub decoder_width: usize,
    pub pattern_init_std: f64,
    pub pattern_init_bias: f64,
    pub resize_mode: ResizeMode,

    pub norm_normalize: bool,
    pub norm_scaling: NormScaling,
    pub live_gen_aux_loss: bool,
    pub alternate_granularity: Granularity,
    pub regime: Regime,
    pub mask_source: MaskSource,
    pub use_l_g_a: bool,
    pub use_l_g_r: bool,
    pub use_l_r_a: bool,
    pub use_l_r_r: bool,
    pub use_l_p: bool,

    pub num_categories: usize,
    pub images_per_category: usize,
    pub base_shapes: usize,
    pub part_variation_scale: f64,
    pub background_clutter: f64,
    pub data_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let arch = Architecture::default();
        let data = SyntheticSpec::default();
        TrainConfig {
            alpha: 0.7,
            beta: 0.5,
            gamma: 0.6,
            delta: 0.2,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay_factor: 0.9,
            lr_decay_every_epochs: 5,
            epochs: 60,
            batch_size: 32,
            seed: 0,
            warmup_epochs: 1,
            eval_every: 0,
            checkpoint_every: 0,
            image_size: arch.image_size,
            backbone_widths: arch.backbone_widths,
            backbone_strides: arch.backbone_strides,
            feature_channels: arch.feature_channels,
            encoder_widths: arch.encoder_widths,
            encoder_channels: arch.encoder_channels,
            decoder_depth: arch.decoder_depth,
            decoder_width: arch.decoder_width,
            pattern_init_std: arch.pattern_init_std,
            pattern_init_bias: arch.pattern_init_bias,
            resize_mode: arch.resize_mode,
            norm_normalize: true,
            norm_scaling: NormScaling::Rms,
            live_gen_aux_loss: true,
            alternate_granularity: Granularity::Batch,
            regime: Regime::Advrf,
            mask_source: MaskSource::Learned,
            use_l_g_a: true,
            use_l_g_r: true,
            use_l_r_a: true,
            use_l_r_r: true,
            use_l_p: true,
            num_categories: data.num_categories,
            images_per_category: data.images_per_category,
            base_shapes: data.base_shapes,
            part_variation_scale: data.part_variation_scale,
            background_clutter: data.background_clutter,
            data_seed: data.seed,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value `{value}` for `{key}`: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|v| parse::<usize>(key, v.trim()))
        .collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Named starting points: `desk_default` (the acceptance configuration)
    /// and `smoke` (seconds-long runs for tests).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk_default" => Ok(TrainConfig::default()),
            "smoke" => Ok(TrainConfig {
                epochs: 2,
                batch_size: 8,
                num_categories: 4,
                images_per_category: 8,
                backbone_widths: vec![4, 8, 8],
                feature_channels: 4,
                encoder_channels: 4,
                encoder_widths: [4, 4, 4, 4],
                decoder_width: 4,
                decoder_depth: 2,
                image_size: 16,
                ..TrainConfig::default()
            }),
            _ => Err(Error::Config(format!(
                "unknown preset `{name}` (expected desk_default or smoke)"
            ))),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "alpha" => self.alpha = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "delta" => self.delta = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "lr_decay_factor" => self.lr_decay_factor = parse(key, v)?,
            "lr_decay_every_epochs" => self.lr_decay_every_epochs = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            "backbone_widths" => self.backbone_widths = parse_list(key, v)?,
            "backbone_strides" => self.backbone_strides = parse_list(key, v)?,
            "feature_channels" => self.feature_channels = parse(key, v)?,
            "encoder_widths" => {
                let w = parse_list(key, v)?;
                self.encoder_widths = w.try_into().map_err(|w: Vec<usize>| {
                    Error::Config(format!("`encoder_widths` needs 4 values, got {}", w.len()))
                })?;
            }
            "encoder_channels" => self.encoder_channels = parse(key, v)?,
            "decoder_depth" => self.decoder_depth = parse(key, v)?,
            "decoder_width" => self.decoder_width = parse(key, v)?,
            "pattern_init_std" => self.pattern_init_std = parse(key, v)?,
            "pattern_init_bias" => self.pattern_init_bias = parse(key, v)?,
            "resize_mode" => self.resize_mode = parse(key, v)?,
            "norm_normalize" => self.norm_normalize = parse(key, v)?,
            "norm_scaling" => self.norm_scaling = parse(key, v)?,
            "live_gen_aux_loss" => self.live_gen_aux_loss = parse(key, v)?,
            "alternate_granularity" => self.alternate_granularity = parse(key, v)?,
            "regime" => self.regime = parse(key, v)?,
            "mask_source" => self.mask_source = parse(key, v)?,
            "use_l_g_a" => self.use_l_g_a = parse(key, v)?,
            "use_l_g_r" => self.use_l_g_r = parse(key, v)?,
            "use_l_r_a" => self.use_l_r_a = parse(key, v)?,
            "use_l_r_r" => self.use_l_r_r = parse(key, v)?,
            "use_l_p" => self.use_l_p = parse(key, v)?,
            "num_categories" => self.num_categories = parse(key, v)?,
            "images_per_category" => self.images_per_category = parse(key, v)?,
            "base_shapes" => self.base_shapes = parse(key, v)?,
            "part_variation_scale" => self.part_variation_scale = parse(key, v)?,
            "background_clutter" => self.background_clutter = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            _ => return Err(Error::UnknownConfigKey(key.to_string())),
        }
        Ok(())
    }

    /// Every field as `(key, value)` in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("gamma", self.gamma.to_string()),
            ("delta", self.delta.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("lr_decay_factor", self.lr_decay_factor.to_string()),
            ("lr_decay_every_epochs", self.lr_decay_every_epochs.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("image_size", self.image_size.to_string()),
            ("backbone_widths", join(&self.backbone_widths)),
            ("backbone_strides", join(&self.backbone_strides)),
            ("feature_channels", self.feature_channels.to_string()),
            ("encoder_widths", join(&self.encoder_widths)),
            ("encoder_channels", self.encoder_channels.to_string()),
            ("decoder_depth", self.decoder_depth.to_string()),
            ("decoder_width", self.decoder_width.to_string()),
            ("pattern_init_std", self.pattern_init_std.to_string()),
            ("pattern_init_bias", self.pattern_init_bias.to_string()),
            ("resize_mode", self.resize_mode.to_string()),
            ("norm_normalize", self.norm_normalize.to_string()),
            ("norm_scaling", self.norm_scaling.to_string()),
            ("live_gen_aux_loss", self.live_gen_aux_loss.to_string()),
            ("alternate_granularity", self.alternate_granularity.to_string()),
            ("regime", self.regime.to_string()),
            ("mask_source", self.mask_source.to_string()),
            ("use_l_g_a", self.use_l_g_a.to_string()),
            ("use_l_g_r", self.use_l_g_r.to_string()),
            ("use_l_r_a", self.use_l_r_a.to_string()),
            ("use_l_r_r", self.use_l_r_r.to_string()),
            ("use_l_p", self.use_l_p.to_string()),
            ("num_categories", self.num_categories.to_string()),
            ("images_per_category", self.images_per_category.to_string()),
            ("base_shapes", self.base_shapes.to_string()),
            ("part_variation_scale", self.part_variation_scale.to_string()),
            ("background_clutter", self.background_clutter.to_string()),
            ("data_seed", self.data_seed.to_string()),
        ]
    }

    /// Parses `key=value` lines; `#` starts a comment. A leading
    /// `preset=<name>` line selects the base configuration.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen_other = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1))
            })?;
            let key = key.trim();
            if key == "preset" {
                if seen_other {
                    return Err(Error::Config("`preset` must come before other keys".into()));
                }
                cfg = TrainConfig::preset(value.trim())?;
                continue;
            }
            seen_other = true;
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Single-line form used inside checkpoint metadata.
    pub fn to_compact(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn from_compact(s: &str) -> Result<Self> {
        Self::parse_str(&s.replace(';', "\n"))
    }

    pub fn architecture(&self, num_seen_classes: usize) -> Architecture {
        Architecture {
            image_size: self.image_size,
            image_channels: 3,
            backbone_widths: self.backbone_widths.clone(),
            backbone_strides: self.backbone_strides.clone(),
            feature_channels: self.feature_channels,
            encoder_widths: self.encoder_widths,
            encoder_channels: self.encoder_channels,
            decoder_depth: self.decoder_depth,
            decoder_width: self.decoder_width,
            num_seen_classes,
            resize_mode: self.resize_mode,
            pattern_init_std: self.pattern_init_std,
            pattern_init_bias: self.pattern_init_bias,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_categories: self.num_categories,
            images_per_category: self.images_per_category,
            image_size: self.image_size,
            base_shapes: self.base_shapes,
            part_variation_scale: self.part_variation_scale,
            background_clutter: self.background_clutter,
            seed: self.data_seed,
        }
    }

    /// Norm scaling in effect (`norm_normalize = false` means no size normalization).
    pub fn scaling(&self) -> NormScaling {
        if self.norm_normalize {
            self.norm_scaling
        } else {
            NormScaling::None
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        for (k, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return cfg(format!("`{k}` must be a finite non-negative weight, got {v}"));
            }
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return cfg(format!("`delta` must lie in (0, 1], got {}", self.delta));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return cfg(format!("`lr` must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return cfg("`momentum` must lie in [0, 1) and `weight_decay` be ≥ 0".into());
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return cfg(format!(
                "`lr_decay_factor` must lie in (0, 1], got {}",
                self.lr_decay_factor
            ));
        }
        if self.lr_decay_every_epochs == 0 || self.batch_size == 0 {
            return cfg("`lr_decay_every_epochs` and `batch_size` must be positive".into());
        }
        self.architecture(1).validate()
    }
}
