//! Toy-scale networks: retrieval backbone, pattern generators, classifier head,
//! and the reconstruction encoder/decoder.
//!
//! Parameters are partitioned into the retrieval side (backbone, live pattern
//! generator, classifier) and the reconstruction side (encoder, decoder). The
//! mean pattern generator belongs to neither and only changes through
//! [`crate::discrepancy::ema_update`].

mod recon;
mod retrieval;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Checkpoint, Element, ParamSet, ResizeMode, Tensor};

pub use recon::{ReconDecoder, ReconEncoder};
pub use retrieval::{ClassifierHead, MeanGenerator, PatternGenerator, RetrievalModel};

pub(crate) const LEAKY_SLOPE: f64 = 0.2;
pub(crate) const NORM_EPS: f64 = 1e-5;

/// Checkpoint section names, one per component.
pub mod sections {
    pub const RETRIEVAL: &str = "retrieval";
    pub const PATTERN_GEN: &str = "pattern_gen";
    pub const MEAN_GEN: &str = "mean_gen";
    pub const RECON_ENC: &str = "recon_enc";
    pub const RECON_DEC: &str = "recon_dec";
    pub const CLASSIFIER: &str = "classifier";
}

/// Architecture dimensions shared by every component.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub image_size: usize,
    pub image_channels: usize,
    /// Output widths of the first backbone blocks; the last block emits `feature_channels`.
    pub backbone_widths: Vec<usize>,
    /// One stride per backbone block (including the last).
    pub backbone_strides: Vec<usize>,
    pub feature_channels: usize,
    /// Stem width followed by the three block widths.
    pub encoder_widths: [usize; 4],
    pub encoder_channels: usize,
    pub decoder_depth: usize,
    pub decoder_width: usize,
    pub num_seen_classes: usize,
    pub resize_mode: ResizeMode,
    /// Std of the live pattern generator's initial weights. Zero gives a constant 0.5
    /// mask, which is a stationary point of the feedback game.
    pub pattern_init_std: f64,
    /// Initial bias of the live pattern generator. A negative value starts
    /// from a sparse mask.
    pub pattern_init_bias: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            image_size: 32,
            image_channels: 3,
            backbone_widths: vec![16, 32, 64],
            backbone_strides: vec![2, 2, 1, 1],
            feature_channels: 16,
            encoder_widths: [16, 16, 16, 16],
            encoder_channels: 16,
            decoder_depth: 4,
            decoder_width: 8,
            num_seen_classes: 8,
            resize_mode: ResizeMode::Bilinear,
            pattern_init_std: 0.5,
            pattern_init_bias: -2.0,
        }
    }
}

impl Architecture {
    /// Spatial side of the retrieval feature map `F`.
    pub fn feature_size(&self) -> usize {
        self.backbone_strides
            .iter()
            .fold(self.image_size, |s, &st| (s + 2 - 3) / st + 1)
    }

    /// Spatial side of the reconstruction encoder output.
    pub fn encoder_size(&self) -> usize {
        // stem and first block stride 2, remaining blocks stride 1
        [2usize, 2, 1, 1]
            .iter()
            .fold(self.image_size, |s, &st| (s + 2 - 3) / st + 1)
    }

    /// Startup validation of every cross-component constraint.
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if !(self.pattern_init_std >= 0.0 && self.pattern_init_std.is_finite() && self.pattern_init_bias.is_finite()) {
            return cfg(format!(
                "pattern generator init must be finite with std ≥ 0, got std {} bias {}",
                self.pattern_init_std, self.pattern_init_bias
            ));
        }
        if self.feature_channels != self.encoder_channels {
            return cfg(format!(
                "feature_channels ({}) must equal encoder_channels ({}) so the distillation target matches the embedding",
                self.feature_channels, self.encoder_channels
            ));
        }
        if self.backbone_strides.len() != self.backbone_widths.len() + 1 {
            return cfg(format!(
                "{} backbone strides for {} blocks",
                self.backbone_strides.len(),
                self.backbone_widths.len() + 1
            ));
        }
        if self.backbone_strides.iter().any(|&s| s == 0) {
            return cfg("backbone strides must be ≥ 1".into());
        }
        if self.decoder_depth == 0 || self.image_size % (1 << self.decoder_depth) != 0 {
            return cfg(format!(
                "image_size {} must be divisible by 2^decoder_depth = {}",
                self.image_size,
                1usize << self.decoder_depth.min(30)
            ));
        }
        let f = self.feature_size();
        if f < 4 {
            return cfg(format!("retrieval feature map is {f}×{f}, needs at least 4×4"));
        }
        if self.encoder_size() != f {
            return cfg(format!(
                "encoder output is {0}×{0} but retrieval features are {f}×{f}",
                self.encoder_size()
            ));
        }
        if self.num_seen_classes == 0 {
            return cfg("need at least one seen category".into());
        }
        if self.image_channels == 0 || self.decoder_width == 0 {
            return cfg("image_channels and decoder_width must be positive".into());
        }
        Ok(())
    }
}

/// He-normal conv kernel `(out, in, k, k)` plus zero bias `(1, out, 1, 1)`.
pub(crate) fn insert_conv<E: Element, R: Rng + ?Sized>(
    params: &mut ParamSet<E>,
    name: &str,
    out_ch: usize,
    in_ch: usize,
    k: usize,
    rng: &mut R,
) -> Result<()> {
    let std = (2.0 / (in_ch * k * k) as f64).sqrt();
    params.insert(
        format!("{name}.weight"),
        Tensor::randn(vec![out_ch, in_ch, k, k], std, rng),
    )?;
    params.insert(format!("{name}.bias"), Tensor::zeros(vec![1, out_ch, 1, 1]))
}

/// He-normal transposed-conv kernel `(in, out, k, k)` plus zero bias.
pub(crate) fn insert_conv_transpose<E: Element, R: Rng + ?Sized>(
    params: &mut ParamSet<E>,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    rng: &mut R,
) -> Result<()> {
    // each output pixel of a stride-2 transposed conv sees in_ch·k²/4 taps
    let std = (2.0 / (in_ch * k * k / 4).max(1) as f64).sqrt();
    params.insert(
        format!("{name}.weight"),
        Tensor::randn(vec![in_ch, out_ch, k, k], std, rng),
    )?;
    params.insert(format!("{name}.bias"), Tensor::zeros(vec![1, out_ch, 1, 1]))
}

/// The six components trained (or tracked) together.
#[derive(Clone, Debug)]
pub struct AdvrfModels<E: Element = f32> {
    pub arch: Architecture,
    pub retrieval: RetrievalModel<E>,
    pub pattern_gen: PatternGenerator<E>,
    pub mean_gen: MeanGenerator<E>,
    pub classifier: ClassifierHead<E>,
    pub recon_enc: ReconEncoder<E>,
    pub recon_dec: ReconDecoder<E>,
}

impl<E: Element> AdvrfModels<E> {
    pub fn new<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let retrieval = RetrievalModel::new(arch, rng)?;
        let pattern_gen = PatternGenerator::new(arch, rng)?;
        let mean_gen = MeanGenerator::from_live(&pattern_gen);
        let classifier = ClassifierHead::new(arch, rng)?;
        let recon_enc = ReconEncoder::new(arch, rng)?;
        let recon_dec = ReconDecoder::new(arch, rng)?;
        Ok(AdvrfModels {
            arch: arch.clone(),
            retrieval,
            pattern_gen,
            mean_gen,
            classifier,
            recon_enc,
            recon_dec,
        })
    }

    /// Hash of every retrieval-side parameter.
    pub fn retrieval_side_hash(&self) -> u64 {
        combine(&[
            self.retrieval.params.content_hash(),
            self.pattern_gen.params.content_hash(),
            self.classifier.params.content_hash(),
        ])
    }

    /// Hash of every reconstruction-side parameter.
    pub fn recon_side_hash(&self) -> u64 {
        combine(&[
            self.recon_enc.params.content_hash(),
            self.recon_dec.params.content_hash(),
        ])
    }

    pub fn mean_gen_hash(&self) -> u64 {
        self.mean_gen.params().content_hash()
    }

    pub fn set_retrieval_frozen(&mut self, frozen: bool) {
        for p in [
            &mut self.retrieval.params,
            &mut self.pattern_gen.params,
            &mut self.classifier.params,
        ] {
            if frozen {
                p.freeze()
            } else {
                p.unfreeze()
            }
        }
    }

    pub fn set_recon_frozen(&mut self, frozen: bool) {
        for p in [&mut self.recon_enc.params, &mut self.recon_dec.params] {
            if frozen {
                p.freeze()
            } else {
                p.unfreeze()
            }
        }
    }

    pub fn retrieval_frozen(&self) -> bool {
        self.retrieval.params.is_frozen()
            && self.pattern_gen.params.is_frozen()
            && self.classifier.params.is_frozen()
    }

    pub fn recon_frozen(&self) -> bool {
        self.recon_enc.params.is_frozen() && self.recon_dec.params.is_frozen()
    }

    /// Retrieval-side parameter sets with their section names.
    pub fn retrieval_sets(&self) -> [(&'static str, &ParamSet<E>); 3] {
        [
            (sections::RETRIEVAL, &self.retrieval.params),
            (sections::PATTERN_GEN, &self.pattern_gen.params),
            (sections::CLASSIFIER, &self.classifier.params),
        ]
    }

    pub fn recon_sets(&self) -> [(&'static str, &ParamSet<E>); 2] {
        [
            (sections::RECON_ENC, &self.recon_enc.params),
            (sections::RECON_DEC, &self.recon_dec.params),
        ]
    }

    /// Writes all six components into `ckpt`, optimizer buffers included.
    pub fn write_checkpoint(&self, ckpt: &mut Checkpoint) {
        let sets = self
            .retrieval_sets()
            .into_iter()
            .chain(self.recon_sets())
            .chain([(sections::MEAN_GEN, self.mean_gen.params())]);
        for (section, params) in sets {
            ckpt.insert_params(section, params);
            if let Some(buffers) = params.momentum_buffers() {
                for (name, buf) in buffers {
                    let shape = params.get(name).expect("buffer mirrors entry").shape().to_vec();
                    let data = buf.iter().map(|v| v.to_f64_lossy() as f32).collect();
                    ckpt.insert_tensor(
                        format!("optim.{section}/{name}"),
                        Tensor::new(shape, data).expect("buffer shape"),
                    );
                }
            }
        }
    }

    /// Restores every component present in `ckpt`. Reconstruction sections are
    /// optional unless `require_recon` is set.
    pub fn read_checkpoint(&mut self, ckpt: &Checkpoint, require_recon: bool) -> Result<()> {
        ckpt.restore_params(sections::RETRIEVAL, &mut self.retrieval.params)?;
        ckpt.restore_params(sections::PATTERN_GEN, &mut self.pattern_gen.params)?;
        ckpt.restore_params(sections::CLASSIFIER, &mut self.classifier.params)?;
        if ckpt.has_section(sections::MEAN_GEN) {
            ckpt.restore_params(sections::MEAN_GEN, self.mean_gen.params_mut())?;
        } else {
            self.mean_gen = MeanGenerator::from_live(&self.pattern_gen);
        }
        for (section, params) in [
            (sections::RECON_ENC, &mut self.recon_enc.params),
            (sections::RECON_DEC, &mut self.recon_dec.params),
        ] {
            if ckpt.has_section(section) {
                ckpt.restore_params(section, params)?;
            } else if require_recon {
                return Err(Error::Checkpoint(format!("missing section `{section}`")));
            }
        }
        let sets: [(&str, &mut ParamSet<E>); 5] = [
            (sections::RETRIEVAL, &mut self.retrieval.params),
            (sections::PATTERN_GEN, &mut self.pattern_gen.params),
            (sections::CLASSIFIER, &mut self.classifier.params),
            (sections::RECON_ENC, &mut self.recon_enc.params),
            (sections::RECON_DEC, &mut self.recon_dec.params),
        ];
        for (section, params) in sets {
            let prefix = format!("optim.{section}");
            if !ckpt.has_section(&prefix) {
                params.set_momentum_buffers(None);
                continue;
            }
            let mut buffers = indexmap::IndexMap::new();
            for (name, _) in params.iter() {
                if let Some(t) = ckpt.tensor(&format!("{prefix}/{name}")) {
                    let v = t.data().iter().map(|&x| E::from_f64_lossy(f64::from(x))).collect();
                    buffers.insert(name.to_string(), v);
                }
            }
            params.set_momentum_buffers(Some(buffers));
        }
        Ok(())
    }

    /// Copies the model into another precision (used by 64-bit gradient checks).
    pub fn cast<F: Element>(&self) -> AdvrfModels<F> {
        AdvrfModels {
            arch: self.arch.clone(),
            retrieval: self.retrieval.cast(),
            pattern_gen: self.pattern_gen.cast(),
            mean_gen: self.mean_gen.cast(),
            classifier: self.classifier.cast(),
            recon_enc: self.recon_enc.cast(),
            recon_dec: self.recon_dec.cast(),
        }
    }
}

fn combine(hashes: &[u64]) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    hashes.hash(&mut h);
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_architecture_is_valid() {
        let a = Architecture::default();
        a.validate().unwrap();
        assert_eq!(a.feature_size(), 8);
        assert_eq!(a.encoder_size(), 8);
    }

    #[test]
    fn channel_disagreement_rejected() {
        let a = Architecture {
            encoder_channels: 8,
            ..Architecture::default()
        };
        assert!(matches!(a.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn depth_must_divide_image() {
        let a = Architecture {
            decoder_depth: 6,
            ..Architecture::default()
        };
        assert!(a.validate().is_err());
    }

    #[test]
    fn tiny_feature_maps_rejected() {
        let a = Architecture {
            backbone_strides: vec![2, 2, 2, 2],
            ..Architecture::default()
        };
        assert!(a.validate().is_err());
    }
}
