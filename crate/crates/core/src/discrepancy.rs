//! Discrepancy acquisition: mask production through the mean generator,
//! temporal averaging, amplification to image resolution, decomposition and
//! the distillation loss `L_P`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{MeanGenerator, PatternGenerator};
use crate::tensor::{batch_masked_frobenius, Element, NormScaling, ResizeMode, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resolution {
    Feature,
    Image,
}

/// Single-channel soft mask `(N, 1, h, w)` tagged with its resolution.
#[derive(Clone, Copy)]
pub struct PatternMap<'g, E: Element> {
    pub values: Var<'g, E>,
    pub resolution: Resolution,
}

impl<'g, E: Element> PatternMap<'g, E> {
    pub fn new(values: Var<'g, E>, resolution: Resolution) -> Result<Self> {
        let s = values.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::dim(
                "pattern map",
                format!("expected (N, 1, h, w), got {s:?}"),
            ));
        }
        Ok(PatternMap { values, resolution })
    }
}

/// `c_a = F_I ⊙ M` and `c_r = F_I ⊙ (1 − M)`.
#[derive(Clone, Copy)]
pub struct DiscrepancyPair<'g, E: Element> {
    pub c_a: Var<'g, E>,
    pub c_r: Var<'g, E>,
}

/// `M̂ = σ(E(T)(F))` at feature resolution.
pub fn pattern_map<'g, E: Element>(
    f: Var<'g, E>,
    gen: &MeanGenerator<E>,
) -> Result<PatternMap<'g, E>> {
    PatternMap::new(gen.forward(f.graph(), f)?, Resolution::Feature)
}

/// `θ_mean ← (1 − δ)·θ_mean + δ·θ_live` for every entry, evaluated as
/// `θ_mean + δ·(θ_live − θ_mean)` so a converged pair stays bit-identical.
pub fn ema_update<E: Element>(
    mean: &mut MeanGenerator<E>,
    live: &PatternGenerator<E>,
    delta: f64,
) -> Result<()> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "EMA ratio must lie in (0, 1], got {delta}"
        )));
    }
    let d = E::from_f64_lossy(delta);
    for (name, t) in mean.params_mut().iter_mut() {
        let src = live
            .params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("live generator lacks `{name}`")))?;
        if src.shape() != t.shape() {
            return Err(Error::dim(
                "ema_update",
                format!("`{name}`: {:?} vs {:?}", t.shape(), src.shape()),
            ));
        }
        if delta == 1.0 {
            t.data_mut().copy_from_slice(src.data());
            continue;
        }
        for (m, &l) in t.data_mut().iter_mut().zip(src.data()) {
            *m += d * (l - *m);
        }
    }
    Ok(())
}

/// Resizes the mask and the encoder output to image resolution.
pub fn amplify<'g, E: Element>(
    m_hat: PatternMap<'g, E>,
    f_hat_i: Var<'g, E>,
    img_h: usize,
    img_w: usize,
    mode: ResizeMode,
) -> Result<(PatternMap<'g, E>, Var<'g, E>)> {
    if m_hat.resolution != Resolution::Feature {
        return Err(Error::ContractViolation(
            "amplify expects a feature-resolution pattern map".into(),
        ));
    }
    let (ms, fs) = (m_hat.values.shape(), f_hat_i.shape());
    if ms[2..] != fs[2..] {
        return Err(Error::dim(
            "amplify",
            format!("mask {ms:?} and encoder output {fs:?} disagree spatially"),
        ));
    }
    let m = m_hat.values.upsample(img_h, img_w, mode)?;
    let f = f_hat_i.upsample(img_h, img_w, mode)?;
    Ok((PatternMap::new(m, Resolution::Image)?, f))
}

pub fn decompose<'g, E: Element>(
    f_i: Var<'g, E>,
    m: &PatternMap<'g, E>,
) -> Result<DiscrepancyPair<'g, E>> {
    if m.resolution != Resolution::Image {
        return Err(Error::ContractViolation(
            "decompose expects an image-resolution pattern map".into(),
        ));
    }
    let (fs, ms) = (f_i.shape(), m.values.shape());
    if fs.len() != 4 || fs[0] != ms[0] || fs[2..] != ms[2..] {
        return Err(Error::dim(
            "decompose",
            format!("representation {fs:?} vs mask {ms:?}"),
        ));
    }
    Ok(DiscrepancyPair {
        c_a: f_i.mul(m.values)?,
        c_r: f_i.mul(m.values.one_minus())?,
    })
}

/// `L_P = ‖E_R − g(C_A)‖` with the pooled target detached.
pub fn parameterization_loss<'g, E: Element>(
    e_r: Var<'g, E>,
    c_a: Var<'g, E>,
    scaling: NormScaling,
) -> Result<Var<'g, E>> {
    let target = c_a.global_average_pool()?.detach();
    if target.shape() != e_r.shape() {
        return Err(Error::dim(
            "parameterization_loss",
            format!("embedding {:?} vs pooled target {:?}", e_r.shape(), target.shape()),
        ));
    }
    batch_masked_frobenius(e_r, target, None, scaling)
}

/// Writes one `(1, h, w)` map as an 8-bit grayscale PNG (values ×255).
pub fn save_mask_png<E: Element>(mask: &Tensor<E>, path: &Path) -> Result<()> {
    let s = mask.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let pixels: Vec<u8> = mask.data()[..h * w]
        .iter()
        .map(|v| (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::GrayImage::from_raw(w as u32, h as u32, pixels)
        .expect("buffer sized from shape")
        .save(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
}
