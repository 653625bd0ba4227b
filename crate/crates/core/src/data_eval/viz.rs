use std::fs;
use std::path::Path;

use super::folder::save_rgb_png;
use super::{generate_synthetic, EvalReport, RetrievalDataset, Split};
use crate::discrepancy::{pattern_map, save_mask_png};
use crate::error::{Error, Result};
use crate::models::AdvrfModels;
use crate::tensor::{Graph, Tensor};
use crate::trainer::{self, MaskSource, TrainConfig};

/// Image-resolution masks `(N, 1, H, W)` from the mean generator.
pub fn pattern_masks(models: &AdvrfModels<f32>, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = images.shape();
    let mut parts = Vec::new();
    for start in (0..s[0]).step_by(64) {
        let idx: Vec<usize> = (start..(start + 64).min(s[0])).collect();
        let g = Graph::new();
        let p = models.retrieval.params.bind_untracked(&g);
        let (f, _) = models
            .retrieval
            .forward(&p, g.constant(super::gather(images, &idx)))?;
        let m = pattern_map(f, &models.mean_gen)?
            .values
            .upsample(s[2], s[3], models.arch.resize_mode)?;
        parts.push((*m.value()).clone());
    }
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    Tensor::stack(&refs)
}

/// Writes `{i}_input.png`, `{i}_mask.png` and `{i}_overlay.png` per image; the
/// overlay blends the input towards red by the mask value.
pub fn export_pattern_overlays(models: &AdvrfModels<f32>, images: &Tensor<f32>, out_dir: &Path) -> Result<usize> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let masks = pattern_masks(models, images)?;
    let s = images.shape()[2];
    let n = s * s;
    for i in 0..images.shape()[0] {
        let img = &images.data()[i * 3 * n..(i + 1) * 3 * n];
        let m = &masks.data()[i * n..(i + 1) * n];
        save_rgb_png(img, s, &out_dir.join(format!("{i}_input.png")))?;
        save_mask_png(&masks.select(i), &out_dir.join(format!("{i}_mask.png")))?;
        let mut overlay = img.to_vec();
        for (p, &a) in m.iter().enumerate() {
            let a = 0.6 * a;
            overlay[p] = overlay[p] * (1.0 - a) + a;
            overlay[n + p] *= 1.0 - a;
            overlay[2 * n + p] *= 1.0 - a;
        }
        save_rgb_png(&overlay, s, &out_dir.join(format!("{i}_overlay.png")))?;
    }
    Ok(3 * images.shape()[0])
}

/// Mean mask value inside and outside ground-truth part regions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalizationStats {
    pub inside: f64,
    pub outside: f64,
    /// `inside / outside`
    pub ratio: f64,
}

pub fn mask_localization(
    models: &AdvrfModels<f32>,
    images: &Tensor<f32>,
    part_masks: &Tensor<f32>,
) -> Result<LocalizationStats> {
    let masks = pattern_masks(models, images)?;
    if masks.shape() != part_masks.shape() {
        return Err(Error::dim(
            "mask_localization",
            format!("pattern maps {:?} vs part masks {:?}", masks.shape(), part_masks.shape()),
        ));
    }
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (&m, &gt) in masks.data().iter().zip(part_masks.data()) {
        if gt >= 0.5 {
            si += f64::from(m);
            ni += 1;
        } else {
            so += f64::from(m);
            no += 1;
        }
    }
    if ni == 0 || no == 0 {
        return Err(Error::InvalidArgument(
            "part masks must contain both part and background pixels".into(),
        ));
    }
    let (inside, outside) = (si / ni as f64, so / no as f64);
    Ok(LocalizationStats {
        inside,
        outside,
        ratio: inside / outside,
    })
}

/// Trains with the mask fixed to the ground-truth part masks and reports
/// unseen Recall@K.
pub fn oracle_mask_ablation(dataset: &RetrievalDataset, config: &TrainConfig) -> Result<EvalReport> {
    if !dataset.has_part_masks() {
        return Err(Error::InvalidArgument(
            "oracle mask ablation needs a dataset with ground-truth part masks".into(),
        ));
    }
    let cfg = TrainConfig {
        mask_source: MaskSource::Oracle,
        ..config.clone()
    };
    let outcome = trainer::train(&cfg, dataset, None)?;
    trainer::evaluate(&outcome.state, dataset, Split::Unseen, &trainer::EVAL_KS)
}

/// Synthetic dataset described by `config`'s data keys.
pub fn synthetic_for(config: &TrainConfig) -> Result<RetrievalDataset> {
    generate_synthetic(&config.synthetic_spec())
}
