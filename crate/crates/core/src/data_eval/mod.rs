//! Datasets with category-disjoint splits and the retrieval evaluation harness.

mod folder;
mod metrics;
mod synthetic;
mod viz;

use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use folder::{load_image_folder, save_image_folder, save_rgb_png, FolderLoad};
pub use metrics::{cosine_similarity_matrix, recall_at_k, similarity_grid, EvalReport, SimilarityGrid};
pub use synthetic::{generate_synthetic, SyntheticSpec};
pub use viz::{
    export_pattern_overlays, mask_localization, oracle_mask_ablation, pattern_masks, synthetic_for,
    LocalizationStats,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Seen,
    Unseen,
}

/// Images with labels, category names and a seen/unseen partition.
///
/// Labels below `num_seen` are seen (training) categories. While a training
/// lock is held, any attempt to read the unseen split fails.
#[derive(Debug)]
pub struct RetrievalDataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    class_names: Vec<String>,
    num_seen: usize,
    part_masks: Option<Tensor<f32>>,
    training: AtomicBool,
}

impl Clone for RetrievalDataset {
    fn clone(&self) -> Self {
        RetrievalDataset {
            images: self.images.clone(),
            labels: self.labels.clone(),
            class_names: self.class_names.clone(),
            num_seen: self.num_seen,
            part_masks: self.part_masks.clone(),
            training: AtomicBool::new(false),
        }
    }
}

/// Copy of one split's images (labels keep their global values).
#[derive(Clone, Debug)]
pub struct SplitView {
    pub split: Split,
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub part_masks: Option<Tensor<f32>>,
}

impl SplitView {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gathers rows `idx` of the images (and masks when present).
    pub fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Vec<usize>, Option<Tensor<f32>>) {
        (
            gather(&self.images, idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
            self.part_masks.as_ref().map(|m| gather(m, idx)),
        )
    }
}

/// Rows `idx` of `t` along axis 0, in the given order.
pub(crate) fn gather(t: &Tensor<f32>, idx: &[usize]) -> Tensor<f32> {
    let per = t.numel() / t.shape()[0];
    let mut data = Vec::with_capacity(per * idx.len());
    for &i in idx {
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data).expect("gathered rows")
}

/// Holds the dataset in training mode until dropped.
pub struct TrainingLock<'a> {
    flag: &'a AtomicBool,
}

impl Drop for TrainingLock<'_> {
    fn drop(&mut self) {
        self.flag.store(false, Ordering::SeqCst);
    }
}

impl RetrievalDataset {
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<usize>,
        class_names: Vec<String>,
        num_seen: usize,
        part_masks: Option<Tensor<f32>>,
    ) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[0] != labels.len() {
            return Err(Error::dim(
                "dataset",
                format!("{} labels for images of shape {s:?}", labels.len()),
            ));
        }
        if let Some(m) = &part_masks {
            if m.shape() != [s[0], 1, s[2], s[3]] {
                return Err(Error::dim(
                    "dataset",
                    format!("part masks {:?} do not match images {s:?}", m.shape()),
                ));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} has no class name ({} classes)",
                class_names.len()
            )));
        }
        if num_seen == 0 || num_seen >= class_names.len() {
            return Err(Error::InvalidArgument(format!(
                "need both seen and unseen classes, got {num_seen} seen of {}",
                class_names.len()
            )));
        }
        Ok(RetrievalDataset {
            images,
            labels,
            class_names,
            num_seen,
            part_masks,
            training: AtomicBool::new(false),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_seen(&self) -> usize {
        self.num_seen
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn has_part_masks(&self) -> bool {
        self.part_masks.is_some()
    }

    pub fn split_of(&self, label: usize) -> Split {
        if label < self.num_seen {
            Split::Seen
        } else {
            Split::Unseen
        }
    }

    /// Seen and unseen label sets.
    pub fn label_sets(&self) -> (Vec<usize>, Vec<usize>) {
        let seen = (0..self.num_seen).collect();
        let unseen = (self.num_seen..self.class_names.len()).collect();
        (seen, unseen)
    }

    /// Puts the dataset in training mode; unseen reads fail until the lock drops.
    pub fn lock_for_training(&self) -> Result<TrainingLock<'_>> {
        if self.training.swap(true, Ordering::SeqCst) {
            return Err(Error::ContractViolation("dataset is already locked for training".into()));
        }
        Ok(TrainingLock {
            flag: &self.training,
        })
    }

    pub fn is_training(&self) -> bool {
        self.training.load(Ordering::SeqCst)
    }

    pub fn view(&self, split: Split) -> Result<SplitView> {
        if split == Split::Unseen && self.is_training() {
            return Err(Error::ContractViolation(
                "unseen-split images requested while training".into(),
            ));
        }
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| self.split_of(self.labels[i]) == split)
            .collect();
        if idx.is_empty() {
            return Err(Error::InvalidArgument(format!("{split:?} split has no images")));
        }
        Ok(SplitView {
            split,
            images: gather(&self.images, &idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            part_masks: self.part_masks.as_ref().map(|m| gather(m, &idx)),
        })
    }

    /// Every image regardless of split; unavailable during training.
    pub fn all(&self) -> Result<SplitView> {
        if self.is_training() {
            return Err(Error::ContractViolation(
                "full dataset requested while training".into(),
            ));
        }
        Ok(SplitView {
            split: Split::Unseen,
            images: self.images.clone(),
            labels: self.labels.clone(),
            part_masks: self.part_masks.clone(),
        })
    }

    pub(crate) fn raw_images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub(crate) fn raw_masks(&self) -> Option<&Tensor<f32>> {
        self.part_masks.as_ref()
    }
}
