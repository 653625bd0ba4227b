use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use super::RetrievalDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MASK_DIR: &str = "_masks";

/// A loaded folder dataset and the number of skipped non-image files.
#[derive(Debug)]
pub struct FolderLoad {
    pub dataset: RetrievalDataset,
    pub skipped: usize,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn read_rgb(path: &Path) -> std::result::Result<(u32, u32, Vec<f32>), image::ImageError> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let n = (w * h) as usize;
    let mut data = vec![0.0f32; 3 * n];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * n + i] = f32::from(px[c]) / 255.0;
        }
    }
    Ok((w, h, data))
}

fn read_gray(path: &Path) -> Result<Vec<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_luma8();
    Ok(img.pixels().map(|p| f32::from(p[0]) / 255.0).collect())
}

/// Loads `root/<class>/<image>` with labels in alphabetical class order; the
/// first half of the classes is seen. Masks under `root/_masks/<class>/` are
/// attached when every image has one.
pub fn load_image_folder(root: &Path) -> Result<FolderLoad> {
    let classes: Vec<PathBuf> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n != MASK_DIR))
        .collect();
    if classes.len() < 2 {
        return Err(Error::Ingestion(format!(
            "{} holds {} class directories, need at least 2",
            root.display(),
            classes.len()
        )));
    }
    let mut data = Vec::new();
    let mut masks = Vec::new();
    let mut have_masks = true;
    let mut labels = Vec::new();
    let mut names = Vec::new();
    let mut size: Option<(u32, u32)> = None;
    let mut skipped = 0;
    for (label, dir) in classes.iter().enumerate() {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut count = 0;
        for file in sorted_entries(dir)? {
            if !file.is_file() {
                continue;
            }
            let (w, h, pixels) = match read_rgb(&file) {
                Ok(v) => v,
                Err(e) => {
                    warn!("skipping {}: {e}", file.display());
                    skipped += 1;
                    continue;
                }
            };
            match size {
                None => size = Some((w, h)),
                Some(s) if s != (w, h) => {
                    return Err(Error::Ingestion(format!(
                        "{} is {w}×{h}, expected {}×{}",
                        file.display(),
                        s.0,
                        s.1
                    )))
                }
                _ => {}
            }
            if w != h {
                return Err(Error::Ingestion(format!(
                    "{} is {w}×{h}; images must be square",
                    file.display()
                )));
            }
            let mask_path = root
                .join(MASK_DIR)
                .join(&name)
                .join(file.file_name().expect("file has a name"));
            if have_masks && mask_path.is_file() {
                masks.extend(read_gray(&mask_path)?);
            } else {
                have_masks = false;
            }
            data.extend(pixels);
            labels.push(label);
            count += 1;
        }
        if count == 0 {
            return Err(Error::Ingestion(format!("class `{name}` contains no images")));
        }
        names.push(name);
    }
    if skipped > 0 {
        warn!("skipped {skipped} non-image files under {}", root.display());
    }
    let (w, _) = size.expect("at least one image");
    let (n, s) = (labels.len(), w as usize);
    let masks = have_masks
        .then(|| Tensor::new(vec![n, 1, s, s], masks))
        .transpose()?;
    let num_seen = names.len() / 2;
    Ok(FolderLoad {
        dataset: RetrievalDataset::new(
            Tensor::new(vec![n, 3, s, s], data)?,
            labels,
            names,
            num_seen,
            masks,
        )?,
        skipped,
    })
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an `(3, h, w)` slice as an 8-bit RGB PNG.
pub fn save_rgb_png(chw: &[f32], size: usize, path: &Path) -> Result<()> {
    let n = size * size;
    let mut buf = Vec::with_capacity(3 * n);
    for i in 0..n {
        for c in 0..3 {
            buf.push(to_u8(chw[c * n + i]));
        }
    }
    image::RgbImage::from_raw(size as u32, size as u32, buf)
        .expect("buffer sized from shape")
        .save(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
}

/// Exports a dataset as `root/<class>/<index>.png`, plus `root/_masks/...`
/// when part masks are present.
pub fn save_image_folder(dataset: &RetrievalDataset, root: &Path) -> Result<()> {
    let s = dataset.image_size();
    let per = 3 * s * s;
    let images = dataset.raw_images();
    let masks = dataset.raw_masks();
    for (i, &label) in dataset.labels().iter().enumerate() {
        let class = &dataset.class_names()[label];
        let dir = root.join(class);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let file = format!("{i:05}.png");
        save_rgb_png(&images.data()[i * per..(i + 1) * per], s, &dir.join(&file))?;
        if let Some(m) = masks {
            let mdir = root.join(MASK_DIR).join(class);
            fs::create_dir_all(&mdir).map_err(|e| Error::io(&mdir, e))?;
            let gray: Vec<u8> = m.data()[i * s * s..(i + 1) * s * s].iter().map(|&v| to_u8(v)).collect();
            let path = mdir.join(&file);
            image::GrayImage::from_raw(s as u32, s as u32, gray)
                .expect("buffer sized from shape")
                .save(&path)
                .map_err(|e| Error::Image { path, source: e })?;
        }
    }
    Ok(())
}
