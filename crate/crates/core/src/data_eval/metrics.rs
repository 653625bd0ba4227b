use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Recall@K over leave-one-out queries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub recall_at_k: BTreeMap<usize, f64>,
    /// Queries whose class has a single exemplar; they are left out of the mean.
    pub excluded_queries: usize,
    pub evaluated_queries: usize,
    /// Top-`max K` gallery indices per query, nearest first.
    pub nearest: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at_k.get(&k).copied()
    }
}

fn rows(t: &Tensor<f32>) -> Result<(usize, usize)> {
    if t.dims() != 2 {
        return Err(Error::dim(
            "embeddings",
            format!("expected (N, C), got {:?}", t.shape()),
        ));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn normalized(t: &Tensor<f32>, what: &str) -> Result<Vec<f64>> {
    let (n, c) = rows(t)?;
    let mut out = Vec::with_capacity(n * c);
    for i in 0..n {
        let row = &t.data()[i * c..(i + 1) * c];
        let norm = row.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "{what} row {i} has zero or non-finite norm"
            )));
        }
        out.extend(row.iter().map(|&v| f64::from(v) / norm));
    }
    Ok(out)
}

/// Row-major `A·Bᵀ` over L2-normalized rows.
pub fn cosine_similarity_matrix(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
    let (na, ca) = rows(a)?;
    let (nb, cb) = rows(b)?;
    if ca != cb {
        return Err(Error::dim(
            "cosine_similarity_matrix",
            format!("{ca} vs {cb} columns"),
        ));
    }
    let an = normalized(a, "left")?;
    let bn = normalized(b, "right")?;
    Ok((0..na)
        .map(|i| {
            let ra = &an[i * ca..(i + 1) * ca];
            (0..nb)
                .map(|j| {
                    let dot: f64 = ra.iter().zip(&bn[j * ca..(j + 1) * ca]).map(|(x, y)| x * y).sum();
                    dot.clamp(-1.0, 1.0)
                })
                .collect()
        })
        .collect())
}

/// Leave-one-out Recall@K with cosine similarity. Ties are broken by lower
/// gallery index.
pub fn recall_at_k(embeddings: &Tensor<f32>, labels: &[usize], ks: &[usize]) -> Result<EvalReport> {
    let (n, _) = rows(embeddings)?;
    if labels.len() != n {
        return Err(Error::dim(
            "recall_at_k",
            format!("{n} embeddings, {} labels", labels.len()),
        ));
    }
    let mut ks: Vec<usize> = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let max_k = *ks
        .last()
        .ok_or_else(|| Error::InvalidArgument("no K values given".into()))?;
    if ks[0] == 0 {
        return Err(Error::InvalidArgument("K must be ≥ 1".into()));
    }
    if n < max_k + 1 {
        return Err(Error::InvalidArgument(format!(
            "Recall@{max_k} needs at least {} samples, got {n}",
            max_k + 1
        )));
    }
    let sim = cosine_similarity_matrix(embeddings, embeddings)?;
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let ranked: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|q| {
            let mut order: Vec<usize> = (0..n).filter(|&j| j != q).collect();
            order.sort_by(|&a, &b| sim[q][b].total_cmp(&sim[q][a]).then(a.cmp(&b)));
            order.truncate(max_k);
            order
        })
        .collect();
    let mut hits = vec![0usize; ks.len()];
    let mut report = EvalReport::default();
    for (q, order) in ranked.into_iter().enumerate() {
        if counts[&labels[q]] < 2 {
            report.excluded_queries += 1;
            report.nearest.push(order);
            continue;
        }
        report.evaluated_queries += 1;
        let first_hit = order.iter().position(|&j| labels[j] == labels[q]);
        for (h, &k) in hits.iter_mut().zip(&ks) {
            if first_hit.is_some_and(|p| p < k) {
                *h += 1;
            }
        }
        report.nearest.push(order);
    }
    if report.excluded_queries > 0 {
        log::warn!(
            "{} of {n} queries excluded: their class has a single exemplar",
            report.excluded_queries
        );
    }
    if report.evaluated_queries > 0 {
        for (&k, &h) in ks.iter().zip(&hits) {
            report
                .recall_at_k
                .insert(k, h as f64 / report.evaluated_queries as f64);
        }
    }
    Ok(report)
}

/// Class-sorted cosine grid with its block-diagonal dominance.
#[derive(Clone, Debug)]
pub struct SimilarityGrid {
    pub matrix: Vec<Vec<f64>>,
    /// Source row of each grid position.
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    /// Mean off-diagonal similarity within classes.
    pub within: f64,
    /// Mean similarity across classes.
    pub cross: f64,
    pub dominance: f64,
}

/// Takes the first `per_class` samples of the first `num_classes` labels (in
/// ascending label order) and builds their similarity grid.
pub fn similarity_grid(
    embeddings: &Tensor<f32>,
    labels: &[usize],
    num_classes: usize,
    per_class: usize,
) -> Result<SimilarityGrid> {
    let (n, _) = rows(embeddings)?;
    if labels.len() != n {
        return Err(Error::dim("similarity_grid", format!("{n} embeddings, {} labels", labels.len())));
    }
    if num_classes < 2 || per_class < 2 {
        return Err(Error::InvalidArgument(
            "similarity grid needs at least 2 classes with 2 samples each".into(),
        ));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let chosen: Vec<(usize, Vec<usize>)> = by_class
        .into_iter()
        .filter(|(_, v)| v.len() >= per_class)
        .take(num_classes)
        .map(|(l, v)| (l, v[..per_class].to_vec()))
        .collect();
    if chosen.len() < num_classes {
        return Err(Error::InvalidArgument(format!(
            "only {} classes have {per_class} samples, need {num_classes}",
            chosen.len()
        )));
    }
    let indices: Vec<usize> = chosen.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    let glabels: Vec<usize> = chosen
        .iter()
        .flat_map(|(l, v)| std::iter::repeat(*l).take(v.len()))
        .collect();
    let c = embeddings.shape()[1];
    let mut sub = Vec::with_capacity(indices.len() * c);
    for &i in &indices {
        sub.extend_from_slice(&embeddings.data()[i * c..(i + 1) * c]);
    }
    let sub = Tensor::new(vec![indices.len(), c], sub)?;
    let matrix = cosine_similarity_matrix(&sub, &sub)?;
    let (mut ws, mut wn, mut cs, mut cn) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..indices.len() {
        for j in 0..indices.len() {
            if i == j {
                continue;
            }
            if glabels[i] == glabels[j] {
                ws += matrix[i][j];
                wn += 1;
            } else {
                cs += matrix[i][j];
                cn += 1;
            }
        }
    }
    let (within, cross) = (ws / wn as f64, cs / cn as f64);
    Ok(SimilarityGrid {
        matrix,
        indices,
        labels: glabels,
        within,
        cross,
        dominance: within - cross,
    })
}

impl SimilarityGrid {
    /// Renders the grid as a heat map, `cell` pixels per entry
    /// (blue = −1, white = 0, red = 1).
    pub fn save_png(&self, path: &Path, cell: usize) -> Result<()> {
        let n = self.matrix.len();
        let side = (n * cell) as u32;
        let img = image::RgbImage::from_fn(side, side, |x, y| {
            let v = self.matrix[y as usize / cell][x as usize / cell];
            let t = ((1.0 - v.abs()) * 255.0).round() as u8;
            if v >= 0.0 {
                image::Rgb([255, t, t])
            } else {
                image::Rgb([t, t, 255])
            }
        });
        img.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
    }
}
