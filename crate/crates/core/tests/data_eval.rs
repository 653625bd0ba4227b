mod common;

use std::collections::BTreeSet;

use advrf::data_eval::{
    cosine_similarity_matrix, generate_synthetic, load_image_folder, recall_at_k,
    save_image_folder, similarity_grid, RetrievalDataset, Split, SyntheticSpec,
};
use advrf::tensor::Tensor;
use advrf::Error;
use common::rng;
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        num_categories: 4,
        images_per_category: 6,
        image_size: 16,
        ..SyntheticSpec::default()
    }
}

/// Exhaustive oracle: every pairwise cosine, full sort, linear scan.
fn recall_oracle(emb: &[Vec<f64>], labels: &[usize], k: usize) -> Option<f64> {
    let n = emb.len();
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        (dot / (na * nb)).clamp(-1.0, 1.0)
    };
    let (mut hits, mut total) = (0, 0);
    for q in 0..n {
        if labels.iter().filter(|&&l| l == labels[q]).count() < 2 {
            continue;
        }
        total += 1;
        let mut cands: Vec<(f64, usize)> = (0..n).filter(|&j| j != q).map(|j| (cos(&emb[q], &emb[j]), j)).collect();
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        if cands[..k].iter().any(|&(_, j)| labels[j] == labels[q]) {
            hits += 1;
        }
    }
    (total > 0).then(|| hits as f64 / total as f64)
}

fn to_rows(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    let c = t.shape()[1];
    t.data().chunks(c).map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect()
}

#[test]
fn duplicate_pairs_give_perfect_recall() {
    let e = Tensor::new(vec![4, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
    let r = recall_at_k(&e, &[0, 0, 1, 1], &[1]).unwrap();
    assert_eq!(r.recall(1), Some(1.0));
}

#[test]
fn k_covering_the_gallery_always_hits() {
    let n = 6;
    let mut data = vec![0.0f32; n * n];
    for i in 0..n {
        data[i * n + i] = 1.0;
    }
    let mut labels = vec![0, 0, 1, 1, 2, 2];
    labels.shuffle(&mut rng(0));
    let r = recall_at_k(&Tensor::new(vec![n, n], data).unwrap(), &labels, &[n - 1]).unwrap();
    assert_eq!(r.recall(n - 1), Some(1.0));
}

#[test]
fn recall_matches_the_exhaustive_oracle() {
    let e = Tensor::<f32>::randn(vec![20, 8], 1.0, &mut rng(1));
    let labels: Vec<usize> = (0..20).map(|i| i % 4).collect();
    let r = recall_at_k(&e, &labels, &[1, 2, 4, 8]).unwrap();
    for k in [1, 2, 4, 8] {
        assert_eq!(r.recall(k), recall_oracle(&to_rows(&e), &labels, k), "K={k}");
    }
}

#[test]
fn single_exemplar_queries_are_excluded() {
    let e = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let r = recall_at_k(&e, &[0, 1], &[1]).unwrap();
    assert_eq!(r.excluded_queries, 2);
    assert!(r.recall_at_k.is_empty());
    let e = Tensor::new(vec![3, 2], vec![1.0, 0.0, 1.0, 0.1, 0.0, 1.0]).unwrap();
    let r = recall_at_k(&e, &[0, 0, 1], &[1]).unwrap();
    assert_eq!((r.excluded_queries, r.evaluated_queries), (1, 2));
    assert_eq!(r.recall(1), Some(1.0));
}

#[test]
fn ks_are_sorted_and_validated() {
    let e = Tensor::<f32>::randn(vec![10, 4], 1.0, &mut rng(2));
    let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
    let r = recall_at_k(&e, &labels, &[4, 1, 2, 2]).unwrap();
    assert_eq!(r.recall_at_k.keys().copied().collect::<Vec<_>>(), vec![1, 2, 4]);
    assert!(recall_at_k(&e, &labels, &[0]).is_err());
    assert!(recall_at_k(&e, &labels, &[10]).is_err());
    assert!(recall_at_k(&e, &labels, &[]).is_err());
}

#[test]
fn cosine_examples_and_oracle() {
    let a = Tensor::new(vec![2, 2], vec![3.0f32, 0.0, 0.0, 2.0]).unwrap();
    let s = cosine_similarity_matrix(&a, &a).unwrap();
    assert_eq!(s, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let x = Tensor::<f32>::randn(vec![5, 7], 1.0, &mut rng(3));
    let y = Tensor::<f32>::randn(vec![4, 7], 1.0, &mut rng(4));
    let s = cosine_similarity_matrix(&x, &y).unwrap();
    let (xr, yr) = (to_rows(&x), to_rows(&y));
    for i in 0..5 {
        for j in 0..4 {
            let dot: f64 = xr[i].iter().zip(&yr[j]).map(|(a, b)| a * b).sum();
            let n = xr[i].iter().map(|v| v * v).sum::<f64>().sqrt() * yr[j].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((s[i][j] - dot / n).abs() < 1e-6);
        }
    }
    let self_sim = cosine_similarity_matrix(&x, &x).unwrap();
    for (i, row) in self_sim.iter().enumerate() {
        assert!((row[i] - 1.0).abs() < 1e-6);
    }
}

#[test]
fn zero_rows_are_named() {
    let a = Tensor::new(vec![3, 2], vec![1.0f32, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
    match cosine_similarity_matrix(&a, &a) {
        Err(Error::InvalidArgument(m)) => assert!(m.contains("row 1"), "{m}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn clustered_grid_reaches_maximum_dominance() {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for c in 0..3 {
        for _ in 0..4 {
            let mut row = vec![0.0f32; 3];
            row[c] = 2.0;
            data.extend(row);
            labels.push(c);
        }
    }
    let g = similarity_grid(&Tensor::new(vec![12, 3], data).unwrap(), &labels, 3, 4).unwrap();
    assert_eq!(g.within, 1.0);
    assert_eq!(g.cross, 0.0);
    assert_eq!(g.dominance, 1.0);
    for i in 0..12 {
        for j in 0..12 {
            assert!((g.matrix[i][j] - g.matrix[j][i]).abs() < 1e-6);
        }
    }
}

#[test]
fn random_grid_dominance_is_near_zero() {
    let e = Tensor::<f32>::randn(vec![50, 64], 1.0, &mut rng(5));
    let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
    let g = similarity_grid(&e, &labels, 5, 10).unwrap();
    assert!(g.dominance.abs() < 0.1, "{}", g.dominance);
}

#[test]
fn grid_needs_enough_samples_and_renders() {
    let e = Tensor::<f32>::randn(vec![8, 4], 1.0, &mut rng(6));
    let labels = vec![0, 0, 0, 1, 1, 1, 2, 2];
    assert!(similarity_grid(&e, &labels, 3, 3).is_err());
    let g = similarity_grid(&e, &labels, 2, 3).unwrap();
    assert_eq!(g.labels, vec![0, 0, 0, 1, 1, 1]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("grid.png");
    g.save_png(&path, 4).unwrap();
    assert_eq!(image::open(&path).unwrap().to_rgb8().dimensions(), (24, 24));
}

#[test]
fn synthetic_generation_is_deterministic_and_disjoint() {
    let a = generate_synthetic(&small_spec()).unwrap();
    let b = generate_synthetic(&small_spec()).unwrap();
    assert_eq!(a.view(Split::Seen).unwrap().images, b.view(Split::Seen).unwrap().images);
    assert_eq!(a.all().unwrap().part_masks, b.all().unwrap().part_masks);
    let seen: BTreeSet<usize> = a.view(Split::Seen).unwrap().labels.into_iter().collect();
    let unseen: BTreeSet<usize> = a.view(Split::Unseen).unwrap().labels.into_iter().collect();
    assert!(seen.is_disjoint(&unseen));
    assert_eq!(seen.len() + unseen.len(), 4);
    let other = generate_synthetic(&SyntheticSpec { seed: 99, ..small_spec() }).unwrap();
    assert_ne!(other.all().unwrap().images, a.all().unwrap().images);
}

#[test]
fn synthetic_images_are_valid_with_visible_parts() {
    let d = generate_synthetic(&small_spec()).unwrap();
    let all = d.all().unwrap();
    assert!(all.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    let per = 16 * 16;
    let masks = all.part_masks.unwrap();
    for i in 0..d.len() {
        let area: f32 = masks.data()[i * per..(i + 1) * per].iter().sum();
        assert!(area >= 1.0, "image {i} has part area {area}");
    }
}

#[test]
fn synthetic_spec_validation() {
    for spec in [
        SyntheticSpec { image_size: 12, ..small_spec() },
        SyntheticSpec { num_categories: 5, ..small_spec() },
        SyntheticSpec { part_variation_scale: 0.0, ..small_spec() },
        SyntheticSpec { background_clutter: 1.5, ..small_spec() },
    ] {
        assert!(matches!(generate_synthetic(&spec), Err(Error::InvalidArgument(_))));
    }
}

#[test]
fn easy_regime_pixel_nearest_neighbour() {
    let spec = SyntheticSpec {
        num_categories: 4,
        images_per_category: 20,
        part_variation_scale: 1.0,
        background_clutter: 0.0,
        ..SyntheticSpec::default()
    };
    let d = generate_synthetic(&spec).unwrap();
    let all = d.all().unwrap();
    let n = d.len();
    let per = all.images.numel() / n;
    let px: Vec<&[f32]> = all.images.data().chunks(per).collect();
    let mut hits = 0;
    for q in 0..n {
        let nearest = (0..n)
            .filter(|&j| j != q)
            .min_by(|&a, &b| {
                let da: f32 = px[q].iter().zip(px[a]).map(|(x, y)| (x - y).powi(2)).sum();
                let db: f32 = px[q].iter().zip(px[b]).map(|(x, y)| (x - y).powi(2)).sum();
                da.total_cmp(&db)
            })
            .unwrap();
        if all.labels[nearest] == all.labels[q] {
            hits += 1;
        }
    }
    let r1 = hits as f64 / n as f64;
    assert!(r1 > 0.9, "pixel 1-NN Recall@1 {r1}");
}

#[test]
fn folder_round_trip_is_exact() {
    let d = generate_synthetic(&small_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_image_folder(&d, dir.path()).unwrap();
    let back = load_image_folder(dir.path()).unwrap();
    assert_eq!(back.skipped, 0);
    let (a, b) = (d.all().unwrap(), back.dataset.all().unwrap());
    assert_eq!(a.images, b.images);
    assert_eq!(a.labels, b.labels);
    assert_eq!(a.part_masks, b.part_masks);
    assert_eq!(back.dataset.class_names(), d.class_names());
    assert_eq!(back.dataset.num_seen(), 2);
}

fn write_png(path: &std::path::Path, value: u8) {
    image::RgbImage::from_pixel(4, 4, image::Rgb([value, value, value]))
        .save(path)
        .unwrap();
}

#[test]
fn two_single_image_classes() {
    let dir = tempfile::tempdir().unwrap();
    for (class, v) in [("beta", 10u8), ("alpha", 200u8)] {
        std::fs::create_dir(dir.path().join(class)).unwrap();
        write_png(&dir.path().join(class).join("0.png"), v);
    }
    std::fs::write(dir.path().join("alpha").join("notes.txt"), "not an image").unwrap();
    let load = load_image_folder(dir.path()).unwrap();
    assert_eq!(load.skipped, 1);
    let d = &load.dataset;
    assert_eq!(d.labels(), &[0, 1]);
    assert_eq!(d.class_names(), &["alpha".to_string(), "beta".to_string()]);
    assert_eq!(d.label_sets(), (vec![0], vec![1]));
    assert!(!d.has_part_masks());
    assert!((d.view(Split::Seen).unwrap().images.data()[0] - 200.0 / 255.0).abs() < 1e-7);
}

#[test]
fn empty_class_is_named() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("full")).unwrap();
    std::fs::create_dir(dir.path().join("hollow")).unwrap();
    write_png(&dir.path().join("full").join("a.png"), 5);
    match load_image_folder(dir.path()) {
        Err(Error::Ingestion(m)) => assert!(m.contains("hollow"), "{m}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn training_lock_guards_the_unseen_split() {
    let d = generate_synthetic(&small_spec()).unwrap();
    {
        let _lock = d.lock_for_training().unwrap();
        assert!(d.view(Split::Seen).is_ok());
        assert!(matches!(d.view(Split::Unseen), Err(Error::ContractViolation(_))));
        assert!(matches!(d.all(), Err(Error::ContractViolation(_))));
        assert!(d.lock_for_training().is_err());
    }
    assert!(d.view(Split::Unseen).is_ok());
}

#[test]
fn dataset_rejects_inconsistent_parts() {
    let images = Tensor::zeros(vec![2, 3, 4, 4]);
    let names = vec!["a".to_string(), "b".to_string()];
    assert!(RetrievalDataset::new(images.clone(), vec![0], names.clone(), 1, None).is_err());
    assert!(RetrievalDataset::new(images.clone(), vec![0, 2], names.clone(), 1, None).is_err());
    assert!(RetrievalDataset::new(images.clone(), vec![0, 1], names.clone(), 2, None).is_err());
    assert!(RetrievalDataset::new(images, vec![0, 1], names, 1, Some(Tensor::zeros(vec![2, 1, 2, 2]))).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn recall_is_monotone_and_bounded(seed in 0u64..10_000, n in 10usize..40, classes in 2usize..5) {
        let e = Tensor::<f32>::randn(vec![n, 6], 1.0, &mut rng(seed));
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let r = recall_at_k(&e, &labels, &[1, 2, 4, 8]).unwrap();
        let vals: Vec<f64> = r.recall_at_k.values().copied().collect();
        prop_assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(vals.iter().all(|&v| (0.0..=1.0).contains(&v)));
        for (q, list) in r.nearest.iter().enumerate() {
            prop_assert!(!list.contains(&q));
        }
    }
}
