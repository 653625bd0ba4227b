use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use advrf::data_eval::{
    export_pattern_overlays, mask_localization, recall_at_k, similarity_grid, EvalReport, LocalizationStats,
    RetrievalDataset, SimilarityGrid, Split, SplitView,
};
use advrf::models::AdvrfModels;
use advrf::tensor::{Checkpoint, Tensor};
use advrf::trainer::{
    checkpoint_config, embed_for_retrieval, embed_with, evaluate, models_from_checkpoint, time_embedding,
    train, EmbedMode, EmbedTiming, TrainConfig, TrainOutcome, EVAL_KS,
};
use advrf::{Error, Result};

use crate::load_dataset;
use crate::manifest::RunManifest;

/// Samples per class in similarity grids.
pub const GRID_PER_CLASS: usize = 10;

pub fn parse_split(s: &str) -> Result<Option<Split>> {
    match s {
        "seen" => Ok(Some(Split::Seen)),
        "unseen" => Ok(Some(Split::Unseen)),
        "all" => Ok(None),
        other => Err(Error::Config(format!(
            "unknown split `{other}` (expected seen, unseen or all)"
        ))),
    }
}

fn split_name(split: Option<Split>) -> &'static str {
    match split {
        Some(Split::Seen) => "seen",
        Some(Split::Unseen) => "unseen",
        None => "all",
    }
}

fn view(data: &RetrievalDataset, split: Option<Split>) -> Result<SplitView> {
    match split {
        Some(s) => data.view(s),
        None => data.all(),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::Config(format!("checkpoint {} not found", path.display())));
    }
    Checkpoint::load(path)
}

/// Models for inference, loading the reconstruction sections only when the
/// embedding mode (or an explicit timing reference) needs them.
fn inference_models(ckpt: &Checkpoint, cfg: &TrainConfig, need_recon: bool) -> Result<AdvrfModels<f32>> {
    let need = need_recon || EmbedMode::for_config(cfg) != EmbedMode::Retrieval;
    models_from_checkpoint(ckpt, cfg, need)
}

fn embed(models: &AdvrfModels<f32>, cfg: &TrainConfig, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    match EmbedMode::for_config(cfg) {
        EmbedMode::Retrieval => embed_for_retrieval(models, x),
        mode => embed_with(models, mode, x),
    }
}

/// Grid over every class with at least two samples, up to
/// `GRID_PER_CLASS` samples each.
pub fn dominance_grid(emb: &Tensor<f32>, labels: &[usize]) -> Result<SimilarityGrid> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let usable: Vec<usize> = counts.values().copied().filter(|&c| c >= 2).collect();
    let per_class = usable.iter().copied().min().unwrap_or(0).min(GRID_PER_CLASS);
    similarity_grid(emb, labels, usable.len(), per_class)
}

/// Trains `config` into `out` and reports unseen Recall@K.
pub fn cmd_train(config: &TrainConfig, data: Option<&Path>, out: &Path) -> Result<TrainOutcome> {
    create_dir(out)?;
    let mut manifest = RunManifest::start("train", config);
    let dataset = load_dataset(data, config)?;
    let config_path = out.join("config.txt");
    fs::write(&config_path, config.to_text()).map_err(|e| Error::io(&config_path, e))?;
    let outcome = train(config, &dataset, Some(out))?;
    manifest.add_output("config.txt");
    manifest.add_output("metrics.csv");
    manifest.add_output("final.advrf");
    if config.checkpoint_every > 0 {
        for e in (config.checkpoint_every..=config.epochs).step_by(config.checkpoint_every) {
            manifest.add_output(format!("checkpoint_epoch{e:03}.advrf"));
        }
    }
    if config.epochs > 0 {
        let report = evaluate(&outcome.state, &dataset, Split::Unseen, &EVAL_KS)?;
        for (k, r) in &report.recall_at_k {
            println!("unseen Recall@{k}: {r:.4}");
        }
    }
    manifest.finish(out)?;
    Ok(outcome)
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: Option<PathBuf>,
    pub ks: Vec<usize>,
    /// `None` evaluates every image.
    pub split: Option<Split>,
    pub out: Option<PathBuf>,
    pub timing: bool,
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub split: Option<Split>,
    pub mode: EmbedMode,
    /// Reconstruction encoder/decoder invocations while embedding.
    pub recon_calls: (usize, usize),
    pub timing: Option<EmbedTiming>,
    pub out_dir: PathBuf,
}

impl EvalOutcome {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "split: {}  embedding: {:?}", split_name(self.split), self.mode);
        let _ = writeln!(
            s,
            "queries: {} evaluated, {} excluded",
            self.report.evaluated_queries, self.report.excluded_queries
        );
        if self.report.recall_at_k.is_empty() {
            let _ = writeln!(s, "warning: every query was excluded; the report is empty");
        }
        let _ = writeln!(s, "{:>6}  {:>8}", "K", "Recall");
        for (k, r) in &self.report.recall_at_k {
            let _ = writeln!(s, "{k:>6}  {:>7.2}%", 100.0 * r);
        }
        if let Some(t) = self.timing {
            let _ = writeln!(
                s,
                "embedding time: retrieval-only {:.2} ms, both models {:.2} ms ({:.2}x)",
                t.retrieval_ms,
                t.both_models_ms,
                t.both_models_ms / t.retrieval_ms
            );
        }
        s
    }
}

/// Recall@K of a checkpoint. Embeddings come from the retrieval model
/// alone; with `timing`, a both-models forward is timed afterwards.
pub fn cmd_eval(args: &EvalArgs) -> Result<EvalOutcome> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let cfg = checkpoint_config(&ckpt)?;
    let models = inference_models(&ckpt, &cfg, args.timing)?;
    let dataset = load_dataset(args.data.as_deref(), &cfg)?;
    let v = view(&dataset, args.split)?;
    let emb = embed(&models, &cfg, &v.images)?;
    let recon_calls = (models.recon_enc.call_count(), models.recon_dec.call_count());
    let report = recall_at_k(&emb, &v.labels, &args.ks)?;
    let timing = if args.timing {
        Some(time_embedding(&models, &v.images, 3)?)
    } else {
        None
    };

    let out_dir = match &args.out {
        Some(d) => d.clone(),
        None => args
            .checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval_{}", split_name(args.split))),
    };
    create_dir(&out_dir)?;
    let mut manifest = RunManifest::start("eval", &cfg);
    let header = |cols: &[&str]| cols.iter().map(|c| c.to_string()).collect::<Vec<_>>();
    let rows: Vec<Vec<String>> = report
        .recall_at_k
        .iter()
        .map(|(k, r)| {
            vec![
                split_name(args.split).to_string(),
                k.to_string(),
                r.to_string(),
                report.evaluated_queries.to_string(),
                report.excluded_queries.to_string(),
            ]
        })
        .collect();
    write_csv(
        &out_dir.join("recall.csv"),
        &header(&["split", "k", "recall", "evaluated_queries", "excluded_queries"]),
        &rows,
    )?;
    let nearest: Vec<Vec<String>> = report
        .nearest
        .iter()
        .enumerate()
        .map(|(q, list)| {
            vec![
                q.to_string(),
                v.labels[q].to_string(),
                list.iter().map(|j| j.to_string()).collect::<Vec<_>>().join(" "),
            ]
        })
        .collect();
    write_csv(&out_dir.join("nearest.csv"), &header(&["query", "label", "nearest"]), &nearest)?;
    manifest.add_output("recall.csv");
    manifest.add_output("nearest.csv");
    if let Some(t) = timing {
        write_csv(
            &out_dir.join("timing.csv"),
            &header(&["retrieval_ms", "both_models_ms"]),
            &[vec![t.retrieval_ms.to_string(), t.both_models_ms.to_string()]],
        )?;
        manifest.add_output("timing.csv");
    }
    manifest.finish(&out_dir)?;
    Ok(EvalOutcome {
        report,
        split: args.split,
        mode: EmbedMode::for_config(&cfg),
        recon_calls,
        timing,
        out_dir,
    })
}

#[derive(Clone, Debug)]
pub struct VisualizeOutcome {
    pub overlay_files: usize,
    pub dominance: f64,
    pub localization: Option<LocalizationStats>,
}

/// Overlays for the first `count` unseen images, the unseen similarity grid
/// and the embeddings it was computed from.
pub fn cmd_visualize(checkpoint: &Path, data: Option<&Path>, out: &Path, count: usize) -> Result<VisualizeOutcome> {
    let ckpt = load_checkpoint(checkpoint)?;
    let cfg = checkpoint_config(&ckpt)?;
    let models = inference_models(&ckpt, &cfg, false)?;
    let dataset = load_dataset(data, &cfg)?;
    let unseen = dataset.view(Split::Unseen)?;
    create_dir(out)?;
    let mut manifest = RunManifest::start("visualize", &cfg);

    let idx: Vec<usize> = (0..count.min(unseen.len())).collect();
    let (sample, _, _) = unseen.batch(&idx);
    let overlay_files = if idx.is_empty() {
        0
    } else {
        export_pattern_overlays(&models, &sample, &out.join("overlays"))?
    };
    for i in &idx {
        for kind in ["input", "mask", "overlay"] {
            manifest.add_output(format!("overlays/{i}_{kind}.png"));
        }
    }

    let emb = embed(&models, &cfg, &unseen.images)?;
    let c = emb.shape()[1];
    let mut header = vec!["index".to_string(), "label".to_string()];
    header.extend((0..c).map(|j| format!("e{j}")));
    let rows: Vec<Vec<String>> = emb
        .data()
        .chunks(c)
        .enumerate()
        .map(|(i, row)| {
            let mut r = vec![i.to_string(), unseen.labels[i].to_string()];
            r.extend(row.iter().map(|v| v.to_string()));
            r
        })
        .collect();
    write_csv(&out.join("embeddings.csv"), &header, &rows)?;

    let grid = dominance_grid(&emb, &unseen.labels)?;
    grid.save_png(&out.join("similarity_grid.png"), 4)?;
    let localization = match &unseen.part_masks {
        Some(m) => Some(mask_localization(&models, &unseen.images, m)?),
        None => None,
    };
    let mut stats = vec![
        vec!["within".to_string(), grid.within.to_string()],
        vec!["cross".to_string(), grid.cross.to_string()],
        vec!["dominance".to_string(), grid.dominance.to_string()],
    ];
    if let Some(l) = localization {
        stats.push(vec!["mask_inside".to_string(), l.inside.to_string()]);
        stats.push(vec!["mask_outside".to_string(), l.outside.to_string()]);
        stats.push(vec!["mask_ratio".to_string(), l.ratio.to_string()]);
    }
    write_csv(&out.join("stats.csv"), &["stat".to_string(), "value".to_string()], &stats)?;
    for f in ["embeddings.csv", "similarity_grid.png", "stats.csv"] {
        manifest.add_output(f);
    }
    manifest.finish(out)?;
    Ok(VisualizeOutcome {
        overlay_files,
        dominance: grid.dominance,
        localization,
    })
}
