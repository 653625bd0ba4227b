use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use advrf::data_eval::{mask_localization, RetrievalDataset, Split};
use advrf::tensor::Checkpoint;
use advrf::trainer::{
    checkpoint_config, embed_with, evaluate, train, EmbedMode, MaskSource, Regime, TrainConfig, TrainState,
    EVAL_KS,
};
use advrf::{Error, Result};
use rayon::prelude::*;

use crate::commands::dominance_grid;
use crate::load_dataset;
use crate::manifest::RunManifest;

pub const SUITES: [&str; 6] = ["losses", "feedback", "delta", "adversarial", "hparams", "patterns"];

/// One configuration of a suite; it is trained once per seed.
#[derive(Clone, Debug)]
pub struct SuiteRow {
    pub name: String,
    pub config: TrainConfig,
}

fn row(name: impl Into<String>, config: TrainConfig) -> SuiteRow {
    SuiteRow {
        name: name.into(),
        config,
    }
}

fn with_losses(base: &TrainConfig, g_a: bool, g_r: bool, r_a: bool, r_r: bool, p: bool) -> TrainConfig {
    TrainConfig {
        use_l_g_a: g_a,
        use_l_g_r: g_r,
        use_l_r_a: r_a,
        use_l_r_r: r_r,
        use_l_p: p,
        ..base.clone()
    }
}

pub fn suite_rows(suite: &str, base: &TrainConfig) -> Result<Vec<SuiteRow>> {
    let b = base.clone();
    let rows = match suite {
        "losses" => vec![
            row("l_c_only", with_losses(&b, false, false, false, false, false)),
            row("a_terms", with_losses(&b, true, false, true, false, false)),
            row("r_terms", with_losses(&b, false, true, false, true, false)),
            row("feedback", with_losses(&b, true, true, true, true, false)),
            row("full", with_losses(&b, true, true, true, true, true)),
        ],
        "feedback" => vec![
            row("classification", TrainConfig { regime: Regime::Classification, ..b.clone() }),
            row("reconstruction", TrainConfig { regime: Regime::ReconOnly, ..b.clone() }),
            row("advrf", b),
        ],
        "delta" => [0.1, 0.2, 0.4, 0.6, 0.8]
            .into_iter()
            .map(|d| row(format!("delta_{d}"), TrainConfig { delta: d, ..b.clone() }))
            .collect(),
        "adversarial" => vec![
            row("non_adversarial", TrainConfig { regime: Regime::NonAdversarial, ..b.clone() }),
            row("advrf", b),
        ],
        "hparams" => {
            let mut rows = vec![row("default", b.clone())];
            for a in [0.3, 0.5, 0.9] {
                rows.push(row(format!("alpha_{a}"), TrainConfig { alpha: a, ..b.clone() }));
            }
            for v in [0.1, 0.3, 0.7] {
                rows.push(row(format!("beta_{v}"), TrainConfig { beta: v, ..b.clone() }));
            }
            for g in [0.2, 0.4, 0.8] {
                rows.push(row(format!("gamma_{g}"), TrainConfig { gamma: g, ..b.clone() }));
            }
            rows
        }
        "patterns" => [MaskSource::Learned, MaskSource::Oracle, MaskSource::Ones, MaskSource::Half]
            .into_iter()
            .map(|m| row(format!("mask_{m}"), TrainConfig { mask_source: m, ..b.clone() }))
            .collect(),
        other => {
            return Err(Error::Config(format!(
                "unknown suite `{other}` (expected one of {})",
                SUITES.join(", ")
            )))
        }
    };
    Ok(rows)
}

/// Unseen-split metrics of one trained run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub row: String,
    pub seed: u64,
    pub recall: BTreeMap<usize, f64>,
    /// Mean mask inside ground-truth parts over mean mask outside.
    pub localization: Option<f64>,
    pub dominance: f64,
    pub mode: EmbedMode,
}

impl RunResult {
    pub fn recall_at(&self, k: usize) -> f64 {
        self.recall.get(&k).copied().unwrap_or(f64::NAN)
    }
}

/// Evaluates a trained state on the unseen split.
pub fn measure(state: &TrainState, data: &RetrievalDataset, row: &str) -> Result<RunResult> {
    let cfg = &state.config;
    let report = evaluate(state, data, Split::Unseen, &EVAL_KS)?;
    let unseen = data.view(Split::Unseen)?;
    let mode = EmbedMode::for_config(cfg);
    let emb = embed_with(&state.models, mode, &unseen.images)?;
    let localization = match &unseen.part_masks {
        Some(m) => Some(mask_localization(&state.models, &unseen.images, m)?.ratio),
        None => None,
    };
    Ok(RunResult {
        row: row.to_string(),
        seed: cfg.seed,
        recall: report.recall_at_k,
        localization,
        dominance: dominance_grid(&emb, &unseen.labels)?.dominance,
        mode,
    })
}

/// Trains `cfg` into `dir`, or reloads `dir/final.advrf` when it was
/// produced by exactly this config.
pub fn train_cached(cfg: &TrainConfig, data: &RetrievalDataset, dir: &Path) -> Result<TrainState> {
    let final_path = dir.join("final.advrf");
    if final_path.is_file() {
        let ckpt = Checkpoint::load(&final_path)?;
        if checkpoint_config(&ckpt)?.to_text() == cfg.to_text() {
            log::info!("reusing finished run in {}", dir.display());
            return TrainState::from_checkpoint(&ckpt);
        }
    }
    Ok(train(cfg, data, Some(dir))?.state)
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: String,
    pub rows: Vec<String>,
    pub runs: Vec<RunResult>,
}

/// Mean and population standard deviation.
pub fn mean_spread(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl SuiteReport {
    pub fn runs_of<'a>(&'a self, row: &'a str) -> impl Iterator<Item = &'a RunResult> + 'a {
        self.runs.iter().filter(move |r| r.row == row)
    }

    pub fn stat(&self, row: &str, f: impl Fn(&RunResult) -> f64) -> (f64, f64) {
        let v: Vec<f64> = self.runs_of(row).map(f).collect();
        mean_spread(&v)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "suite `{}` (mean ± std over seeds)", self.suite);
        let _ = writeln!(
            s,
            "{:<18} {:>15} {:>15} {:>15} {:>15}",
            "row", "Recall@1", "Recall@8", "localization", "dominance"
        );
        for r in &self.rows {
            let fmt = |(m, sd): (f64, f64)| format!("{m:.4} ± {sd:.4}");
            let _ = writeln!(
                s,
                "{:<18} {:>15} {:>15} {:>15} {:>15}",
                r,
                fmt(self.stat(r, |x| x.recall_at(1))),
                fmt(self.stat(r, |x| x.recall_at(8))),
                fmt(self.stat(r, |x| x.localization.unwrap_or(f64::NAN))),
                fmt(self.stat(r, |x| x.dominance)),
            );
        }
        s
    }

    fn write(&self, out: &Path) -> Result<()> {
        let path = out.join("runs.csv");
        let err = |e: csv::Error| Error::io(&path, std::io::Error::other(e.to_string()));
        let mut w = csv::Writer::from_path(&path).map_err(err)?;
        let mut header = vec!["row".to_string(), "seed".to_string()];
        header.extend(EVAL_KS.iter().map(|k| format!("recall_at_{k}")));
        header.extend(["localization", "dominance", "embedding"].map(String::from));
        w.write_record(&header).map_err(err)?;
        for r in &self.runs {
            let mut rec = vec![r.row.clone(), r.seed.to_string()];
            rec.extend(EVAL_KS.iter().map(|&k| r.recall_at(k).to_string()));
            rec.push(r.localization.map(|v| v.to_string()).unwrap_or_default());
            rec.push(r.dominance.to_string());
            rec.push(format!("{:?}", r.mode));
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = out.join("summary.csv");
        let err = |e: csv::Error| Error::io(&path, std::io::Error::other(e.to_string()));
        let mut w = csv::Writer::from_path(&path).map_err(err)?;
        let mut header = vec!["row".to_string(), "seeds".to_string()];
        for k in EVAL_KS {
            header.push(format!("recall_at_{k}_mean"));
            header.push(format!("recall_at_{k}_std"));
        }
        header.extend(["localization_mean", "localization_std", "dominance_mean", "dominance_std"].map(String::from));
        w.write_record(&header).map_err(err)?;
        for row in &self.rows {
            let mut rec = vec![row.clone(), self.runs_of(row).count().to_string()];
            for k in EVAL_KS {
                let (m, sd) = self.stat(row, |x| x.recall_at(k));
                rec.extend([m.to_string(), sd.to_string()]);
            }
            let (m, sd) = self.stat(row, |x| x.localization.unwrap_or(f64::NAN));
            rec.extend([m.to_string(), sd.to_string()]);
            let (m, sd) = self.stat(row, |x| x.dominance);
            rec.extend([m.to_string(), sd.to_string()]);
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }
}

/// Runs every row of `suite` for each seed under `out/<row>/seed<s>/`,
/// reusing finished runs, and writes `runs.csv` and `summary.csv`.
pub fn run_suite(suite: &str, base: &TrainConfig, seeds: &[u64], out: &Path, parallel: bool) -> Result<SuiteReport> {
    let rows = suite_rows(suite, base)?;
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifest = RunManifest::start(&format!("ablate {suite}"), base);
    let data = load_dataset(None, base)?;
    let jobs: Vec<(&SuiteRow, u64)> = rows.iter().flat_map(|r| seeds.iter().map(move |&s| (r, s))).collect();
    let run = |(r, seed): &(&SuiteRow, u64)| -> Result<RunResult> {
        let cfg = TrainConfig {
            seed: *seed,
            ..r.config.clone()
        };
        cfg.validate()?;
        let dir = out.join(&r.name).join(format!("seed{seed}"));
        log::info!("suite {suite}: {} seed {seed}", r.name);
        let state = train_cached(&cfg, &data, &dir)?;
        measure(&state, &data, &r.name)
    };
    let runs: Vec<RunResult> = if parallel {
        jobs.par_iter().map(run).collect::<Result<_>>()?
    } else {
        jobs.iter().map(run).collect::<Result<_>>()?
    };
    for (r, seed) in &jobs {
        manifest.add_output(format!("{}/seed{seed}/final.advrf", r.name));
        manifest.add_output(format!("{}/seed{seed}/metrics.csv", r.name));
    }
    let report = SuiteReport {
        suite: suite.to_string(),
        rows: rows.into_iter().map(|r| r.name).collect(),
        runs,
    };
    report.write(out)?;
    manifest.add_output("runs.csv");
    manifest.add_output("summary.csv");
    manifest.finish(out)?;
    Ok(report)
}
