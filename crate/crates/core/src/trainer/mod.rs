//! Alternating reconstruction/retrieval updates, the learning-rate schedule,
//! checkpoints and retrieval-time embedding.

mod config;

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adversarial_losses::{
    plain_reconstruction, reconstruction_feedback, retrieval_feedback, FeedbackLossReport,
};
use crate::data_eval::{recall_at_k, EvalReport, RetrievalDataset, Split};
use crate::discrepancy::{amplify, decompose, ema_update, parameterization_loss, PatternMap, Resolution};
use crate::error::{Error, Result};
use crate::models::{sections, AdvrfModels};
use crate::tensor::{BoundParams, Checkpoint, Graph, Tensor, Var};

pub use config::{Granularity, MaskSource, Regime, TrainConfig};

/// Recall cut-offs reported by periodic evaluation.
pub const EVAL_KS: [usize; 4] = [1, 2, 4, 8];
const EMBED_CHUNK: usize = 64;

/// Everything needed to continue a run bit-identically.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub epoch: usize,
    pub global_step: usize,
    pub lr: f64,
    pub models: AdvrfModels<f32>,
    pub rng: ChaCha8Rng,
    pub config: TrainConfig,
}

/// Scalar losses of one step; fields a phase does not compute stay zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepReport {
    pub l_c: f64,
    pub l_p: f64,
    pub feedback: FeedbackLossReport,
    pub total: f64,
    pub skipped: bool,
}

impl StepReport {
    fn skipped() -> Self {
        StepReport {
            skipped: true,
            ..Default::default()
        }
    }
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub l_c: f64,
    pub l_p: f64,
    pub l_g_a: f64,
    pub l_g_r: f64,
    pub l_r_a: f64,
    pub l_r_r: f64,
    pub lr: f64,
    pub recall_at_1: Option<f64>,
}

pub const METRICS_HEADER: [&str; 10] = [
    "epoch", "step", "l_c", "l_p", "l_g_a", "l_g_r", "l_r_a", "l_r_r", "lr", "recall_at_1",
];

impl MetricsRow {
    fn record(&self) -> [String; 10] {
        [
            self.epoch.to_string(),
            self.step.to_string(),
            self.l_c.to_string(),
            self.l_p.to_string(),
            self.l_g_a.to_string(),
            self.l_g_r.to_string(),
            self.l_r_a.to_string(),
            self.l_r_r.to_string(),
            self.lr.to_string(),
            self.recall_at_1.map(|r| r.to_string()).unwrap_or_default(),
        ]
    }
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<MetricsRow>,
    /// `(epoch, report)` for every periodic evaluation on the unseen split.
    pub evals: Vec<(usize, EvalReport)>,
}

impl TrainState {
    pub fn new(config: &TrainConfig, num_seen_classes: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let models = AdvrfModels::new(&config.architecture(num_seen_classes), &mut rng)?;
        Ok(TrainState {
            epoch: 0,
            global_step: 0,
            lr: config.lr,
            models,
            rng,
            config: config.clone(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        self.models.write_checkpoint(&mut ckpt);
        ckpt.set_meta("epoch", self.epoch.to_string());
        ckpt.set_meta("global_step", self.global_step.to_string());
        ckpt.set_meta("lr", self.lr.to_string());
        let seed: String = self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        ckpt.set_meta("rng_seed", seed);
        ckpt.set_meta("rng_word_pos", self.rng.get_word_pos().to_string());
        ckpt.set_meta("config", self.config.to_compact());
        ckpt
    }

    /// Rebuilds a full training state; every section must be present.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = |k: &str| {
            ckpt.meta(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{k}`")))
        };
        let num = |k: &str| -> Result<u128> {
            meta(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad metadata `{k}`")))
        };
        let config = TrainConfig::from_compact(meta("config")?)?;
        let mut models = models_from_checkpoint(ckpt, &config, true)?;
        models.set_recon_frozen(false);
        models.set_retrieval_frozen(false);
        let hex = meta("rng_seed")?;
        let mut seed = [0u8; 32];
        if hex.len() != 64 {
            return Err(Error::Checkpoint("bad metadata `rng_seed`".into()));
        }
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16)
                .map_err(|_| Error::Checkpoint("bad metadata `rng_seed`".into()))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(num("rng_word_pos")?);
        Ok(TrainState {
            epoch: num("epoch")? as usize,
            global_step: num("global_step")? as usize,
            lr: meta("lr")?
                .parse()
                .map_err(|_| Error::Checkpoint("bad metadata `lr`".into()))?,
            models,
            rng,
            config,
        })
    }
}

/// Builds models from the checkpoint's own config. With `require_recon`
/// unset, reconstruction sections may be absent (retrieval-only deployment).
pub fn models_from_checkpoint(
    ckpt: &Checkpoint,
    config: &TrainConfig,
    require_recon: bool,
) -> Result<AdvrfModels<f32>> {
    if !ckpt.has_section(sections::RETRIEVAL) {
        return Err(Error::Checkpoint(format!("missing section `{}`", sections::RETRIEVAL)));
    }
    let classes = ckpt
        .tensor(&format!("{}/weight", sections::CLASSIFIER))
        .map(|t| t.shape()[0])
        .ok_or_else(|| Error::Checkpoint("missing classifier weights".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut models = AdvrfModels::new(&config.architecture(classes), &mut rng)?;
    models.read_checkpoint(ckpt, require_recon)?;
    Ok(models)
}

/// Config stored in a checkpoint's metadata.
pub fn checkpoint_config(ckpt: &Checkpoint) -> Result<TrainConfig> {
    let text = ckpt
        .meta("config")
        .ok_or_else(|| Error::Checkpoint("missing metadata `config`".into()))?;
    TrainConfig::from_compact(text)
}

fn effective_source(cfg: &TrainConfig) -> MaskSource {
    if cfg.regime == Regime::ReconOnly {
        MaskSource::Ones
    } else {
        cfg.mask_source
    }
}

enum MaskGen<'a, 'g> {
    Mean,
    Live(&'a BoundParams<'g, f32>),
}

/// Image-resolution mask and the amplified encoder output.
fn image_mask<'g>(
    models: &AdvrfModels<f32>,
    cfg: &TrainConfig,
    gen: MaskGen<'_, 'g>,
    f: Option<Var<'g, f32>>,
    f_hat: Var<'g, f32>,
    oracle: Option<&Tensor<f32>>,
    (n, h, w): (usize, usize, usize),
) -> Result<(PatternMap<'g, f32>, Var<'g, f32>)> {
    let g = f_hat.graph();
    let fixed = |t: Tensor<f32>| -> Result<(PatternMap<'g, f32>, Var<'g, f32>)> {
        let f_i = f_hat.upsample(h, w, cfg.resize_mode)?;
        Ok((PatternMap::new(g.constant(t), Resolution::Image)?, f_i))
    };
    match effective_source(cfg) {
        MaskSource::Ones => fixed(Tensor::full(vec![n, 1, h, w], 1.0)),
        MaskSource::Half => fixed(Tensor::full(vec![n, 1, h, w], 0.5)),
        MaskSource::Oracle => {
            let m = oracle.ok_or_else(|| {
                Error::InvalidArgument("mask_source=oracle needs ground-truth part masks".into())
            })?;
            fixed(m.clone())
        }
        MaskSource::Learned => {
            let f = f.ok_or_else(|| Error::ContractViolation("learned mask without features".into()))?;
            let m_hat = match gen {
                MaskGen::Mean => crate::discrepancy::pattern_map(f, &models.mean_gen)?,
                MaskGen::Live(p) => PatternMap::new(models.pattern_gen.forward(p, f)?, Resolution::Feature)?,
            };
            amplify(m_hat, f_hat, h, w, cfg.resize_mode)
        }
    }
}

fn image_dims(x: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::dim("train step", format!("expected (N, 3, H, W), got {s:?}")));
    }
    Ok((s[0], s[2], s[3]))
}

fn sum_terms<'g>(terms: &[Var<'g, f32>]) -> Result<Var<'g, f32>> {
    let mut it = terms.iter().copied();
    let first = it
        .next()
        .ok_or_else(|| Error::InvalidArgument("no loss terms enabled".into()))?;
    it.try_fold(first, |acc, t| acc.add(t))
}

fn check_finite(what: &str, values: &[(&str, f64)], models: &AdvrfModels<f32>) -> Result<()> {
    if values.iter().all(|(_, v)| v.is_finite()) {
        return Ok(());
    }
    let losses: Vec<String> = values.iter().map(|(k, v)| format!("{k}={v}")).collect();
    let norms: Vec<String> = models
        .retrieval_sets()
        .into_iter()
        .chain(models.recon_sets())
        .map(|(s, p)| format!("{s}={:.4e}", p.l2_norm()))
        .collect();
    Err(Error::Numeric(format!(
        "non-finite loss in {what} ({}); parameter norms: {}",
        losses.join(", "),
        norms.join(", ")
    )))
}

/// Whether the reconstruction phase has anything to optimize.
fn recu_active(cfg: &TrainConfig) -> bool {
    match cfg.regime {
        Regime::Classification => false,
        Regime::Advrf => cfg.alpha > 0.0 && (cfg.use_l_g_a || cfg.use_l_g_r),
        Regime::ReconOnly | Regime::NonAdversarial => cfg.alpha > 0.0,
    }
}

/// One reconstruction update: `Θ_G ← Θ_G − lr·∇(α·L^RecF_G)` with every
/// retrieval-side component frozen.
pub fn recu_step(
    state: &mut TrainState,
    x: &Tensor<f32>,
    part_masks: Option<&Tensor<f32>>,
) -> Result<StepReport> {
    let cfg = &state.config;
    if !recu_active(cfg) {
        return Ok(StepReport::skipped());
    }
    let models = &mut state.models;
    models.set_retrieval_frozen(true);
    models.set_recon_frozen(false);
    let r_hash = models.retrieval_side_hash();
    let mean_hash = models.mean_gen_hash();
    let dims = image_dims(x)?;
    let scaling = cfg.scaling();

    let g = Graph::new();
    let xv = g.constant(x.clone());
    let pe = models.recon_enc.params.bind(&g);
    let pd = models.recon_dec.params.bind(&g);
    let f_hat = models.recon_enc.forward(&pe, xv)?;
    let f = if effective_source(cfg) == MaskSource::Learned {
        let pr = models.retrieval.params.bind(&g);
        Some(models.retrieval.forward(&pr, xv)?.0)
    } else {
        None
    };
    let (m, f_i) = image_mask(models, cfg, MaskGen::Mean, f, f_hat, part_masks, dims)?;
    let pair = decompose(f_i, &m)?;
    let (loss, report) = match cfg.regime {
        Regime::Advrf => {
            let fb = reconstruction_feedback(models, &pd, xv, &m, &pair, scaling)?;
            let mut terms = vec![];
            if cfg.use_l_g_a {
                terms.push(fb.l_a);
            }
            if cfg.use_l_g_r {
                terms.push(fb.l_r);
            }
            (sum_terms(&terms)?, fb.recon_report())
        }
        _ => {
            let (l, _) = plain_reconstruction(models, &pd, xv, pair.c_a, scaling)?;
            let v = l.item() as f64;
            let report = FeedbackLossReport {
                l_g_a: v,
                l_g_recf: v,
                ..Default::default()
            };
            (l, report)
        }
    };
    let loss = loss.scale(cfg.alpha as f32);
    let total = loss.item() as f64;
    check_finite(
        "reconstruction phase",
        &[("l_g_a", report.l_g_a), ("l_g_r", report.l_g_r), ("total", total)],
        models,
    )?;
    let grads = g.backward(loss)?;
    let (lr, mom, wd) = (state.lr as f32, cfg.momentum as f32, cfg.weight_decay as f32);
    for (params, bound) in [(&mut models.recon_enc.params, &pe), (&mut models.recon_dec.params, &pd)] {
        params.zero_grad();
        params.accumulate(bound, &grads)?;
        params.sgd_momentum_step(lr, mom, wd)?;
    }
    models.set_retrieval_frozen(false);
    if models.retrieval_side_hash() != r_hash || models.mean_gen_hash() != mean_hash {
        return Err(Error::ContractViolation(
            "retrieval-side parameters changed during a reconstruction update".into(),
        ));
    }
    Ok(StepReport {
        feedback: report,
        total,
        ..Default::default()
    })
}

/// One retrieval update: `Θ_R ← Θ_R − lr·∇(L_C + β·L_P + γ·L^RetF_R)` with
/// the reconstruction side frozen, followed by the mean-generator update.
///
/// During warmup epochs only `L_C` is used.
pub fn retu_step(
    state: &mut TrainState,
    x: &Tensor<f32>,
    labels: &[usize],
    part_masks: Option<&Tensor<f32>>,
) -> Result<StepReport> {
    let cfg = &state.config;
    if cfg.regime == Regime::ReconOnly {
        return Ok(StepReport::skipped());
    }
    let models = &mut state.models;
    models.set_recon_frozen(true);
    models.set_retrieval_frozen(false);
    let g_hash = models.recon_side_hash();
    let dims = image_dims(x)?;
    let scaling = cfg.scaling();
    let adversarial = matches!(cfg.regime, Regime::Advrf | Regime::NonAdversarial)
        && state.epoch >= cfg.warmup_epochs;
    let want_lp = adversarial && cfg.beta > 0.0 && cfg.use_l_p;
    let fb_terms = match cfg.regime {
        Regime::NonAdversarial => true,
        _ => cfg.use_l_r_a || cfg.use_l_r_r,
    };
    // fixed masks give the feedback no path into Θ_R
    let want_fb = adversarial
        && cfg.gamma > 0.0
        && fb_terms
        && effective_source(cfg) == MaskSource::Learned;

    let g = Graph::new();
    let xv = g.constant(x.clone());
    let pr = models.retrieval.params.bind(&g);
    let pt = models.pattern_gen.params.bind(&g);
    let pc = models.classifier.params.bind(&g);
    let (f, e) = models.retrieval.forward(&pr, xv)?;
    let l_c = models.classifier.loss(&pc, e, labels)?;
    let mut total = l_c;
    let mut report = StepReport {
        l_c: l_c.item() as f64,
        ..Default::default()
    };
    if want_lp || want_fb {
        let pe = models.recon_enc.params.bind(&g);
        let pd = models.recon_dec.params.bind(&g);
        let f_hat = models.recon_enc.forward(&pe, xv)?;
        if want_lp {
            let (m, f_i) = image_mask(models, cfg, MaskGen::Mean, Some(f), f_hat, part_masks, dims)?;
            let pair = decompose(f_i, &m)?;
            let l_p = parameterization_loss(e, pair.c_a, scaling)?;
            report.l_p = l_p.item() as f64;
            total = total.add(l_p.scale(cfg.beta as f32))?;
        }
        if want_fb {
            let gen = if cfg.live_gen_aux_loss {
                MaskGen::Live(&pt)
            } else {
                MaskGen::Mean
            };
            let (m, f_i) = image_mask(models, cfg, gen, Some(f), f_hat, part_masks, dims)?;
            let pair = decompose(f_i, &m)?;
            let term = if cfg.regime == Regime::NonAdversarial {
                let (l, _) = plain_reconstruction(models, &pd, xv, pair.c_a, scaling)?;
                let v = l.item() as f64;
                report.feedback = FeedbackLossReport {
                    l_r_a: v,
                    l_r_retf: v,
                    ..Default::default()
                };
                l
            } else {
                let fb = retrieval_feedback(models, &pd, xv, &m, &pair, scaling)?;
                report.feedback = fb.retrieval_report();
                let mut terms = vec![];
                if cfg.use_l_r_a {
                    terms.push(fb.l_a);
                }
                if cfg.use_l_r_r {
                    terms.push(fb.l_r);
                }
                sum_terms(&terms)?
            };
            total = total.add(term.scale(cfg.gamma as f32))?;
        }
    }
    report.total = total.item() as f64;
    check_finite(
        "retrieval phase",
        &[
            ("l_c", report.l_c),
            ("l_p", report.l_p),
            ("l_r_a", report.feedback.l_r_a),
            ("l_r_r", report.feedback.l_r_r),
            ("total", report.total),
        ],
        models,
    )?;
    let grads = g.backward(total)?;
    let (lr, mom, wd) = (state.lr as f32, cfg.momentum as f32, cfg.weight_decay as f32);
    for (params, bound) in [
        (&mut models.retrieval.params, &pr),
        (&mut models.pattern_gen.params, &pt),
        (&mut models.classifier.params, &pc),
    ] {
        params.zero_grad();
        params.accumulate(bound, &grads)?;
        params.sgd_momentum_step(lr, mom, wd)?;
    }
    ema_update(&mut models.mean_gen, &models.pattern_gen, cfg.delta)?;
    models.set_recon_frozen(false);
    if models.recon_side_hash() != g_hash {
        return Err(Error::ContractViolation(
            "reconstruction-side parameters changed during a retrieval update".into(),
        ));
    }
    Ok(report)
}

fn row(state: &TrainState, rec: &StepReport, ret: &StepReport) -> MetricsRow {
    MetricsRow {
        epoch: state.epoch,
        step: state.global_step,
        l_c: ret.l_c,
        l_p: ret.l_p,
        l_g_a: rec.feedback.l_g_a,
        l_g_r: rec.feedback.l_g_r,
        l_r_a: ret.feedback.l_r_a,
        l_r_r: ret.feedback.l_r_r,
        lr: state.lr,
        recall_at_1: None,
    }
}

fn with_batch(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, batch {batch}: {m}")),
        other => other,
    }
}

/// Runs one epoch over the seen split and returns its metrics rows.
fn run_epoch(
    state: &mut TrainState,
    images: &Tensor<f32>,
    labels: &[usize],
    masks: Option<&Tensor<f32>>,
) -> Result<Vec<MetricsRow>> {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut state.rng);
    let batches: Vec<Vec<usize>> = order
        .chunks(state.config.batch_size)
        .map(<[usize]>::to_vec)
        .collect();
    let fetch = |idx: &[usize]| {
        (
            crate::data_eval::gather(images, idx),
            idx.iter().map(|&i| labels[i]).collect::<Vec<_>>(),
            masks.map(|m| crate::data_eval::gather(m, idx)),
        )
    };
    let epoch = state.epoch;
    let mut rows = Vec::with_capacity(batches.len());
    match state.config.alternate_granularity {
        Granularity::Batch => {
            for (b, idx) in batches.iter().enumerate() {
                let (x, y, m) = fetch(idx);
                let rec = recu_step(state, &x, m.as_ref()).map_err(|e| with_batch(e, epoch, b))?;
                let ret = retu_step(state, &x, &y, m.as_ref()).map_err(|e| with_batch(e, epoch, b))?;
                rows.push(row(state, &rec, &ret));
                state.global_step += 1;
            }
        }
        Granularity::Epoch => {
            let mut recs = Vec::with_capacity(batches.len());
            for (b, idx) in batches.iter().enumerate() {
                let (x, _, m) = fetch(idx);
                recs.push(recu_step(state, &x, m.as_ref()).map_err(|e| with_batch(e, epoch, b))?);
            }
            for (b, idx) in batches.iter().enumerate() {
                let (x, y, m) = fetch(idx);
                let ret = retu_step(state, &x, &y, m.as_ref()).map_err(|e| with_batch(e, epoch, b))?;
                rows.push(row(state, &recs[b], &ret));
                state.global_step += 1;
            }
        }
    }
    Ok(rows)
}

/// Trains from a fresh state.
pub fn train(config: &TrainConfig, data: &RetrievalDataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    if data.image_size() != config.image_size {
        return Err(Error::Config(format!(
            "dataset images are {}px but image_size={}",
            data.image_size(),
            config.image_size
        )));
    }
    resume(TrainState::new(config, data.num_seen())?, data, out_dir)
}

/// Continues `state` until `state.config.epochs`. With `out_dir`, writes
/// `metrics.csv`, periodic checkpoints and `final.advrf`.
pub fn resume(mut state: TrainState, data: &RetrievalDataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let seen = data.view(Split::Seen)?;
    if seen.labels.iter().any(|&l| l >= state.models.classifier.num_classes()) {
        return Err(Error::InvalidArgument(
            "seen labels exceed the classifier's class count".into(),
        ));
    }
    let mut writer = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.csv");
            let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
            w.write_record(METRICS_HEADER).map_err(|e| csv_err(&path, e))?;
            w.flush().map_err(|e| Error::io(&path, e))?;
            Some((w, path))
        }
        None => None,
    };
    let mut history = Vec::new();
    let mut evals = Vec::new();
    let epochs = state.config.epochs;
    while state.epoch < epochs {
        let lock = data.lock_for_training()?;
        let mut rows = run_epoch(&mut state, &seen.images, &seen.labels, seen.part_masks.as_ref())?;
        drop(lock);
        state.epoch += 1;
        let cfg = &state.config;
        if state.epoch % cfg.lr_decay_every_epochs == 0 {
            state.lr *= cfg.lr_decay_factor;
        }
        if cfg.eval_every > 0 && (state.epoch % cfg.eval_every == 0 || state.epoch == epochs) {
            let report = evaluate(&state, data, Split::Unseen, &EVAL_KS)?;
            log::info!(
                "epoch {}: unseen Recall@1 {:.4}",
                state.epoch,
                report.recall(1).unwrap_or(f64::NAN)
            );
            if let Some(last) = rows.last_mut() {
                last.recall_at_1 = report.recall(1);
            }
            evals.push((state.epoch, report));
        }
        if let Some((w, path)) = writer.as_mut() {
            for r in &rows {
                w.write_record(r.record()).map_err(|e| csv_err(path, e))?;
            }
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        if let Some(dir) = out_dir {
            let every = state.config.checkpoint_every;
            if every > 0 && state.epoch % every == 0 {
                state
                    .to_checkpoint()
                    .save(dir.join(format!("checkpoint_epoch{:03}.advrf", state.epoch)))?;
            }
        }
        history.extend(rows);
    }
    if let Some(dir) = out_dir {
        state.to_checkpoint().save(dir.join("final.advrf"))?;
    }
    Ok(TrainOutcome {
        state,
        history,
        evals,
    })
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// How embeddings are produced for retrieval.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbedMode {
    /// `E_R = GAP(F)` from the retrieval model only.
    Retrieval,
    /// Pooled reconstruction-encoder output.
    ReconEncoder,
    /// Both models run: pooled `c_a` under the mean mask, with the decoder
    /// evaluated as well. Used as the timing reference.
    BothModels,
}

impl EmbedMode {
    pub fn for_regime(regime: Regime) -> Self {
        match regime {
            Regime::ReconOnly => EmbedMode::ReconEncoder,
            _ => EmbedMode::Retrieval,
        }
    }

    /// Like `for_regime`, except that an AdvRF run with feedback but without
    /// `L_P` has nothing distilled into `E_R` and is embedded with both models.
    pub fn for_config(cfg: &TrainConfig) -> Self {
        let feedback = cfg.use_l_g_a || cfg.use_l_g_r || cfg.use_l_r_a || cfg.use_l_r_r;
        if cfg.regime == Regime::Advrf && feedback && !(cfg.use_l_p && cfg.beta > 0.0) {
            EmbedMode::BothModels
        } else {
            EmbedMode::for_regime(cfg.regime)
        }
    }
}

/// Retrieval-time embedding; the reconstruction components are never called.
pub fn embed_for_retrieval(models: &AdvrfModels<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let calls = (models.recon_enc.call_count(), models.recon_dec.call_count());
    let out = embed_with(models, EmbedMode::Retrieval, x)?;
    if (models.recon_enc.call_count(), models.recon_dec.call_count()) != calls {
        return Err(Error::ContractViolation(
            "reconstruction model invoked during retrieval embedding".into(),
        ));
    }
    Ok(out)
}

fn embed_chunk(models: &AdvrfModels<f32>, mode: EmbedMode, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    match mode {
        EmbedMode::Retrieval => Ok(models.retrieval.embed(x)?.1),
        EmbedMode::ReconEncoder => {
            let g = Graph::new();
            let pe = models.recon_enc.params.bind_untracked(&g);
            let e = models.recon_enc.forward(&pe, g.constant(x.clone()))?.global_average_pool()?;
            Ok((*e.value()).clone())
        }
        EmbedMode::BothModels => {
            let g = Graph::new();
            let xv = g.constant(x.clone());
            let (n, h, w) = image_dims(x)?;
            let pr = models.retrieval.params.bind_untracked(&g);
            let pe = models.recon_enc.params.bind_untracked(&g);
            let pd = models.recon_dec.params.bind_untracked(&g);
            let (f, _) = models.retrieval.forward(&pr, xv)?;
            let f_hat = models.recon_enc.forward(&pe, xv)?;
            let m_hat = crate::discrepancy::pattern_map(f, &models.mean_gen)?;
            let (m, f_i) = amplify(m_hat, f_hat, h, w, models.arch.resize_mode)?;
            let pair = decompose(f_i, &m)?;
            models.recon_dec.forward(&pd, pair.c_a)?;
            let e = pair.c_a.global_average_pool()?;
            debug_assert_eq!(e.shape()[0], n);
            Ok((*e.value()).clone())
        }
    }
}

/// Embeds `x` in chunks of 64 images.
pub fn embed_with(models: &AdvrfModels<f32>, mode: EmbedMode, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let n = image_dims(x)?.0;
    let idx: Vec<usize> = (0..n).collect();
    let mut parts = Vec::new();
    for chunk in idx.chunks(EMBED_CHUNK) {
        let xb = if chunk.len() == n {
            x.clone()
        } else {
            crate::data_eval::gather(x, chunk)
        };
        parts.push(embed_chunk(models, mode, &xb)?);
    }
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    Tensor::stack(&refs)
}

/// Recall@K of `split` under the regime's embedding mode.
pub fn evaluate(state: &TrainState, data: &RetrievalDataset, split: Split, ks: &[usize]) -> Result<EvalReport> {
    let view = data.view(split)?;
    let emb = embed_with(&state.models, EmbedMode::for_config(&state.config), &view.images)?;
    recall_at_k(&emb, &view.labels, ks)
}

/// Wall-clock embedding times (best of `reps`) in milliseconds.
#[derive(Clone, Copy, Debug)]
pub struct EmbedTiming {
    pub retrieval_ms: f64,
    pub both_models_ms: f64,
}

pub fn time_embedding(models: &AdvrfModels<f32>, x: &Tensor<f32>, reps: usize) -> Result<EmbedTiming> {
    let time = |mode: EmbedMode| -> Result<f64> {
        let mut best = f64::INFINITY;
        for _ in 0..reps.max(1) {
            let t = Instant::now();
            match mode {
                EmbedMode::Retrieval => embed_for_retrieval(models, x)?,
                _ => embed_with(models, mode, x)?,
            };
            best = best.min(t.elapsed().as_secs_f64() * 1e3);
        }
        Ok(best)
    };
    Ok(EmbedTiming {
        retrieval_ms: time(EmbedMode::Retrieval)?,
        both_models_ms: time(EmbedMode::BothModels)?,
    })
}
