//! Reconstruction feedback (trains the reconstruction side) and its negated
//! counterpart, retrieval feedback (trains the retrieval side).

use crate::discrepancy::{DiscrepancyPair, PatternMap, Resolution};
use crate::error::{Error, Result};
use crate::models::AdvrfModels;
use crate::tensor::{batch_masked_frobenius, BoundParams, Element, NormScaling, Var};

/// Scalar values of the six feedback losses for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FeedbackLossReport {
    pub l_g_a: f64,
    pub l_g_r: f64,
    pub l_g_recf: f64,
    pub l_r_a: f64,
    pub l_r_r: f64,
    pub l_r_retf: f64,
}

/// Graph handles of one feedback evaluation.
///
/// `l_a` penalizes the non-discrepancy region reconstructed from `c_a`;
/// `l_r` penalizes the discrepancy region reconstructed from `c_r`.
#[derive(Clone, Copy)]
pub struct Feedback<'g, E: Element> {
    pub l_a: Var<'g, E>,
    pub l_r: Var<'g, E>,
    pub total: Var<'g, E>,
    pub x_a: Var<'g, E>,
    pub x_r: Var<'g, E>,
}

impl<'g, E: Element> Feedback<'g, E> {
    /// Report fragment with the reconstruction-side fields filled.
    pub fn recon_report(&self) -> FeedbackLossReport {
        let (a, r) = (self.l_a.item().to_f64_lossy(), self.l_r.item().to_f64_lossy());
        FeedbackLossReport {
            l_g_a: a,
            l_g_r: r,
            l_g_recf: self.total.item().to_f64_lossy(),
            ..Default::default()
        }
    }

    /// Report fragment with the retrieval-side fields filled.
    pub fn retrieval_report(&self) -> FeedbackLossReport {
        let (a, r) = (self.l_a.item().to_f64_lossy(), self.l_r.item().to_f64_lossy());
        FeedbackLossReport {
            l_r_a: a,
            l_r_r: r,
            l_r_retf: self.total.item().to_f64_lossy(),
            ..Default::default()
        }
    }
}

impl FeedbackLossReport {
    pub fn merge(self, other: FeedbackLossReport) -> FeedbackLossReport {
        FeedbackLossReport {
            l_g_a: self.l_g_a + other.l_g_a,
            l_g_r: self.l_g_r + other.l_g_r,
            l_g_recf: self.l_g_recf + other.l_g_recf,
            l_r_a: self.l_r_a + other.l_r_a,
            l_r_r: self.l_r_r + other.l_r_r,
            l_r_retf: self.l_r_retf + other.l_r_retf,
        }
    }
}

struct Masked<'g, E: Element> {
    l_a: Var<'g, E>,
    l_r: Var<'g, E>,
    x_a: Var<'g, E>,
    x_r: Var<'g, E>,
}

fn masked_pair<'g, E: Element>(
    models: &AdvrfModels<E>,
    dec: &BoundParams<'g, E>,
    x: Var<'g, E>,
    m: &PatternMap<'g, E>,
    pair: &DiscrepancyPair<'g, E>,
    scaling: NormScaling,
) -> Result<Masked<'g, E>> {
    if m.resolution != Resolution::Image {
        return Err(Error::ContractViolation(
            "feedback losses need an image-resolution pattern map".into(),
        ));
    }
    let x_a = models.recon_dec.forward(dec, pair.c_a)?;
    let x_r = models.recon_dec.forward(dec, pair.c_r)?;
    let (l_a, l_r) = feedback_terms(x, x_a, x_r, m, scaling)?;
    Ok(Masked { l_a, l_r, x_a, x_r })
}

/// `(‖(1 − M) ⊙ (X − X_a)‖, ‖M ⊙ (X − X_r)‖)` for given reconstructions.
pub fn feedback_terms<'g, E: Element>(
    x: Var<'g, E>,
    x_a: Var<'g, E>,
    x_r: Var<'g, E>,
    m: &PatternMap<'g, E>,
    scaling: NormScaling,
) -> Result<(Var<'g, E>, Var<'g, E>)> {
    if m.resolution != Resolution::Image {
        return Err(Error::ContractViolation(
            "feedback losses need an image-resolution pattern map".into(),
        ));
    }
    let l_a = batch_masked_frobenius(x, x_a, Some(m.values.one_minus()), scaling)?;
    let l_r = batch_masked_frobenius(x, x_r, Some(m.values), scaling)?;
    Ok((l_a, l_r))
}

/// `L^R_G = ‖M ⊙ (X − G_D(c_r))‖`, `L^A_G = ‖(1 − M) ⊙ (X − G_D(c_a))‖`,
/// `L^RecF_G = L^A_G + L^R_G`. The retrieval side must be frozen.
pub fn reconstruction_feedback<'g, E: Element>(
    models: &AdvrfModels<E>,
    dec: &BoundParams<'g, E>,
    x: Var<'g, E>,
    m: &PatternMap<'g, E>,
    pair: &DiscrepancyPair<'g, E>,
    scaling: NormScaling,
) -> Result<Feedback<'g, E>> {
    if !models.retrieval_frozen() {
        return Err(Error::ContractViolation(
            "reconstruction feedback with an unfrozen retrieval side".into(),
        ));
    }
    if models.recon_frozen() {
        return Err(Error::ContractViolation(
            "reconstruction feedback needs a trainable decoder".into(),
        ));
    }
    let k = masked_pair(models, dec, x, m, pair, scaling)?;
    Ok(Feedback {
        l_a: k.l_a,
        l_r: k.l_r,
        total: k.l_a.add(k.l_r)?,
        x_a: k.x_a,
        x_r: k.x_r,
    })
}

/// Negated reconstruction losses; gradient reaches the retrieval side through
/// the mask. The reconstruction side must be frozen.
pub fn retrieval_feedback<'g, E: Element>(
    models: &AdvrfModels<E>,
    dec: &BoundParams<'g, E>,
    x: Var<'g, E>,
    m: &PatternMap<'g, E>,
    pair: &DiscrepancyPair<'g, E>,
    scaling: NormScaling,
) -> Result<Feedback<'g, E>> {
    if !models.recon_frozen() {
        return Err(Error::ContractViolation(
            "retrieval feedback with an unfrozen reconstruction side".into(),
        ));
    }
    let k = masked_pair(models, dec, x, m, pair, scaling)?;
    let (l_a, l_r) = (k.l_a.neg(), k.l_r.neg());
    Ok(Feedback {
        l_a,
        l_r,
        total: l_a.add(l_r)?,
        x_a: k.x_a,
        x_r: k.x_r,
    })
}

/// Non-adversarial reconstruction: `‖X − G_D(c_a)‖` under a full mask, with no
/// opposing-region objective.
pub fn plain_reconstruction<'g, E: Element>(
    models: &AdvrfModels<E>,
    dec: &BoundParams<'g, E>,
    x: Var<'g, E>,
    c_a: Var<'g, E>,
    scaling: NormScaling,
) -> Result<(Var<'g, E>, Var<'g, E>)> {
    let x_a = models.recon_dec.forward(dec, c_a)?;
    Ok((batch_masked_frobenius(x, x_a, None, scaling)?, x_a))
}
