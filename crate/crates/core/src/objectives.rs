//! Reconstruction and contrastive losses and their weighted totals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tau_inter: f64,
    pub tau_intra: f64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            alpha: 0.1,
            beta: 0.01,
            tau_inter: 0.1,
            tau_intra: 1.0,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_inter > 0.0 && self.tau_intra > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Stage1,
    Stage2,
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub stage: Stage,
    pub recon: f64,
    pub inter: f64,
    pub intra: f64,
    pub total: f64,
}

/// Differentiable loss terms of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub recon: Var,
    pub inter: Var,
    pub intra: Var,
}

/// `recon + alpha * inter + beta * intra` and its scalar breakdown.
pub fn total_loss(tape: &Tape, parts: LossParts, cfg: &ContrastConfig, stage: Stage) -> Result<(Var, LossBreakdown)> {
    let weighted_inter = tape.scale(parts.inter, cfg.alpha);
    let weighted_intra = tape.scale(parts.intra, cfg.beta);
    let total = tape.add(tape.add(parts.recon, weighted_inter)?, weighted_intra)?;
    let (recon, inter, intra) = (
        tape.scalar_value(parts.recon),
        tape.scalar_value(parts.inter),
        tape.scalar_value(parts.intra),
    );
    Ok((
        total,
        LossBreakdown {
            stage,
            recon,
            inter,
            intra,
            total: tape.scalar_value(total),
        },
    ))
}

/// Stage-1 total: raw reconstruction plus weighted contrast.
pub fn total_stage1(tape: &Tape, parts: LossParts, cfg: &ContrastConfig) -> Result<(Var, LossBreakdown)> {
    total_loss(tape, parts, cfg, Stage::Stage1)
}

/// Stage-2 total: contextualized reconstruction plus weighted contrast.
pub fn total_stage2(tape: &Tape, parts: LossParts, cfg: &ContrastConfig) -> Result<(Var, LossBreakdown)> {
    total_loss(tape, parts, cfg, Stage::Stage2)
}

/// Mean squared error over the masked rows of `pred` (patch rows, no class
/// row) against the same rows of `target`. `None` when nothing is masked.
pub fn masked_mse(tape: &Tape, pred: Var, target: &Tensor, plan: &MaskPlan) -> Result<Option<Var>> {
    let shape = tape.shape(pred);
    if shape != target.shape() {
        return Err(Error::shape(
            "masked_mse",
            format!("prediction {shape:?} vs target {:?}", target.shape()),
        ));
    }
    if shape[0] != plan.len() {
        return Err(Error::shape(
            "masked_mse",
            format!("{} rows for a plan of {}", shape[0], plan.len()),
        ));
    }
    if plan.masked.is_empty() {
        return Ok(None);
    }
    let p = tape.gather_rows(pred, &plan.masked)?;
    let t = tape.constant(target.gather_rows(&plan.masked)?);
    Ok(Some(tape.mse(p, t)?))
}

fn two_modality_recon(
    tape: &Tape,
    audio: (Var, &Tensor, &MaskPlan),
    video: (Var, &Tensor, &MaskPlan),
) -> Result<Var> {
    let a = masked_mse(tape, audio.0, audio.1, audio.2)?;
    let v = masked_mse(tape, video.0, video.1, video.2)?;
    match (a, v) {
        (Some(a), Some(v)) => tape.add(a, v),
        (Some(x), None) | (None, Some(x)) => Ok(x),
        (None, None) => Err(Error::invalid("reconstruction loss with nothing masked in either modality")),
    }
}

/// Raw-patch reconstruction over masked audio and video positions.
pub fn loss_raw_recon(
    tape: &Tape,
    audio: (Var, &Tensor, &MaskPlan),
    video: (Var, &Tensor, &MaskPlan),
) -> Result<Var> {
    two_modality_recon(tape, audio, video)
}

/// Regression onto teacher rows (one `width`-row per patch position).
pub fn loss_ctx_recon(
    tape: &Tape,
    width: usize,
    audio: (Var, &Tensor, &MaskPlan),
    video: (Var, &Tensor, &MaskPlan),
) -> Result<Var> {
    for t in [audio.1, video.1] {
        if t.cols() != width {
            return Err(Error::shape(
                "loss_ctx_recon",
                format!("teacher rows of width {} for model width {width}", t.cols()),
            ));
        }
    }
    two_modality_recon(tape, audio, video)
}

/// `-(1/B) sum_i log softmax_j(cos(x_i, y_j) / tau)[i]`.
pub fn info_nce(tape: &Tape, x: Var, y: Var, tau: f64) -> Result<Var> {
    let (sx, sy) = (tape.shape(x), tape.shape(y));
    if sx != sy {
        return Err(Error::shape("info_nce", format!("{sx:?} vs {sy:?}")));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature {tau} must be positive")));
    }
    let xn = tape.l2_normalize_rows(x)?;
    let yn = tape.l2_normalize_rows(y)?;
    let sim = tape.matmul(xn, tape.transpose(yn)?)?;
    let logits = tape.scale(sim, 1.0 / tau);
    let targets: Vec<usize> = (0..sx[0]).collect();
    tape.cross_entropy_rows(logits, &targets)
}

/// Symmetric audio-video contrast.
pub fn loss_inter(tape: &Tape, a: Var, v: Var, tau: f64) -> Result<Var> {
    let av = info_nce(tape, a, v, tau)?;
    let va = info_nce(tape, v, a, tau)?;
    Ok(tape.scale(tape.add(av, va)?, 0.5))
}

/// Contrast of each modality against its second masked view.
pub fn loss_intra(tape: &Tape, a: Var, a2: Var, v: Var, v2: Var, tau: f64) -> Result<Var> {
    let aa = info_nce(tape, a, a2, tau)?;
    let vv = info_nce(tape, v, v2, tau)?;
    Ok(tape.scale(tape.add(aa, vv)?, 0.5))
}
