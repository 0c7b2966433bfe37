//! Pre-training stages, self-training and supervised fine-tuning.

mod data;
mod finetune;
mod pretrain;
mod sampler;
#[cfg(test)]
mod tests;

pub use data::{clip_offsets, prepare, video_clip, PreparedSet};
pub use finetune::{classify_set, FinetuneRecord, FinetuneState, Finetuner};
pub use pretrain::{
    checkpoint_name, embed_pairs, make_teacher_targets, pretrain_loss, self_train, token_fingerprint, Lineage,
    LineageEntry, LossSettings, PairBatchItem, PairPlans, Pretrainer, TeacherSnapshot, TrainState, LINEAGE_FILE,
};
pub use sampler::{weighted_sample, SamplerWeights, CLASS_WEIGHT_EPS, CLASS_WEIGHT_SCALE};

pub use crate::config::{FinetuneConfig, FinetuneLoss, MaskConfig, TrainConfig};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{LossBreakdown, Stage};
use crate::rng::{self, domain};

/// Loss breakdown and learning rate of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub iteration: usize,
    pub step: usize,
    pub lr: f64,
    pub recon: f64,
    pub inter: f64,
    pub intra: f64,
    pub total: f64,
}

/// Everything a run reports, one metric line each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    Step(StepRecord),
    Finetune(FinetuneRecord),
    Checkpoint {
        name: String,
        stage: Stage,
        iteration: usize,
        fingerprint: String,
        parent: Option<String>,
    },
}

pub(crate) fn stage_code(stage: Stage) -> u64 {
    match stage {
        Stage::Stage1 => 1,
        Stage::Stage2 => 2,
        Stage::Finetune => 3,
    }
}

pub(crate) fn check_finite(b: &LossBreakdown, iteration: usize, step: usize) -> Result<()> {
    if [b.recon, b.inter, b.intra, b.total].iter().all(|x| x.is_finite()) {
        return Ok(());
    }
    Err(Error::NonFinite(format!(
        "{:?} iteration {iteration} step {step}: recon {} inter {} intra {} total {}",
        b.stage, b.recon, b.inter, b.intra, b.total
    )))
}

/// Epoch permutation of `0..n`.
pub(crate) fn epoch_order(seed: u64, stage: u64, iteration: usize, epoch: usize, n: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, &[domain::SHUFFLE, stage, iteration as u64, epoch as u64]));
    perm
}

/// Micro-batches of optimizer step `step`. Each epoch is a fresh
/// permutation; the trailing partial batch is dropped.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_indices(
    seed: u64,
    stage: u64,
    iteration: usize,
    n: usize,
    batch: usize,
    accum: usize,
    steps_per_epoch: usize,
    step: usize,
) -> Vec<Vec<usize>> {
    let (epoch, within) = (step / steps_per_epoch, step % steps_per_epoch);
    let perm = epoch_order(seed, stage, iteration, epoch, n);
    (0..accum)
        .map(|m| {
            let start = (within * accum + m) * batch;
            perm[start..start + batch].to_vec()
        })
        .collect()
}
