//! Supervised fine-tuning of pre-trained encoders.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::data::{clip_offsets, PreparedSet};
use super::sampler::weighted_sample;
use super::{epoch_order, stage_code, Event};
use crate::config::{FinetuneConfig, FinetuneLoss};
use crate::error::{Error, Result};
use crate::evaluation::{multiclip_aggregate, multiclip_aggregate_probs};
use crate::io::{Checkpoint, CheckpointMeta, Progress};
use crate::masking::{make_mask, MaskPlan, MaskStrategy};
use crate::model::{grid_of, ClassifierBundle, ClassifyMode, ModelBundle, ModelConfig};
use crate::numerics::{LrSchedule, OptimizerState, ParamId, Tape, Tensor, Var};
use crate::objectives::Stage;
use crate::rng::{self, domain};
use crate::tokenizer::Modality;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub step: usize,
    pub lr: f64,
    /// Effective learning rate of the audio and video encoders (absent when unused).
    pub lr_audio: Option<f64>,
    pub lr_video: Option<f64>,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneState {
    pub bundle: ClassifierBundle,
    pub opt: OptimizerState,
    pub step: usize,
}

pub struct Finetuner<'a> {
    pub cfg: &'a FinetuneConfig,
    pub data: &'a PreparedSet,
    pub model: ModelConfig,
    pub schedule: LrSchedule,
    draws_per_epoch: usize,
}

fn first_param(bundle: &ClassifierBundle, prefix: &str) -> Option<ParamId> {
    bundle.params.iter().find(|(_, n, _)| n.starts_with(prefix)).map(|(id, _, _)| id)
}

impl<'a> Finetuner<'a> {
    pub fn new(cfg: &'a FinetuneConfig, data: &'a PreparedSet, model: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        if data.num_classes == 0 || data.labels.iter().flatten().any(|&l| l >= data.num_classes) {
            return Err(Error::invalid(format!("labels do not fit {} classes", data.num_classes)));
        }
        if data.model.audio != model.audio || data.model.video != model.video {
            return Err(Error::Config("dataset was prepared for a different token geometry".into()));
        }
        let draws = if cfg.weighted_sampling && cfg.sample_size > 0 { cfg.sample_size } else { data.len() };
        if draws < cfg.batch {
            return Err(Error::Config(format!("{draws} draws per epoch cannot fill a batch of {}", cfg.batch)));
        }
        Ok(Finetuner {
            schedule: LrSchedule {
                base_lr: cfg.lr_base,
                warmup_epochs: cfg.warmup_epochs,
                epochs: cfg.epochs,
                min_lr: cfg.min_lr,
                steps_per_epoch: draws / cfg.batch,
                batch_size: cfg.batch,
            },
            cfg,
            data,
            model: model.clone(),
            draws_per_epoch: draws,
        })
    }

    pub fn total_steps(&self) -> usize {
        let full = self.schedule.total_steps();
        if self.cfg.max_steps > 0 { full.min(self.cfg.max_steps) } else { full }
    }

    /// Fresh classifier whose encoders are copied from `pretrained` when given.
    pub fn init_state(&self, pretrained: Option<&ModelBundle>) -> Result<FinetuneState> {
        let seed = rng::derive(self.cfg.seed, &[stage_code(Stage::Finetune)]);
        let mut bundle = ClassifierBundle::init(&self.model, self.cfg.mode, self.data.num_classes, seed)?;
        if let Some(pre) = pretrained {
            let is_encoder = |n: &str| n.starts_with("audio.") || n.starts_with("video.");
            let wanted = bundle.params.iter().filter(|(_, n, _)| is_encoder(n)).count();
            let copied = bundle.params.copy_matching(&pre.params, is_encoder);
            if copied != wanted {
                return Err(Error::Config(format!(
                    "pre-trained model provides {copied} of {wanted} encoder parameters"
                )));
            }
        }
        let mut opt = OptimizerState::new(&bundle.params, self.cfg.optim);
        if self.cfg.mode == ClassifyMode::AV {
            let video: Vec<ParamId> = bundle
                .params
                .iter()
                .filter(|(_, n, _)| n.starts_with("video."))
                .map(|(id, _, _)| id)
                .collect();
            for id in video {
                opt.set_lr_scale(id, self.cfg.video_lr_mult);
            }
        }
        Ok(FinetuneState { bundle, opt, step: 0 })
    }

    fn step_indices(&self, step: usize) -> Result<Vec<usize>> {
        let spe = self.schedule.steps_per_epoch;
        let (epoch, within) = (step / spe, step % spe);
        let order = if self.cfg.weighted_sampling {
            let mut r = rng::stream(self.cfg.seed, &[domain::SAMPLER, epoch as u64]);
            weighted_sample(&self.data.labels, self.data.num_classes, self.draws_per_epoch, &mut r)?
        } else {
            epoch_order(self.cfg.seed, stage_code(Stage::Finetune), 0, epoch, self.data.len())
        };
        Ok(order[within * self.cfg.batch..(within + 1) * self.cfg.batch].to_vec())
    }

    fn train_plan(&self, m: Modality, step: usize, slot: usize) -> Result<MaskPlan> {
        let grid = grid_of(&self.model, m);
        if self.cfg.mask_ratio == 0.0 {
            return Ok(MaskPlan::keep_all(grid.len()));
        }
        let strategy = match m {
            Modality::Audio => MaskStrategy::TimeFreq,
            Modality::Video => MaskStrategy::SpaceTime,
        };
        let seed = rng::derive(self.cfg.seed, &[domain::FINETUNE_MASK, step as u64, slot as u64, m as u64]);
        make_mask(grid, self.cfg.mask_ratio, strategy, seed)
    }

    /// Loss of the batch at `step` with training masks applied.
    pub fn batch_loss(&self, tape: &Tape, bundle: &ClassifierBundle, step: usize) -> Result<Var> {
        let idx = self.step_indices(step)?;
        let mode = self.cfg.mode;
        let mut logits = Vec::with_capacity(idx.len());
        for (slot, &i) in idx.iter().enumerate() {
            let pa = if mode.uses(Modality::Audio) { Some(self.train_plan(Modality::Audio, step, slot)?) } else { None };
            let pv = if mode.uses(Modality::Video) { Some(self.train_plan(Modality::Video, step, slot)?) } else { None };
            let a = pa.as_ref().map(|p| (&self.data.audio[i], p));
            let v = pv.as_ref().map(|p| (&self.data.video[i], p));
            logits.push(bundle.forward(tape, a, v)?);
        }
        let logits = tape.concat_rows(&logits)?;
        match self.cfg.loss {
            FinetuneLoss::Bce => {
                let c = self.data.num_classes;
                let mut t = Tensor::zeros(&[idx.len(), c]);
                for (r, &i) in idx.iter().enumerate() {
                    for &l in &self.data.labels[i] {
                        t.data_mut()[r * c + l] = 1.0;
                    }
                }
                tape.bce_with_logits(logits, &t)
            }
            FinetuneLoss::Ce => {
                let t: Vec<usize> = idx.iter().map(|&i| self.data.labels[i][0]).collect();
                tape.cross_entropy_rows(logits, &t)
            }
        }
    }

    pub fn step(&self, state: &mut FinetuneState) -> Result<FinetuneRecord> {
        let step = state.step;
        let lr = self.schedule.lr_at(step);
        let tape = Tape::new();
        let loss = self.batch_loss(&tape, &state.bundle, step)?;
        let value = tape.scalar_value(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("fine-tune step {step}: loss {value}")));
        }
        let grads: HashMap<ParamId, Tensor> = tape.backward(loss)?.into_params();
        let scaled = |prefix: &str| first_param(&state.bundle, prefix).map(|id| lr * state.opt.lr_scale(id));
        let (lr_audio, lr_video) = (scaled("audio."), scaled("video."));
        state.opt.step(&mut state.bundle.params, &grads, lr)?;
        state.step += 1;
        Ok(FinetuneRecord {
            step,
            lr,
            lr_audio,
            lr_video,
            loss: value,
        })
    }

    pub fn run_until(&self, state: &mut FinetuneState, until: usize, sink: &mut dyn FnMut(&Event) -> Result<()>) -> Result<()> {
        let end = until.min(self.total_steps());
        while state.step < end {
            let rec = self.step(state)?;
            sink(&Event::Finetune(rec))?;
        }
        Ok(())
    }

    pub fn run(&self, pretrained: Option<&ModelBundle>, sink: &mut dyn FnMut(&Event) -> Result<()>) -> Result<FinetuneState> {
        let mut state = self.init_state(pretrained)?;
        self.run_until(&mut state, usize::MAX, sink)?;
        Ok(state)
    }

    pub fn checkpoint(&self, state: &FinetuneState, parent: Option<String>, with_optimizer: bool) -> Checkpoint {
        Checkpoint::classifier(
            &state.bundle,
            with_optimizer.then_some(&state.opt),
            CheckpointMeta {
                train: serde_json::to_value(self.cfg).expect("config serializes"),
                stage: Stage::Finetune,
                iteration: 0,
                parent,
                progress: Progress {
                    seed: self.cfg.seed,
                    step: state.step,
                },
            },
        )
    }

    pub fn resume(&self, ck: &Checkpoint) -> Result<FinetuneState> {
        ck.check_resume(&self.model, &serde_json::to_value(self.cfg)?, Stage::Finetune)?;
        Ok(FinetuneState {
            bundle: ck.classifier_bundle()?,
            opt: ck.optimizer.clone().expect("checked by check_resume"),
            step: ck.header.progress.step,
        })
    }
}

/// Unmasked `N x C` scores. Video modes average over `clips` clips spread
/// across each video while the audio input stays fixed.
pub fn classify_set(bundle: &ClassifierBundle, data: &PreparedSet, clips: usize, average_probs: bool) -> Result<Tensor> {
    let mode = bundle.model.mode;
    let clip_frames = bundle.model.config.video.frames;
    let mut rows = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let pa = MaskPlan::keep_all(data.audio[i].rows());
        let pv = MaskPlan::keep_all(data.video[i].rows());
        let audio = mode.uses(Modality::Audio).then_some((&data.audio[i], &pa));
        let per_clip = if mode.uses(Modality::Video) {
            let offsets = clip_offsets(data.full_video[i].shape()[0], clip_frames, clips.max(1));
            let mut logits = Vec::with_capacity(offsets.len());
            for off in offsets {
                let patches = data.clip_patches(i, off)?;
                let tape = Tape::inference();
                let out = bundle.forward(&tape, audio, Some((&patches, &pv)))?;
                logits.push(tape.value(out).data().to_vec());
            }
            Tensor::from_rows(&logits)?
        } else {
            let tape = Tape::inference();
            let out = bundle.forward(&tape, audio, None)?;
            tape.value(out).as_ref().clone()
        };
        let agg = if average_probs { multiclip_aggregate_probs(&per_clip)? } else { multiclip_aggregate(&per_clip)? };
        rows.push(agg.data().to_vec());
    }
    Tensor::from_rows(&rows)
}
