//! Stage-1 pre-training, teacher targets, stage-2 students and the
//! self-training loop.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::PreparedSet;
use super::{batch_indices, check_finite, stage_code, Event, StepRecord};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::io::tensor_file::write_atomic;
use crate::io::{Checkpoint, CheckpointMeta, Progress};
use crate::masking::{make_mask, MaskPlan};
use crate::model::{grid_of, pool_embedding, Mavil, ModelBundle, ModelConfig, PosTables, TargetKind};
use crate::numerics::{LrSchedule, OptimizerState, ParamId, ParamStore, Tape, Tensor, Var};
use crate::objectives::{
    loss_ctx_recon, loss_inter, loss_intra, loss_raw_recon, total_loss, ContrastConfig, LossBreakdown, LossParts, Stage,
};
use crate::rng::{self, domain};
use crate::tokenizer::Modality;

/// Masks of one pair: the main view of each modality plus a second view.
#[derive(Clone, Debug)]
pub struct PairPlans {
    pub audio: MaskPlan,
    pub video: MaskPlan,
    pub audio2: MaskPlan,
    pub video2: MaskPlan,
}

impl PairPlans {
    pub fn draw(model: &ModelConfig, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        let m = &cfg.mask;
        let (ga, gv) = (grid_of(model, Modality::Audio), grid_of(model, Modality::Video));
        let s2 = rng::derive(seed, &[domain::SECOND_VIEW]);
        Ok(PairPlans {
            audio: make_mask(ga, m.ratio_audio, m.strategy_audio, rng::derive(seed, &[0]))?,
            video: make_mask(gv, m.ratio_video, m.strategy_video, rng::derive(seed, &[1]))?,
            audio2: make_mask(ga, m.ratio_audio, m.strategy_audio, rng::derive(s2, &[0]))?,
            video2: make_mask(gv, m.ratio_video, m.strategy_video, rng::derive(s2, &[1]))?,
        })
    }
}

/// One pair on the tape: patches, masks and (for stage 2) teacher rows.
#[derive(Clone, Copy, Debug)]
pub struct PairBatchItem<'a> {
    pub audio: &'a Tensor,
    pub video: &'a Tensor,
    pub plans: &'a PairPlans,
    pub targets: Option<(&'a Tensor, &'a Tensor)>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossSettings {
    pub contrast: ContrastConfig,
    pub ctx_all_positions: bool,
}

fn all_positions(plan: &MaskPlan) -> MaskPlan {
    MaskPlan {
        kept: Vec::new(),
        masked: (0..plan.len()).collect(),
        ..plan.clone()
    }
}

/// Full pre-training loss of a batch against parameters `p`.
///
/// Stage 1 regresses raw patches, stage 2 regresses teacher rows. Both add
/// the inter-modal contrast on pooled encoder outputs of the main views and
/// the intra-modal contrast between main and second views.
pub fn pretrain_loss(
    tape: &Tape,
    model: &Mavil,
    tables: &PosTables,
    p: &ParamStore,
    batch: &[PairBatchItem<'_>],
    settings: &LossSettings,
    stage: Stage,
) -> Result<(Var, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut recon = Vec::with_capacity(batch.len());
    let (mut pa, mut pv, mut pa2, mut pv2) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let dec_pos = |m: Modality| match m {
        Modality::Audio => &tables.audio_dec,
        Modality::Video => &tables.video_dec,
    };
    for item in batch {
        let pl = item.plans;
        let a = model.audio.forward(tape, p, item.audio, &pl.audio, &tables.audio)?;
        let v = model.video.forward(tape, p, item.video, &pl.video, &tables.video)?;
        let a2 = model.audio.forward(tape, p, item.audio, &pl.audio2, &tables.audio)?;
        let v2 = model.video.forward(tape, p, item.video, &pl.video2, &tables.video)?;
        pa.push(pool_embedding(tape, a, true)?);
        pv.push(pool_embedding(tape, v, true)?);
        pa2.push(pool_embedding(tape, a2, true)?);
        pv2.push(pool_embedding(tape, v2, true)?);
        let fused = model.fusion.forward(tape, p, a, v)?;
        let ra = model.audio_dec.forward(tape, p, fused.a_mm, &pl.audio, dec_pos(Modality::Audio))?;
        let rv = model.video_dec.forward(tape, p, fused.v_mm, &pl.video, dec_pos(Modality::Video))?;
        let r = match (stage, item.targets) {
            (Stage::Stage1, None) => loss_raw_recon(tape, (ra, item.audio, &pl.audio), (rv, item.video, &pl.video))?,
            (Stage::Stage2, Some((ta, tv))) => {
                if settings.ctx_all_positions {
                    let (fa, fv) = (all_positions(&pl.audio), all_positions(&pl.video));
                    loss_ctx_recon(tape, model.config.width, (ra, ta, &fa), (rv, tv, &fv))?
                } else {
                    loss_ctx_recon(tape, model.config.width, (ra, ta, &pl.audio), (rv, tv, &pl.video))?
                }
            }
            (s, t) => {
                return Err(Error::invalid(format!(
                    "{s:?} loss with{} teacher targets",
                    if t.is_some() { "" } else { "out" }
                )))
            }
        };
        recon.push(r);
    }
    let inv = 1.0 / batch.len() as f64;
    let mut sum = recon[0];
    for &r in &recon[1..] {
        sum = tape.add(sum, r)?;
    }
    let recon = tape.scale(sum, inv);
    let stack = |xs: &[Var]| tape.concat_rows(xs);
    let (a, v, a2, v2) = (stack(&pa)?, stack(&pv)?, stack(&pa2)?, stack(&pv2)?);
    let c = &settings.contrast;
    let inter = loss_inter(tape, a, v, c.tau_inter)?;
    let intra = loss_intra(tape, a, a2, v, v2, c.tau_intra)?;
    total_loss(tape, LossParts { recon, inter, intra }, c, stage)
}

/// Hash of everything a teacher's rows depend on for a student to use them:
/// the token width and both token geometries.
pub fn token_fingerprint(cfg: &ModelConfig) -> String {
    let json = serde_json::to_vec(&(cfg.width, &cfg.audio, &cfg.video)).expect("geometry serializes");
    hex::encode(Sha256::digest(json))
}

/// Frozen copy of a trained model that produces stage-2 targets.
#[derive(Clone, Debug)]
pub struct TeacherSnapshot {
    pub bundle: ModelBundle,
    pub stage: Stage,
    pub iteration: usize,
    /// Fingerprint of the checkpoint the teacher was taken from.
    pub fingerprint: String,
}

impl TeacherSnapshot {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(TeacherSnapshot {
            bundle: ck.pretrain_bundle()?,
            stage: ck.header.stage,
            iteration: ck.header.iteration,
            fingerprint: ck.fingerprint().to_string(),
        })
    }

    pub fn token_fingerprint(&self) -> String {
        token_fingerprint(self.bundle.config())
    }
}

fn layer_norm_rows(t: &Tensor) -> Tensor {
    let (n, w) = (t.rows(), t.cols());
    let mut out = t.clone();
    for i in 0..n {
        let row = &mut out.data_mut()[i * w..(i + 1) * w];
        let mean = row.iter().sum::<f64>() / w as f64;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w as f64;
        let inv = 1.0 / (var + crate::model::LN_EPS).sqrt();
        row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
    }
    out
}

/// Per-patch teacher rows for audio and video: complete inputs through the
/// teacher's encoders and fusion, class rows dropped. Values are computed on
/// an inference tape and carry no gradient.
pub fn make_teacher_targets(
    teacher: &TeacherSnapshot,
    student: &ModelConfig,
    audio: &Tensor,
    video: &Tensor,
    normalize: bool,
) -> Result<(Tensor, Tensor)> {
    let (want, have) = (token_fingerprint(student), teacher.token_fingerprint());
    if want != have {
        return Err(Error::Fingerprint { expected: want, found: have });
    }
    let b = &teacher.bundle;
    let tape = Tape::inference();
    let a = b.encode(&tape, Modality::Audio, audio, &MaskPlan::keep_all(audio.rows()))?;
    let v = b.encode(&tape, Modality::Video, video, &MaskPlan::keep_all(video.rows()))?;
    let f = b.fuse(&tape, a, v)?;
    let ta = tape.value(tape.slice_rows(f.a_mm, 1, audio.rows())?).as_ref().clone();
    let tv = tape.value(tape.slice_rows(f.v_mm, 1, video.rows())?).as_ref().clone();
    Ok(if normalize { (layer_norm_rows(&ta), layer_norm_rows(&tv)) } else { (ta, tv) })
}

/// Weights, optimizer moments and position of a pre-training run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub bundle: ModelBundle,
    pub opt: OptimizerState,
    pub step: usize,
}

/// One pre-training stage over a prepared dataset.
pub struct Pretrainer<'a> {
    pub cfg: &'a TrainConfig,
    pub data: &'a PreparedSet,
    pub model: ModelConfig,
    pub stage: Stage,
    pub iteration: usize,
    pub schedule: LrSchedule,
    teacher: Option<&'a TeacherSnapshot>,
    targets: Vec<(Tensor, Tensor)>,
}

impl<'a> Pretrainer<'a> {
    fn new(
        cfg: &'a TrainConfig,
        data: &'a PreparedSet,
        model: ModelConfig,
        stage: Stage,
        iteration: usize,
        teacher: Option<&'a TeacherSnapshot>,
    ) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        let per_step = cfg.effective_batch();
        if data.len() < per_step {
            return Err(Error::Config(format!(
                "{} pairs cannot fill one step of {} (batch {} x {} accumulation steps)",
                data.len(),
                per_step,
                cfg.batch,
                cfg.accum_steps
            )));
        }
        if data.model.audio != model.audio || data.model.video != model.video {
            return Err(Error::Config("dataset was prepared for a different token geometry".into()));
        }
        let targets = match teacher {
            None => Vec::new(),
            Some(t) => (0..data.len())
                .map(|i| make_teacher_targets(t, &model, &data.audio[i], &data.video[i], cfg.ctx_target_norm))
                .collect::<Result<_>>()?,
        };
        Ok(Pretrainer {
            schedule: LrSchedule {
                base_lr: cfg.lr_base,
                warmup_epochs: cfg.warmup_epochs,
                epochs: cfg.epochs,
                min_lr: cfg.min_lr,
                steps_per_epoch: data.len() / per_step,
                batch_size: per_step,
            },
            cfg,
            data,
            model,
            stage,
            iteration,
            teacher,
            targets,
        })
    }

    pub fn stage1(cfg: &'a TrainConfig, data: &'a PreparedSet, model: &ModelConfig) -> Result<Self> {
        Self::new(cfg, data, model.clone(), Stage::Stage1, 0, None)
    }

    /// Stage 2 against a frozen teacher; teacher rows are computed once here.
    pub fn stage2(
        cfg: &'a TrainConfig,
        data: &'a PreparedSet,
        model: &ModelConfig,
        teacher: &'a TeacherSnapshot,
        iteration: usize,
    ) -> Result<Self> {
        Self::new(cfg, data, model.clone(), Stage::Stage2, iteration, Some(teacher))
    }

    pub fn total_steps(&self) -> usize {
        let full = self.schedule.total_steps();
        if self.cfg.max_steps > 0 { full.min(self.cfg.max_steps) } else { full }
    }

    pub fn target_kind(&self) -> TargetKind {
        match self.stage {
            Stage::Stage1 => TargetKind::Raw,
            _ => TargetKind::Latent,
        }
    }

    /// Seed of the weights: the run seed for stage 1, a per-iteration
    /// derivation for students so each starts from fresh weights.
    pub fn init_seed(&self) -> u64 {
        match self.stage {
            Stage::Stage1 => self.cfg.seed,
            _ => rng::derive(self.cfg.seed, &[domain::INIT, self.iteration as u64]),
        }
    }

    pub fn init_state(&self) -> Result<TrainState> {
        let mut bundle = ModelBundle::init(&self.model, self.target_kind(), self.init_seed())?;
        if self.cfg.warm_start {
            if let Some(t) = self.teacher {
                bundle.params.copy_matching(&t.bundle.params, |n| !n.contains("_dec."));
            }
        }
        let opt = OptimizerState::new(&bundle.params, self.cfg.optim);
        Ok(TrainState { bundle, opt, step: 0 })
    }

    pub fn teacher_targets(&self, i: usize) -> Option<(&Tensor, &Tensor)> {
        self.targets.get(i).map(|(a, v)| (a, v))
    }

    fn plans(&self, step: usize, slot: usize) -> Result<PairPlans> {
        let seed = rng::derive(
            self.cfg.seed,
            &[domain::MASK, stage_code(self.stage), self.iteration as u64, step as u64, slot as u64],
        );
        PairPlans::draw(&self.model, self.cfg, seed)
    }

    fn settings(&self) -> LossSettings {
        LossSettings {
            contrast: self.cfg.contrast,
            ctx_all_positions: self.cfg.ctx_all_positions,
        }
    }

    /// Loss of one micro-batch at `step` against parameters `p`.
    pub fn batch_loss(&self, tape: &Tape, bundle: &ModelBundle, p: &ParamStore, indices: &[usize], step: usize, micro: usize) -> Result<(Var, LossBreakdown)> {
        let plans: Vec<PairPlans> = (0..indices.len())
            .map(|b| self.plans(step, micro * self.cfg.batch + b))
            .collect::<Result<_>>()?;
        let items: Vec<PairBatchItem> = indices
            .iter()
            .zip(&plans)
            .map(|(&i, plans)| PairBatchItem {
                audio: &self.data.audio[i],
                video: &self.data.video[i],
                plans,
                targets: self.teacher_targets(i),
            })
            .collect();
        pretrain_loss(tape, &bundle.model, &bundle.tables, p, &items, &self.settings(), self.stage)
    }

    /// Averaged gradients and loss breakdown of the optimizer step `step`.
    pub fn step_gradients(&self, bundle: &ModelBundle, step: usize) -> Result<(HashMap<ParamId, Tensor>, LossBreakdown)> {
        let n = self.data.len();
        let spe = self.schedule.steps_per_epoch;
        let batches = batch_indices(self.cfg.seed, stage_code(self.stage), self.iteration, n, self.cfg.batch, self.cfg.accum_steps, spe, step);
        let inv = 1.0 / batches.len() as f64;
        let mut grads: HashMap<ParamId, Tensor> = HashMap::new();
        let mut acc = LossBreakdown { stage: self.stage, recon: 0.0, inter: 0.0, intra: 0.0, total: 0.0 };
        for (micro, idx) in batches.iter().enumerate() {
            let tape = Tape::new();
            let (loss, b) = self.batch_loss(&tape, bundle, &bundle.params, idx, step, micro)?;
            check_finite(&b, self.iteration, step)?;
            acc.recon += b.recon * inv;
            acc.inter += b.inter * inv;
            acc.intra += b.intra * inv;
            acc.total += b.total * inv;
            for (id, g) in tape.backward(loss)?.into_params() {
                let g = g.map(|x| x * inv);
                match grads.get_mut(&id) {
                    Some(sum) => sum.data_mut().iter_mut().zip(g.data()).for_each(|(s, x)| *s += x),
                    None => {
                        grads.insert(id, g);
                    }
                }
            }
        }
        Ok((grads, acc))
    }

    /// Takes one optimizer step.
    pub fn step(&self, state: &mut TrainState) -> Result<StepRecord> {
        let step = state.step;
        let lr = self.schedule.lr_at(step);
        let (grads, b) = self.step_gradients(&state.bundle, step)?;
        state.opt.step(&mut state.bundle.params, &grads, lr)?;
        state.step += 1;
        Ok(StepRecord {
            stage: self.stage,
            iteration: self.iteration,
            step,
            lr,
            recon: b.recon,
            inter: b.inter,
            intra: b.intra,
            total: b.total,
        })
    }

    /// Steps until `until` (capped at the schedule length), reporting each.
    pub fn run_until(&self, state: &mut TrainState, until: usize, sink: &mut dyn FnMut(&Event) -> Result<()>) -> Result<()> {
        let end = until.min(self.total_steps());
        while state.step < end {
            let rec = self.step(state)?;
            sink(&Event::Step(rec))?;
        }
        Ok(())
    }

    pub fn run(&self, sink: &mut dyn FnMut(&Event) -> Result<()>) -> Result<TrainState> {
        let mut state = self.init_state()?;
        self.run_until(&mut state, usize::MAX, sink)?;
        Ok(state)
    }

    pub fn train_json(&self) -> serde_json::Value {
        serde_json::to_value(self.cfg).expect("config serializes")
    }

    pub fn checkpoint(&self, state: &TrainState, with_optimizer: bool) -> Checkpoint {
        Checkpoint::pretrain(
            &state.bundle,
            with_optimizer.then_some(&state.opt),
            CheckpointMeta {
                train: self.train_json(),
                stage: self.stage,
                iteration: self.iteration,
                parent: self.teacher.map(|t| t.fingerprint.clone()),
                progress: Progress {
                    seed: self.cfg.seed,
                    step: state.step,
                },
            },
        )
    }

    /// Rebuilds the state saved by [`Pretrainer::checkpoint`] after checking
    /// that it came from this exact configuration and teacher.
    pub fn resume(&self, ck: &Checkpoint) -> Result<TrainState> {
        ck.check_resume(&self.model, &self.train_json(), self.stage)?;
        let parent = self.teacher.map(|t| t.fingerprint.clone());
        if ck.header.parent != parent || ck.header.iteration != self.iteration {
            return Err(Error::Fingerprint {
                expected: format!("iteration {} parent {parent:?}", self.iteration),
                found: format!("iteration {} parent {:?}", ck.header.iteration, ck.header.parent),
            });
        }
        Ok(TrainState {
            bundle: ck.pretrain_bundle()?,
            opt: ck.optimizer.clone().expect("checked by check_resume"),
            step: ck.header.progress.step,
        })
    }
}

/// Entry of the self-training lineage: which checkpoint taught which.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub name: String,
    pub stage: Stage,
    pub iteration: usize,
    pub fingerprint: String,
    /// Name of the teacher checkpoint.
    pub teacher: Option<String>,
    pub teacher_fingerprint: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    pub format: String,
    pub version: u32,
    pub entries: Vec<LineageEntry>,
}

pub const LINEAGE_FILE: &str = "lineage.json";

impl Lineage {
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(LINEAGE_FILE), &serde_json::to_vec_pretty(self)?)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(LINEAGE_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let l: Lineage = serde_json::from_slice(&bytes)?;
        if l.format != "mavil-lineage" || l.version != 1 {
            return Err(Error::format(&path, format!("unsupported lineage {} version {}", l.format, l.version)));
        }
        Ok(l)
    }
}

pub fn checkpoint_name(stage: Stage, iteration: usize) -> String {
    match stage {
        Stage::Stage1 => "stage1".into(),
        _ => format!("stage2_iter{iteration}"),
    }
}

/// Stage 1 followed by `k_iters` stage-2 iterations, each student taught by
/// the previous model. Returns every checkpoint, oldest first; with `out`,
/// also writes them and the lineage manifest there.
pub fn self_train(
    data: &PreparedSet,
    model: &ModelConfig,
    student: &ModelConfig,
    cfg: &TrainConfig,
    out: Option<&Path>,
    sink: &mut dyn FnMut(&Event) -> Result<()>,
) -> Result<(Vec<Checkpoint>, Lineage)> {
    cfg.validate()?;
    let mut lineage = Lineage {
        format: "mavil-lineage".into(),
        version: 1,
        entries: Vec::new(),
    };
    let mut cks = Vec::with_capacity(cfg.k_iters + 1);
    let save = |ck: &Checkpoint, name: &str, sink: &mut dyn FnMut(&Event) -> Result<()>| -> Result<()> {
        if let Some(dir) = out {
            ck.save(&dir.join(name))?;
        }
        sink(&Event::Checkpoint {
            name: name.to_string(),
            stage: ck.header.stage,
            iteration: ck.header.iteration,
            fingerprint: ck.fingerprint().to_string(),
            parent: ck.header.parent.clone(),
        })
    };

    let s1 = Pretrainer::stage1(cfg, data, model)?;
    let state = s1.run(sink)?;
    let ck = s1.checkpoint(&state, false);
    let name = checkpoint_name(Stage::Stage1, 0);
    save(&ck, &name, sink)?;
    lineage.entries.push(LineageEntry {
        name,
        stage: Stage::Stage1,
        iteration: 0,
        fingerprint: ck.fingerprint().to_string(),
        teacher: None,
        teacher_fingerprint: None,
    });
    cks.push(ck);

    for k in 1..=cfg.k_iters {
        let prev = cks.last().expect("stage 1 ran");
        let teacher = TeacherSnapshot::from_checkpoint(prev)?;
        let frozen = teacher.bundle.params.clone();
        let s2 = Pretrainer::stage2(cfg, data, student, &teacher, k)?;
        let state = s2.run(sink)?;
        debug_assert!(teacher.bundle.params.bit_eq(&frozen));
        let ck = s2.checkpoint(&state, false);
        let name = checkpoint_name(Stage::Stage2, k);
        save(&ck, &name, sink)?;
        let parent_name = lineage.entries.last().map(|e| e.name.clone());
        lineage.entries.push(LineageEntry {
            name,
            stage: Stage::Stage2,
            iteration: k,
            fingerprint: ck.fingerprint().to_string(),
            teacher: parent_name,
            teacher_fingerprint: Some(teacher.fingerprint.clone()),
        });
        cks.push(ck);
    }
    if let Some(dir) = out {
        lineage.write(dir)?;
    }
    Ok((cks, lineage))
}

/// Pooled uni-modal encoder outputs of complete inputs (`N x H` each).
pub fn embed_pairs(bundle: &ModelBundle, data: &PreparedSet) -> Result<(Tensor, Tensor)> {
    let mut a_rows = Vec::with_capacity(data.len());
    let mut v_rows = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let tape = Tape::inference();
        let a = bundle.encode(&tape, Modality::Audio, &data.audio[i], &MaskPlan::keep_all(data.audio[i].rows()))?;
        let v = bundle.encode(&tape, Modality::Video, &data.video[i], &MaskPlan::keep_all(data.video[i].rows()))?;
        a_rows.push(tape.value(pool_embedding(&tape, a, true)?).data().to_vec());
        v_rows.push(tape.value(pool_embedding(&tape, v, true)?).data().to_vec());
    }
    Ok((Tensor::from_rows(&a_rows)?, Tensor::from_rows(&v_rows)?))
}
