//! `mavil`: synthetic data, pre-training, self-training, fine-tuning and evaluation.

mod pnm;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand};

use mavil_core::config::RunConfig;
use mavil_core::evaluation::{accuracy_top1, mean_average_precision, recall_at_k, MetricReport};
use mavil_core::io::{Checkpoint, CheckpointKind, Dataset, MetricsWriter};
use mavil_core::masking::make_mask;
use mavil_core::model::{grid_of, ModelBundle, ModelConfig, TargetKind};
use mavil_core::numerics::grad_check;
use mavil_core::objectives::Stage;
use mavil_core::rng::{self, domain};
use mavil_core::synth::{generate, split, SynthConfig};
use mavil_core::tokenizer::{unpatchify_audio, untubelet_video, Modality, Patches};
use mavil_core::training::{
    checkpoint_name, classify_set, embed_pairs, prepare, self_train, Event, Finetuner, PreparedSet, Pretrainer,
    TeacherSnapshot,
};
use mavil_core::{Tape, Tensor};

const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Parser)]
#[command(name = "mavil", version, about = "Masked audio-video learners")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.seed=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory for metrics, checkpoints and images.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic paired dataset as `train/` and `eval/` splits.
    GenSynthetic {
        #[command(flatten)]
        common: Common,
        /// Fraction of every class held out for evaluation.
        #[arg(long, default_value_t = 0.2)]
        eval_frac: f64,
    },
    /// Raw-reconstruction and contrastive pre-training.
    PretrainStage1 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Continue from a checkpoint written with optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train a fresh student against a frozen teacher's fused outputs.
    PretrainStage2 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, default_value_t = 1)]
        iteration: usize,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Stage 1 followed by `train.k_iters` stage-2 iterations.
    SelfTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Supervised fine-tuning, optionally from pre-trained encoders.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Pre-training checkpoint whose encoders initialize the classifier.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// mAP and top-1 accuracy of a fine-tuned classifier.
    EvalClassify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Audio-to-video and video-to-audio recall@k of a pre-trained model.
    EvalRetrieval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference check of both pre-training losses.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        coords: usize,
        #[arg(long, default_value_t = 1e-3)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Masked inputs and reconstructions as graymaps (audio) and pixmaps (video).
    DumpRecon {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Instance to render.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        Ok(RunConfig::load(self.config.as_deref(), &self.set)?)
    }

    fn out_dir(&self) -> Result<&Path> {
        let dir = self.out.as_deref().context("--out DIR is required for this command")?;
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }
}

fn load_prepared(path: &Path, model: &ModelConfig, cfg: &RunConfig) -> Result<PreparedSet> {
    let ds = Dataset::load_path(path).with_context(|| format!("loading dataset {}", path.display()))?;
    Ok(prepare(&ds, model, &cfg.norm())?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Writes every event as one metrics line.
fn metrics_sink(w: &mut MetricsWriter) -> impl FnMut(&Event) -> mavil_core::Result<()> + '_ {
    move |e| w.record(e)
}

fn checkpoint_event(name: &str, ck: &Checkpoint) -> Event {
    Event::Checkpoint {
        name: name.to_string(),
        stage: ck.header.stage,
        iteration: ck.header.iteration,
        fingerprint: ck.fingerprint().to_string(),
        parent: ck.header.parent.clone(),
    }
}

fn gen_synthetic(common: &Common, eval_frac: f64) -> Result<()> {
    let cfg = common.run_config()?;
    let out = common.out_dir()?;
    if !(eval_frac > 0.0 && eval_frac < 1.0) {
        bail!("--eval-frac must lie strictly between 0 and 1");
    }
    let sc = cfg.synth()?;
    let (train, eval) = split(&generate(&sc)?, 1.0 - eval_frac, sc.seed)?;
    train.save(&out.join("train"))?;
    eval.save(&out.join("eval"))?;
    println!("wrote {} train and {} eval pairs under {}", train.len(), eval.len(), out.display());
    Ok(())
}

fn pretrain_stage1(common: &Common, data: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = common.run_config()?;
    let out = common.out_dir()?;
    let (model, train) = (cfg.model()?, cfg.train()?);
    let set = load_prepared(data, &model, &cfg)?;
    let p = Pretrainer::stage1(&train, &set, &model)?;
    let mut state = match resume {
        Some(path) => p.resume(&load_checkpoint(path)?)?,
        None => p.init_state()?,
    };
    let mut metrics = open_metrics(out, resume.is_some())?;
    p.run_until(&mut state, usize::MAX, &mut metrics_sink(&mut metrics))?;
    let ck = p.checkpoint(&state, true);
    let name = checkpoint_name(Stage::Stage1, 0);
    ck.save(&out.join(&name))?;
    metrics.record(&checkpoint_event(&name, &ck))?;
    println!("{name}: {} steps, fingerprint {}", state.step, ck.fingerprint());
    Ok(())
}

fn pretrain_stage2(common: &Common, data: &Path, teacher: &Path, iteration: usize, resume: Option<&Path>) -> Result<()> {
    let cfg = common.run_config()?;
    let out = common.out_dir()?;
    let (student, train) = (cfg.stage2_model()?, cfg.train()?);
    if iteration == 0 {
        bail!("stage-2 iterations count from 1");
    }
    let teacher = TeacherSnapshot::from_checkpoint(&load_checkpoint(teacher)?)?;
    let set = load_prepared(data, &student, &cfg)?;
    let p = Pretrainer::stage2(&train, &set, &student, &teacher, iteration)?;
    let mut state = match resume {
        Some(path) => p.resume(&load_checkpoint(path)?)?,
        None => p.init_state()?,
    };
    let mut metrics = open_metrics(out, resume.is_some())?;
    p.run_until(&mut state, usize::MAX, &mut metrics_sink(&mut metrics))?;
    let ck = p.checkpoint(&state, true);
    let name = checkpoint_name(Stage::Stage2, iteration);
    ck.save(&out.join(&name))?;
    metrics.record(&checkpoint_event(&name, &ck))?;
    println!("{name}: {} steps, fingerprint {}", state.step, ck.fingerprint());
    Ok(())
}

fn open_metrics(out: &Path, append: bool) -> Result<MetricsWriter> {
    let path = out.join(METRICS_FILE);
    Ok(if append && path.exists() { MetricsWriter::append(&path)? } else { MetricsWriter::create(&path)? })
}

fn self_train_cmd(common: &Common, data: &Path) -> Result<()> {
    let cfg = common.run_config()?;
    let out = common.out_dir()?;
    let (model, student, train) = (cfg.model()?, cfg.stage2_model()?, cfg.train()?);
    if model.audio != student.audio || model.video != student.video {
        bail!("stage-2 students must share the stage-1 token geometry");
    }
    let set = load_prepared(data, &model, &cfg)?;
    let mut metrics = MetricsWriter::create(&out.join(METRICS_FILE))?;
    let (cks, lineage) = self_train(&set, &model, &student, &train, Some(out), &mut metrics_sink(&mut metrics))?;
    for (e, ck) in lineage.entries.iter().zip(&cks) {
        println!("{}: fingerprint {} teacher {}", e.name, ck.fingerprint(), e.teacher.as_deref().unwrap_or("-"));
    }
    Ok(())
}

fn finetune_cmd(common: &Common, data: &Path, init: Option<&Path>, resume: Option<&Path>) -> Result<()> {
    let cfg = common.run_config()?;
    let out = common.out_dir()?;
    let (model, ft) = (cfg.model()?, cfg.finetune()?);
    let set = load_prepared(data, &model, &cfg)?;
    let f = Finetuner::new(&ft, &set, &model)?;
    let (pretrained, parent) = match init {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            (Some(ck.pretrain_bundle()?), Some(ck.fingerprint().to_string()))
        }
        None => (None, None),
    };
    let mut state = match resume {
        Some(path) => f.resume(&load_checkpoint(path)?)?,
        None => f.init_state(pretrained.as_ref())?,
    };
    let mut metrics = open_metrics(out, resume.is_some())?;
    f.run_until(&mut state, usize::MAX, &mut metrics_sink(&mut metrics))?;
    let ck = f.checkpoint(&state, parent, true);
    ck.save(&out.join("finetune"))?;
    metrics.record(&checkpoint_event("finetune", &ck))?;
    println!("finetune: {} steps, fingerprint {}", state.step, ck.fingerprint());
    Ok(())
}

fn report(metrics: &mut MetricsWriter, r: MetricReport) -> Result<()> {
    println!("{} {} = {:.6} over {} instances", r.split, r.metric, r.value, r.count);
    Ok(metrics.record(&r)?)
}

fn split_name(data: &Path) -> String {
    let p = if data.is_dir() { data } else { data.parent().unwrap_or(data) };
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "data".into())
}

fn eval_classify(common: &Common, data: &Path, checkpoint: &Path) -> Result<()> {
    let cfg = common.run_config()?;
    let out = common.out_dir()?;
    let ev = cfg.eval()?;
    let ck = load_checkpoint(checkpoint)?;
    if !matches!(ck.header.kind, CheckpointKind::Classifier { .. }) {
        bail!("{} is not a fine-tuned classifier checkpoint", checkpoint.display());
    }
    let bundle = ck.classifier_bundle()?;
    let set = load_prepared(data, &ck.header.model, &cfg)?;
    let scores = classify_set(&bundle, &set, ev.clips, ev.average_probs)?;
    let mut metrics = MetricsWriter::create(&out.join("eval_classify.jsonl"))?;
    let split = split_name(data);
    let row = |metric: &str, value: f64| MetricReport {
        metric: metric.into(),
        value,
        count: set.len(),
        split: split.clone(),
        fingerprint: ck.fingerprint().to_string(),
    };
    report(&mut metrics, row("map", mean_average_precision(&scores, &set.labels)?))?;
    report(&mut metrics, row("top1", accuracy_top1(&scores, &set.first_labels())?))?;
    Ok(())
}

fn eval_retrieval(common: &Common, data: &Path, checkpoint: &Path) -> Result<()> {
    let cfg = common.run_config()?;
    let out = common.out_dir()?;
    let k = cfg.eval()?.recall_k;
    let ck = load_checkpoint(checkpoint)?;
    let bundle = ck.pretrain_bundle()?;
    let set = load_prepared(data, bundle.config(), &cfg)?;
    let (a, v) = embed_pairs(&bundle, &set)?;
    let mut metrics = MetricsWriter::create(&out.join("eval_retrieval.jsonl"))?;
    let split = split_name(data);
    for (name, q, g) in [("a2v", &a, &v), ("v2a", &v, &a)] {
        report(
            &mut metrics,
            MetricReport {
                metric: format!("{name}_recall@{k}"),
                value: recall_at_k(q, g, k)?,
                count: set.len(),
                split: split.clone(),
                fingerprint: ck.fingerprint().to_string(),
            },
        )?;
    }
    Ok(())
}

/// Returns whether both losses pass.
fn grad_check_cmd(common: &Common, coords: usize, epsilon: f64, tolerance: f64) -> Result<bool> {
    let cfg = common.run_config()?;
    let model = cfg.model()?;
    let train = mavil_core::config::TrainConfig {
        batch: 2,
        accum_steps: 1,
        ..cfg.train()?
    };
    let sc = SynthConfig {
        per_class: 1,
        ..cfg.synth()?
    };
    let set = prepare(&generate(&sc)?, &model, &cfg.norm())?;
    // a briefly trained teacher so stage-2 targets are not trivial
    let teacher_cfg = mavil_core::config::TrainConfig {
        max_steps: 2,
        ..train.clone()
    };
    let tp = Pretrainer::stage1(&teacher_cfg, &set, &model)?;
    let ts = tp.run(&mut |_| Ok(()))?;
    let teacher = TeacherSnapshot::from_checkpoint(&tp.checkpoint(&ts, false))?;

    let mut worst = 0.0f64;
    for stage in [Stage::Stage1, Stage::Stage2] {
        let p = match stage {
            Stage::Stage1 => Pretrainer::stage1(&train, &set, &model)?,
            _ => Pretrainer::stage2(&train, &set, &model, &teacher, 1)?,
        };
        let b = p.init_state()?.bundle;
        let r = grad_check(&b.params, epsilon, coords, cfg.seed(), |tape: &Tape, params| {
            p.batch_loss(tape, &b, params, &[0, 1], 0, 0).map(|(v, _)| v)
        })?;
        println!(
            "{}: max relative error {:.3e} over {} coordinates (worst {:?})",
            checkpoint_name(stage, 1),
            r.max_rel_error,
            r.coords_checked,
            r.worst
        );
        worst = worst.max(r.max_rel_error);
    }
    let pass = worst < tolerance;
    println!("max relative error {worst:.3e} ({} at tolerance {tolerance:e})", if pass { "pass" } else { "fail" });
    if let Some(out) = &common.out {
        std::fs::create_dir_all(out)?;
        let mut m = MetricsWriter::create(&out.join("grad_check.jsonl"))?;
        m.record(&MetricReport {
            metric: "grad_check_max_rel_error".into(),
            value: worst,
            count: coords,
            split: "synthetic".into(),
            fingerprint: String::new(),
        })?;
    }
    Ok(pass)
}

/// Original, masked and reconstructed patch grids (masked cells of the middle
/// panel are filled with the original's minimum).
fn recon_panels(original: &Tensor, pred: &Tensor, masked: &[usize]) -> Result<[Tensor; 3]> {
    let floor = original.data().iter().copied().fold(f64::INFINITY, f64::min);
    let (mut hidden, mut recon) = (original.clone(), original.clone());
    let d = original.cols();
    for &i in masked {
        hidden.data_mut()[i * d..(i + 1) * d].fill(floor);
        recon.data_mut()[i * d..(i + 1) * d].copy_from_slice(pred.row(i));
    }
    Ok([original.clone(), hidden, recon])
}

fn dump_recon(common: &Common, data: &Path, checkpoint: &Path, index: usize) -> Result<()> {
    let cfg = common.run_config()?;
    let out = common.out_dir()?;
    let ck = load_checkpoint(checkpoint)?;
    let bundle: ModelBundle = ck.pretrain_bundle()?;
    if bundle.model.target != TargetKind::Raw {
        bail!("dump-recon needs a stage-1 checkpoint; stage-2 decoders predict latent rows");
    }
    let m = bundle.config().clone();
    let ds = Dataset::load_path(data)?;
    if index >= ds.len() {
        bail!("index {index} outside a dataset of {}", ds.len());
    }
    let set = prepare(&ds.subset(&[index]), &m, &cfg.norm())?;
    let mask = cfg.mask()?;
    let seed = rng::derive(cfg.seed(), &[domain::MASK, index as u64]);
    let pa = make_mask(grid_of(&m, Modality::Audio), mask.ratio_audio, mask.strategy_audio, seed)?;
    let pv = make_mask(grid_of(&m, Modality::Video), mask.ratio_video, mask.strategy_video, rng::derive(seed, &[1]))?;
    let tape = Tape::inference();
    let ea = bundle.encode(&tape, Modality::Audio, &set.audio[0], &pa)?;
    let ev = bundle.encode(&tape, Modality::Video, &set.video[0], &pv)?;
    let fused = bundle.fuse(&tape, ea, ev)?;
    let ra = tape.value(bundle.decode(&tape, Modality::Audio, fused.a_mm, &pa)?);
    let rv = tape.value(bundle.decode(&tape, Modality::Video, fused.v_mm, &pv)?);
    let id = &ds.instances[index].id;

    // spectrogram panels: frequency upward, time to the right
    let (a, v) = (&m.audio, &m.video);
    let mut panels = Vec::new();
    for t in recon_panels(&set.audio[0], &ra, &pa.masked)? {
        let spec = unpatchify_audio(&Patches { data: t, grid: a.grid() }, a.patch_time, a.patch_freq)?;
        let (frames, bands) = spec.dims2()?;
        let img: Vec<f64> = (0..bands).rev().flat_map(|f| (0..frames).map(move |t| (t, f))).map(|(t, f)| spec.at(t, f)).collect();
        panels.push((frames, bands, pnm::min_max_bytes(&img)));
    }
    let (w, h, px) = pnm::side_by_side(&panels, 1);
    let path = out.join(format!("audio_{id}.pgm"));
    pnm::write(&path, &pnm::encode_pgm(w, h, &px)?)?;
    println!("wrote {}", path.display());

    let clips: Vec<Tensor> = recon_panels(&set.video[0], &rv, &pv.masked)?
        .into_iter()
        .map(|t| untubelet_video(&Patches { data: t, grid: v.grid() }, v.patch_time, v.patch_size, v.channels))
        .collect::<mavil_core::Result<_>>()?;
    let (n, ch) = (v.size, v.channels);
    for f in 0..v.frames {
        let panels: Vec<(usize, usize, Vec<u8>)> = clips
            .iter()
            .map(|clip| {
                let frame = &clip.data()[f * ch * n * n..(f + 1) * ch * n * n];
                // channel-planar to interleaved, grayscale repeated when there is one channel
                let rgb: Vec<f64> = (0..n * n).flat_map(|p| (0..3).map(move |k| frame[(k % ch) * n * n + p])).collect();
                (n, n, pnm::min_max_bytes(&rgb))
            })
            .collect();
        let (w, h, px) = pnm::side_by_side(&panels, 3);
        let path = out.join(format!("video_{id}_f{f}.ppm"));
        pnm::write(&path, &pnm::encode_ppm(w, h, &px)?)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match &cli.cmd {
        Cmd::GenSynthetic { common, eval_frac } => gen_synthetic(common, *eval_frac)?,
        Cmd::PretrainStage1 { common, data, resume } => pretrain_stage1(common, data, resume.as_deref())?,
        Cmd::PretrainStage2 {
            common,
            data,
            teacher,
            iteration,
            resume,
        } => pretrain_stage2(common, data, teacher, *iteration, resume.as_deref())?,
        Cmd::SelfTrain { common, data } => self_train_cmd(common, data)?,
        Cmd::Finetune {
            common,
            data,
            init,
            resume,
        } => finetune_cmd(common, data, init.as_deref(), resume.as_deref())?,
        Cmd::EvalClassify { common, data, checkpoint } => eval_classify(common, data, checkpoint)?,
        Cmd::EvalRetrieval { common, data, checkpoint } => eval_retrieval(common, data, checkpoint)?,
        Cmd::GradCheck {
            common,
            coords,
            epsilon,
            tolerance,
        } => {
            if !grad_check_cmd(common, *coords, *epsilon, *tolerance)? {
                return Ok(ExitCode::FAILURE);
            }
        }
        Cmd::DumpRecon {
            common,
            data,
            checkpoint,
            index,
        } => dump_recon(common, data, checkpoint, *index)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            // configuration mistakes are usage errors, like bad flags
            if matches!(e.downcast_ref::<mavil_core::Error>(), Some(mavil_core::Error::Config(_))) {
                eprintln!();
                eprintln!("{}", Cli::command().render_usage());
                return ExitCode::from(2);
            }
            ExitCode::FAILURE
        }
    }
}
