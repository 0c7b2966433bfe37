use std::collections::HashSet;

use super::*;
use crate::model::{ClassifyMode, ModelBundle, ModelConfig, TargetKind};
use crate::numerics::{grad_check, Tape};
use crate::synth::{generate, SynthConfig};

fn data(per_class: usize) -> PreparedSet {
    let cfg = SynthConfig {
        per_class,
        ..SynthConfig::default()
    };
    prepare(&generate(&cfg).unwrap(), &ModelConfig::tiny(), &cfg.norm).unwrap()
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        batch: 4,
        epochs: 2.0,
        warmup_epochs: 1.0,
        lr_base: 0.05,
        k_iters: 1,
        ..TrainConfig::default()
    }
}

fn run_records(p: &Pretrainer) -> Vec<StepRecord> {
    let mut recs = Vec::new();
    p.run(&mut |e| {
        if let Event::Step(r) = e {
            recs.push(*r);
        }
        Ok(())
    })
    .unwrap();
    recs
}

#[test]
fn batches_partition_each_epoch() {
    // 10 items, batch 3: three full batches, one item dropped
    let mut seen = HashSet::new();
    for step in 0..3 {
        let b = batch_indices(1, 1, 0, 10, 3, 1, 3, step);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].len(), 3);
        seen.extend(b[0].iter().copied());
    }
    assert_eq!(seen.len(), 9);
    // accumulation splits one step into micro-batches
    let b = batch_indices(1, 1, 0, 10, 2, 2, 2, 1);
    assert_eq!(b.len(), 2);
    let next_epoch = batch_indices(1, 1, 0, 10, 3, 1, 3, 3);
    assert_ne!(next_epoch, batch_indices(1, 1, 0, 10, 3, 1, 3, 0));
}

#[test]
fn lr_trace_follows_schedule_and_runs_repeat() {
    let d = data(2);
    let cfg = train_cfg();
    let p = Pretrainer::stage1(&cfg, &d, &ModelConfig::tiny()).unwrap();
    assert_eq!(p.total_steps(), 4);
    let a = run_records(&p);
    assert_eq!(a.len(), 4);
    for r in &a {
        assert_eq!(r.lr.to_bits(), p.schedule.lr_at(r.step).to_bits());
        assert!(r.total.is_finite());
    }
    assert_eq!(a, run_records(&p));
    let other = TrainConfig { seed: 9, ..cfg.clone() };
    let q = Pretrainer::stage1(&other, &d, &ModelConfig::tiny()).unwrap();
    assert_ne!(a, run_records(&q));
}

#[test]
fn too_few_pairs_for_a_batch() {
    let d = data(1);
    let cfg = TrainConfig { batch: 8, ..train_cfg() };
    assert!(Pretrainer::stage1(&cfg, &d, &ModelConfig::tiny()).is_err());
}

fn teacher(d: &PreparedSet) -> TeacherSnapshot {
    let cfg = train_cfg();
    let p = Pretrainer::stage1(&cfg, d, &ModelConfig::tiny()).unwrap();
    let state = p.run(&mut |_| Ok(())).unwrap();
    TeacherSnapshot::from_checkpoint(&p.checkpoint(&state, false)).unwrap()
}

#[test]
fn teacher_targets_are_detached_and_repeatable() {
    let d = data(2);
    let t = teacher(&d);
    let m = ModelConfig::tiny();
    let (a1, v1) = make_teacher_targets(&t, &m, &d.audio[0], &d.video[0], false).unwrap();
    let (a2, v2) = make_teacher_targets(&t, &m, &d.audio[0], &d.video[0], false).unwrap();
    assert_eq!(a1.rows(), m.audio.num_tokens());
    assert_eq!(v1.rows(), m.video.num_tokens());
    assert_eq!(a1.cols(), m.width);
    assert!(a1.data().iter().zip(a2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(v1.data().iter().zip(v2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));

    let (an, _) = make_teacher_targets(&t, &m, &d.audio[0], &d.video[0], true).unwrap();
    let row = an.row(0);
    assert!((row.iter().sum::<f64>() / row.len() as f64).abs() < 1e-9);

    let wider = ModelConfig { width: 32, ..ModelConfig::tiny() };
    assert!(matches!(
        make_teacher_targets(&t, &wider, &d.audio[0], &d.video[0], false),
        Err(crate::Error::Fingerprint { .. })
    ));

    // the student's gradient never reaches the teacher
    let cfg = train_cfg();
    let s2 = Pretrainer::stage2(&cfg, &d, &m, &t, 1).unwrap();
    let state = s2.init_state().unwrap();
    let (grads, _) = s2.step_gradients(&state.bundle, 0).unwrap();
    assert_eq!(grads.len(), state.bundle.params.len());
}

#[test]
fn stage2_students_start_fresh_and_leave_teacher_untouched() {
    let d = data(2);
    let t = teacher(&d);
    let frozen = t.bundle.params.clone();
    let m = ModelConfig::tiny();
    let cfg = train_cfg();
    let s2 = Pretrainer::stage2(&cfg, &d, &m, &t, 1).unwrap();
    let init = s2.init_state().unwrap();
    let name = "audio.patch.w";
    assert_ne!(init.bundle.params.by_name(name), t.bundle.params.by_name(name));
    // fresh weights do not depend on the teacher's trained values
    let fresh = ModelBundle::init(&m, TargetKind::Latent, s2.init_seed()).unwrap();
    assert!(fresh.params.bit_eq(&init.bundle.params));
    let recs = run_records(&s2);
    assert!(recs.iter().all(|r| r.stage == Stage::Stage2 && r.iteration == 1));
    assert!(t.bundle.params.bit_eq(&frozen));

    let warm_cfg = TrainConfig { warm_start: true, ..cfg.clone() };
    let warm = Pretrainer::stage2(&warm_cfg, &d, &m, &t, 1).unwrap().init_state().unwrap();
    assert_eq!(warm.bundle.params.by_name(name), t.bundle.params.by_name(name));
}

#[test]
fn zero_weights_leave_pure_regression() {
    let d = data(2);
    let t = teacher(&d);
    let mut cfg = train_cfg();
    cfg.contrast.alpha = 0.0;
    cfg.contrast.beta = 0.0;
    let s2 = Pretrainer::stage2(&cfg, &d, &ModelConfig::tiny(), &t, 1).unwrap();
    for r in run_records(&s2) {
        assert_eq!(r.total, r.recon);
        assert!(r.inter > 0.0);
    }
}

#[test]
fn resume_reproduces_the_trajectory() {
    let d = data(2);
    let cfg = TrainConfig { epochs: 3.0, ..train_cfg() };
    let m = ModelConfig::tiny();
    let p = Pretrainer::stage1(&cfg, &d, &m).unwrap();
    let full = run_records(&p);

    let dir = tempfile::tempdir().unwrap();
    let mut first = Vec::new();
    let mut state = p.init_state().unwrap();
    p.run_until(&mut state, 3, &mut |e| {
        if let Event::Step(r) = e {
            first.push(*r);
        }
        Ok(())
    })
    .unwrap();
    p.checkpoint(&state, true).save(&dir.path().join("ck")).unwrap();
    drop(state);
    let ck = crate::io::Checkpoint::load(&dir.path().join("ck")).unwrap();
    let mut state = p.resume(&ck).unwrap();
    p.run_until(&mut state, usize::MAX, &mut |e| {
        if let Event::Step(r) = e {
            first.push(*r);
        }
        Ok(())
    })
    .unwrap();
    assert_eq!(first.len(), full.len());
    for (a, b) in first.iter().zip(&full) {
        assert_eq!(a.total.to_bits(), b.total.to_bits());
    }

    let changed = TrainConfig { lr_base: 0.01, ..cfg.clone() };
    let q = Pretrainer::stage1(&changed, &d, &m).unwrap();
    assert!(matches!(q.resume(&ck), Err(crate::Error::Fingerprint { .. })));
}

#[test]
fn full_losses_pass_gradient_check() {
    let d = data(1);
    let m = ModelConfig::tiny();
    let cfg = TrainConfig { batch: 2, ..train_cfg() };
    let t = teacher(&data(2));
    for stage in [Stage::Stage1, Stage::Stage2] {
        let p = match stage {
            Stage::Stage1 => Pretrainer::stage1(&cfg, &d, &m).unwrap(),
            _ => Pretrainer::stage2(&cfg, &d, &m, &t, 1).unwrap(),
        };
        let b = p.init_state().unwrap().bundle;
        let report = grad_check(&b.params, 1e-3, 60, 7, |tape: &Tape, params| {
            p.batch_loss(tape, &b, params, &[0, 1], 0, 0).map(|(v, _)| v)
        })
        .unwrap();
        // wrong gradients miss by O(1); the step's truncation error alone
        // reaches a few 1e-4 on low-gradient coordinates
        assert!(report.max_rel_error < 2e-3, "{stage:?}: {report:?}");
    }
}

#[test]
fn self_training_lineage() {
    let d = data(2);
    let m = ModelConfig::tiny();
    let cfg = TrainConfig { epochs: 1.0, warmup_epochs: 0.0, k_iters: 2, ..train_cfg() };
    let dir = tempfile::tempdir().unwrap();
    let mut events = Vec::new();
    let (cks, lineage) = self_train(&d, &m, &m, &cfg, Some(dir.path()), &mut |e| {
        events.push(e.clone());
        Ok(())
    })
    .unwrap();
    assert_eq!(cks.len(), 3);
    assert_eq!(lineage.entries.len(), 3);
    assert_eq!(lineage.entries[1].teacher.as_deref(), Some("stage1"));
    assert_eq!(lineage.entries[2].teacher.as_deref(), Some("stage2_iter1"));
    assert_eq!(cks[2].header.parent.as_deref(), Some(cks[1].fingerprint()));
    assert_eq!(Lineage::read(dir.path()).unwrap(), lineage);
    for e in &lineage.entries {
        let ck = crate::io::Checkpoint::load(&dir.path().join(&e.name)).unwrap();
        assert_eq!(ck.fingerprint(), e.fingerprint);
    }
    assert_eq!(events.iter().filter(|e| matches!(e, Event::Checkpoint { .. })).count(), 3);
}

fn ft_cfg(mode: ClassifyMode) -> FinetuneConfig {
    FinetuneConfig {
        mode,
        batch: 4,
        epochs: 2.0,
        warmup_epochs: 0.0,
        lr_base: 0.05,
        ..FinetuneConfig::default()
    }
}

#[test]
fn av_finetune_halves_video_lr() {
    let d = data(2);
    let m = ModelConfig::tiny();
    let cfg = ft_cfg(ClassifyMode::AV);
    let f = Finetuner::new(&cfg, &d, &m).unwrap();
    let pre = ModelBundle::init(&m, TargetKind::Raw, 3).unwrap();
    let mut recs = Vec::new();
    let state = f
        .run(Some(&pre), &mut |e| {
            if let Event::Finetune(r) = e {
                recs.push(*r);
            }
            Ok(())
        })
        .unwrap();
    assert_eq!(recs.len(), f.total_steps());
    for r in &recs {
        assert_eq!(r.lr_video.unwrap(), 0.5 * r.lr_audio.unwrap());
        assert_eq!(r.lr_audio.unwrap(), r.lr);
        assert!(r.loss.is_finite());
    }
    let scores = classify_set(&state.bundle, &d, 3, false).unwrap();
    assert_eq!(scores.shape(), &[8, 4]);

    let a_cfg = ft_cfg(ClassifyMode::A);
    let a = Finetuner::new(&a_cfg, &d, &m).unwrap();
    let s = a.init_state(Some(&pre)).unwrap();
    assert_eq!(s.bundle.params.by_name("audio.patch.w"), pre.params.by_name("audio.patch.w"));
}

#[test]
fn evaluation_ignores_finetune_masks() {
    let d = data(2);
    let m = ModelConfig::tiny();
    let cfg = ft_cfg(ClassifyMode::A);
    let state = Finetuner::new(&cfg, &d, &m).unwrap().init_state(None).unwrap();
    let s1 = classify_set(&state.bundle, &d, 1, false).unwrap();
    let other = FinetuneConfig { seed: 77, mask_ratio: 0.5, ..cfg };
    let _ = Finetuner::new(&other, &d, &m).unwrap();
    let s2 = classify_set(&state.bundle, &d, 5, false).unwrap();
    assert_eq!(s1, s2);
}

#[test]
fn bce_on_zero_logits_is_ln2() {
    let tape = Tape::new();
    let x = tape.constant(crate::Tensor::zeros(&[1, 3]));
    let l = tape.bce_with_logits(x, &crate::Tensor::from_rows(&[vec![1.0, 0.0, 1.0]]).unwrap()).unwrap();
    assert!((tape.scalar_value(l) - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn weighted_draws_match_probabilities() {
    let labels: Vec<Vec<usize>> = (0..40).map(|i| vec![usize::from(i % 10 == 0) + usize::from(i % 20 == 0)]).collect();
    let w = SamplerWeights::new(&labels, 3).unwrap();
    let probs = w.probabilities();
    let draws = weighted_sample(&labels, 3, 100_000, &mut crate::rng::stream(5, &[])).unwrap();
    let mut by_class = [0.0; 3];
    let mut want = [0.0; 3];
    for &i in &draws {
        by_class[labels[i][0]] += 1.0 / draws.len() as f64;
    }
    for (i, l) in labels.iter().enumerate() {
        want[l[0]] += probs[i];
    }
    for c in 0..3 {
        assert!((by_class[c] - want[c]).abs() < 0.01, "class {c}: {} vs {}", by_class[c], want[c]);
    }
}
