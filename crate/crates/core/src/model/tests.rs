use approx::assert_abs_diff_eq;
use rand::Rng;

use super::*;
use crate::masking::{make_mask, MaskStrategy};
use crate::tokenizer::patchify_audio;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng::stream(seed, &[42]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn tiny_bundle(seed: u64) -> ModelBundle {
    ModelBundle::init(&ModelConfig::tiny(), TargetKind::Raw, seed).unwrap()
}

#[test]
fn base_parameter_counts() {
    let c = parameter_count(&ModelConfig::base(), TargetKind::Raw).unwrap();
    let within = |n: usize, target: f64| (n as f64 / target - 1.0).abs() <= 0.02;
    assert_eq!(c.audio_encoder, 85_648_128);
    assert_eq!(c.video_encoder, 86_840_064);
    assert!(within(c.audio_encoder, 86e6) && within(c.video_encoder, 86e6), "{c:?}");
    assert_eq!(c.video_decoder, 26_804_224);
    assert!(within(c.video_decoder, 27e6));
    // A 256-wide raw head over 512 positions lands 3.7% under 27M.
    assert_eq!(c.audio_decoder, 26_008_320);
}

#[test]
fn fingerprint_tracks_config() {
    let a = ModelConfig::tiny();
    let mut b = a.clone();
    assert_eq!(a.fingerprint(), b.fingerprint());
    b.mbt_tokens = 5;
    assert_ne!(a.fingerprint(), b.fingerprint());
    assert_eq!(tiny_bundle(1).fingerprint(), tiny_bundle(2).fingerprint());
}

#[test]
fn encoder_preserves_shape_and_zero_depth_is_final_norm() {
    let mut cfg = ModelConfig::tiny();
    cfg.uni_depth = 0;
    let b = ModelBundle::init(&cfg, TargetKind::Raw, 3).unwrap();
    let tape = Tape::inference();
    let x = tape.constant(random(&[5, 16], 1));
    let y = b.model.audio.encode(&tape, &b.params, x).unwrap();
    assert_eq!(tape.shape(y), vec![5, 16]);
    let reference = tape.layer_norm(x, LN_EPS).unwrap();
    assert!(tape.value(y).max_abs_diff(&tape.value(reference)) < 1e-15);
}

#[test]
fn self_attention_is_permutation_equivariant() {
    let b = tiny_bundle(4);
    let tape = Tape::inference();
    let x = random(&[6, 16], 2);
    let perm = [0, 3, 2, 1, 4, 5];
    let y = tape.value(b.model.audio.encode(&tape, &b.params, tape.constant(x.clone())).unwrap());
    let yp = tape.value(
        b.model
            .audio
            .encode(&tape, &b.params, tape.constant(x.gather_rows(&perm).unwrap()))
            .unwrap(),
    );
    assert!(y.gather_rows(&perm).unwrap().max_abs_diff(&yp) < 1e-12);
}

#[test]
fn vanilla_fusion_keeps_lengths_and_mixes_modalities() {
    let b = tiny_bundle(5);
    let tape = Tape::inference();
    let a = tape.constant(random(&[3, 16], 3));
    let v = tape.constant(random(&[5, 16], 4));
    let out = b.fuse(&tape, a, v).unwrap();
    assert_eq!((tape.shape(out.a_mm)[0], tape.shape(out.v_mm)[0]), (3, 5));
    let mut vp = random(&[5, 16], 4);
    vp.data_mut()[7] += 0.5;
    let out2 = b.fuse(&tape, a, tape.constant(vp)).unwrap();
    assert!(tape.value(out.a_mm).max_abs_diff(&tape.value(out2.a_mm)) > 1e-6);

    let mut cfg = ModelConfig::tiny();
    cfg.fusion_depth = 0;
    let b0 = ModelBundle::init(&cfg, TargetKind::Raw, 5).unwrap();
    let out = b0.fuse(&tape, a, v).unwrap();
    assert_eq!((out.a_mm, out.v_mm), (a, v));
}

fn mbt_config(exchange: bool, depth: usize) -> ModelConfig {
    ModelConfig {
        fusion_variant: FusionVariant::Mbt,
        fusion_depth: depth,
        mbt_exchange: exchange,
        ..ModelConfig::tiny()
    }
}

#[test]
fn mbt_isolation_and_exchange() {
    let tape = Tape::inference();
    let a = random(&[4, 16], 6);
    let a2 = random(&[4, 16], 60);
    let v = tape.constant(random(&[7, 16], 7));
    for exchange in [false, true] {
        let b = ModelBundle::init(&mbt_config(exchange, 2), TargetKind::Raw, 8).unwrap();
        let o1 = b.fuse(&tape, tape.constant(a.clone()), v).unwrap();
        let o2 = b.fuse(&tape, tape.constant(a2.clone()), v).unwrap();
        assert_eq!(o1.bottleneck.len(), 2);
        assert!(o1.bottleneck.iter().all(|&t| tape.shape(t) == vec![4, 16]));
        let (v1, v2) = (tape.value(o1.v_mm), tape.value(o2.v_mm));
        if exchange {
            assert!(v1.max_abs_diff(&v2) > 1e-9);
        } else {
            assert!(v1.data().iter().zip(v2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}

/// Plain-loop evaluation of a pre-norm block, independent of the tape.
fn oracle_block(b: &Block, p: &ParamStore, x: &Tensor) -> Tensor {
    let (n, h) = x.dims2().unwrap();
    let get = |id: ParamId| p.get(id).clone();
    let ln = |x: &Tensor, l: &LayerNorm| {
        let (g, bb) = (get(l.g), get(l.b));
        let mut out = x.clone();
        for i in 0..n {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / h as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / h as f64;
            for j in 0..h {
                out.data_mut()[i * h + j] = (row[j] - mean) / (var + LN_EPS).sqrt() * g.data()[j] + bb.data()[j];
            }
        }
        out
    };
    let lin = |x: &Tensor, l: &Linear| {
        let (w, bb) = (get(l.w), get(l.b));
        let (rows, k) = x.dims2().unwrap();
        let m = w.cols();
        let mut out = vec![0.0; rows * m];
        for i in 0..rows {
            for j in 0..m {
                out[i * m + j] = bb.data()[j] + (0..k).map(|t| x.at(i, t) * w.at(t, j)).sum::<f64>();
            }
        }
        Tensor::new(vec![rows, m], out).unwrap()
    };
    let heads = b.heads;
    let d = h / heads;
    let qkv = lin(&ln(x, &b.ln1), &b.qkv);
    let mut att = vec![0.0; n * h];
    for hd in 0..heads {
        for i in 0..n {
            let s: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|t| qkv.at(i, hd * d + t) * qkv.at(j, h + hd * d + t)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..d {
                att[i * h + hd * d + t] = (0..n).map(|j| e[j] / z * qkv.at(j, 2 * h + hd * d + t)).sum();
            }
        }
    }
    let att = lin(&Tensor::new(vec![n, h], att).unwrap(), &b.proj);
    let x1 = Tensor::new(vec![n, h], x.data().iter().zip(att.data()).map(|(a, b)| a + b).collect()).unwrap();
    let hid = lin(&ln(&x1, &b.ln2), &b.fc1).map(|v| v * 0.5 * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)));
    let m = lin(&hid, &b.fc2);
    Tensor::new(vec![n, h], x1.data().iter().zip(m.data()).map(|(a, b)| a + b).collect()).unwrap()
}

#[test]
fn mbt_single_layer_matches_oracle() {
    let mut cfg = mbt_config(true, 1);
    cfg.uni_heads = 1;
    let b = ModelBundle::init(&cfg, TargetKind::Raw, 9).unwrap();
    let Fusion::Mbt { blocks, bottleneck, .. } = &b.model.fusion else { panic!() };
    let a = random(&[3, 16], 10);
    let v = random(&[2, 16], 11);
    let b0 = b.params.get(*bottleneck);
    let stack = |x: &Tensor| {
        let mut d = x.data().to_vec();
        d.extend_from_slice(b0.data());
        Tensor::new(vec![x.rows() + 4, 16], d).unwrap()
    };
    let xa = oracle_block(&blocks[0], &b.params, &stack(&a));
    let xv = oracle_block(&blocks[0], &b.params, &stack(&v));
    let tape = Tape::inference();
    let out = b.fuse(&tape, tape.constant(a), tape.constant(v)).unwrap();
    let a_mm = tape.value(out.a_mm);
    let v_mm = tape.value(out.v_mm);
    let bt = tape.value(out.bottleneck[0]);
    for i in 0..3 {
        for j in 0..16 {
            assert_abs_diff_eq!(a_mm.at(i, j), xa.at(i, j), epsilon = 1e-12);
        }
    }
    for i in 0..2 {
        for j in 0..16 {
            assert_abs_diff_eq!(v_mm.at(i, j), xv.at(i, j), epsilon = 1e-12);
        }
    }
    for i in 0..4 {
        for j in 0..16 {
            assert_abs_diff_eq!(bt.at(i, j), 0.5 * (xa.at(3 + i, j) + xv.at(2 + i, j)), epsilon = 1e-12);
        }
    }
}

#[test]
fn decoder_output_widths() {
    let mut cfg = ModelConfig::tiny();
    cfg.audio = ModelConfig::base().audio;
    for (target, width) in [(TargetKind::Raw, 256), (TargetKind::Latent, 16)] {
        let b = ModelBundle::init(&cfg, target, 12).unwrap();
        let plan = make_mask(cfg.audio.grid(), 0.8, MaskStrategy::Random, 1).unwrap();
        let tape = Tape::inference();
        let fused = tape.constant(random(&[1 + plan.kept.len(), 16], 13));
        let out = b.decode(&tape, Modality::Audio, fused, &plan).unwrap();
        assert_eq!(tape.shape(out), vec![512, width]);
        assert!(b.decode(&tape, Modality::Audio, tape.constant(random(&[5, 16], 1)), &plan).is_err());
    }
}

#[test]
fn keep_all_zero_depth_decoder_is_norm_of_projection() {
    let mut cfg = ModelConfig::tiny();
    cfg.decoder_depth = 0;
    let mut b = ModelBundle::init(&cfg, TargetKind::Latent, 14).unwrap();
    let head = b.model.audio_dec.head.clone();
    *b.params.get_mut(head.w) = Tensor::eye(16);
    let plan = MaskPlan::keep_all(cfg.audio.num_tokens());
    let tape = Tape::inference();
    let fused = random(&[17, 16], 15);
    let out = tape.value(b.decode(&tape, Modality::Audio, tape.constant(fused.clone()), &plan).unwrap());
    let d = &b.model.audio_dec;
    let proj = d.embed.forward(&tape, &b.params, tape.constant(fused)).unwrap();
    let pos = tape.constant(b.tables.audio_dec.clone());
    let x = d.norm.forward(&tape, &b.params, tape.add(proj, pos).unwrap()).unwrap();
    let expected = tape.value(tape.slice_rows(x, 1, 16).unwrap());
    assert!(out.max_abs_diff(&expected) < 1e-15);
}

#[test]
fn pooling_cases() {
    let tape = Tape::inference();
    let one = tape.constant(Tensor::from_rows(&[vec![9.0, 9.0], vec![1.0, -2.0]]).unwrap());
    assert_eq!(tape.value(pool_embedding(&tape, one, true).unwrap()).data(), &[1.0, -2.0]);
    let opp = tape.constant(Tensor::from_rows(&[vec![1.5, -2.0], vec![-1.5, 2.0]]).unwrap());
    assert_eq!(tape.value(pool_embedding(&tape, opp, false).unwrap()).data(), &[0.0, 0.0]);
    let x = random(&[7, 5], 16);
    let pooled = tape.value(pool_embedding(&tape, tape.constant(x.clone()), true).unwrap());
    for j in 0..5 {
        let mut s = 0.0;
        for i in 1..7 {
            s += x.at(i, j);
        }
        assert_abs_diff_eq!(pooled.data()[j], s / 6.0, epsilon = 1e-12);
    }
    let cls_only = tape.constant(Tensor::zeros(&[1, 2]));
    assert!(pool_embedding(&tape, cls_only, true).is_err());
}

fn desk_inputs(seed: u64) -> (Tensor, Tensor) {
    let cfg = ModelConfig::tiny();
    let spec = random(&[cfg.audio.frames, cfg.audio.bands], seed);
    let a = patchify_audio(&spec, cfg.audio.patch_time, cfg.audio.patch_freq).unwrap().data;
    let clip = random(&cfg.video.clip_shape(), seed + 1);
    let v = crate::tokenizer::tubelet_video(&clip, cfg.video.patch_time, cfg.video.patch_size)
        .unwrap()
        .data;
    (a, v)
}

#[test]
fn classifier_heads() {
    let cfg = ModelConfig::tiny();
    let (a, v) = desk_inputs(20);
    let pa = MaskPlan::keep_all(a.rows());
    let pv = MaskPlan::keep_all(v.rows());
    let mut c = ClassifierBundle::init(&cfg, ClassifyMode::A, 5, 1).unwrap();
    let tape = Tape::inference();
    let logits = c.forward(&tape, Some((&a, &pa)), None).unwrap();
    assert_eq!(tape.shape(logits), vec![1, 5]);
    let head = c.model.head.clone();
    *c.params.get_mut(head.w) = Tensor::zeros(&[16, 5]);
    let tape = Tape::inference();
    let logits = c.forward(&tape, Some((&a, &pa)), None).unwrap();
    assert!(tape.value(logits).data().iter().all(|&x| x == 0.0));
    assert!(c.forward(&tape, None, Some((&v, &pv))).is_err());

    let mut av = ClassifierBundle::init(&cfg, ClassifyMode::AV, 3, 2).unwrap();
    av.model.fusion.clear();
    let tape = Tape::inference();
    let logits = tape.value(av.forward(&tape, Some((&a, &pa)), Some((&v, &pv))).unwrap());
    let ea = av.model.audio.as_ref().unwrap().forward(&tape, &av.params, &a, &pa, &av.tables.audio).unwrap();
    let ev = av.model.video.as_ref().unwrap().forward(&tape, &av.params, &v, &pv, &av.tables.video).unwrap();
    let body = tape
        .concat_rows(&[tape.slice_rows(ea, 1, 16).unwrap(), tape.slice_rows(ev, 1, 32).unwrap()])
        .unwrap();
    let expected = av.model.head.forward(&tape, &av.params, tape.mean_rows(body).unwrap()).unwrap();
    let diff = logits.max_abs_diff(&tape.value(expected));
    assert!(diff < 1e-12, "{diff} {logits:?} {:?}", tape.value(expected));
}

#[test]
fn forwards_are_deterministic() {
    let b = tiny_bundle(21);
    let (a, _) = desk_inputs(22);
    let plan = make_mask(b.config().audio.grid(), 0.8, MaskStrategy::TimeFreq, 3).unwrap();
    let run = || {
        let tape = Tape::inference();
        let x = b.encode(&tape, Modality::Audio, &a, &plan).unwrap();
        tape.value(x).as_ref().clone()
    };
    assert_eq!(run(), run());
}
