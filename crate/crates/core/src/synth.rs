//! Synthetic paired audio-video data with shared latent classes.
//!
//! Every instance has a class set and a phase in `[0, 1)`. Audio puts a
//! phase-shifted temporal envelope into the mel block of each class; video
//! shows a square per class whose row and dominant channel follow the class
//! and whose horizontal position follows the phase, drifting one pixel per
//! frame. Both modalities come from the same latent, so pairs are matchable.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::NormStats;
use crate::error::{Error, Result};
use crate::io::{Dataset, Instance};
use crate::numerics::Tensor;
use crate::rng::{self, domain};

/// Probability of a second label in multi-label mode.
pub const SECOND_LABEL_PROB: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub per_class: usize,
    /// Gaussian noise std, in normalized units for audio and pixel units for video.
    pub noise: f64,
    pub multilabel: bool,
    pub frames: usize,
    pub bands: usize,
    /// Frames in the stored video; training crops clips from it.
    pub video_frames: usize,
    pub channels: usize,
    pub size: usize,
    pub seed: u64,
    pub norm: NormStats,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 4,
            per_class: 64,
            noise: 0.1,
            multilabel: false,
            frames: 64,
            bands: 16,
            video_frames: 8,
            channels: 3,
            size: 32,
            seed: 0,
            norm: NormStats::AUDIOSET,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("synthetic data needs at least 2 classes".into()));
        }
        if self.bands < self.num_classes {
            return Err(Error::Config(format!(
                "{} mel bands cannot hold {} class blocks",
                self.bands, self.num_classes
            )));
        }
        if self.size < 2 * self.side() || self.size - self.side() + 1 < self.num_classes {
            return Err(Error::Config(format!("{}-pixel frames cannot hold {} class rows", self.size, self.num_classes)));
        }
        if self.frames == 0 || self.video_frames == 0 || self.channels == 0 {
            return Err(Error::Config("synthetic dimensions must be positive".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        Ok(())
    }

    /// Side of each square in pixels.
    pub fn side(&self) -> usize {
        (self.size / 8).max(1)
    }

    pub fn len(&self) -> usize {
        self.num_classes * self.per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn band_block(cfg: &SynthConfig, c: usize) -> std::ops::Range<usize> {
    let w = cfg.bands / cfg.num_classes;
    c * w..(c + 1) * w
}

fn envelope(t: usize, frames: usize, phase: f64) -> f64 {
    0.5 + 0.5 * (2.0 * std::f64::consts::PI * (t as f64 / frames as f64 + phase)).sin()
}

/// Noise-free normalized spectrogram (`frames x bands`) for a latent.
pub fn audio_pattern(cfg: &SynthConfig, labels: &[usize], phase: f64) -> Tensor {
    let mut s = Tensor::zeros(&[cfg.frames, cfg.bands]);
    for &c in labels {
        for t in 0..cfg.frames {
            let e = envelope(t, cfg.frames, phase);
            for f in band_block(cfg, c) {
                s.data_mut()[t * cfg.bands + f] += e;
            }
        }
    }
    s
}

/// Noise-free video (`video_frames x C x size x size`) for a latent.
pub fn video_pattern(cfg: &SynthConfig, labels: &[usize], phase: f64) -> Tensor {
    let (side, n, ch) = (cfg.side(), cfg.size, cfg.channels);
    let span = n - side + 1;
    let mut v = Tensor::zeros(&[cfg.video_frames, ch, n, n]);
    for &c in labels {
        let y0 = c * (n - side) / (cfg.num_classes - 1);
        let start = (phase * span as f64).floor() as usize % span;
        for t in 0..cfg.video_frames {
            let x0 = (start + t) % span;
            for k in 0..ch {
                let level = if k == c % ch { 1.0 } else { 0.3 };
                for y in y0..y0 + side {
                    for x in x0..x0 + side {
                        v.data_mut()[((t * ch + k) * n + y) * n + x] += level;
                    }
                }
            }
        }
    }
    v
}

/// Instance `index` of the dataset; depends only on `(cfg.seed, index)`.
pub fn instance(cfg: &SynthConfig, index: usize) -> Instance {
    let mut r = rng::stream(cfg.seed, &[domain::SYNTH, index as u64]);
    let first = index % cfg.num_classes;
    let phase: f64 = r.random();
    let mut labels = vec![first];
    if cfg.multilabel && r.random::<f64>() < SECOND_LABEL_PROB {
        let other = (first + 1 + r.random_range(0..cfg.num_classes - 1)) % cfg.num_classes;
        labels.push(other);
    }
    let mut audio = audio_pattern(cfg, &labels, phase);
    let (mean, std) = (cfg.norm.mean, cfg.norm.std * cfg.norm.divisor_scale);
    for x in audio.data_mut() {
        let z: f64 = r.sample(StandardNormal);
        *x = mean + std * (*x + cfg.noise * z);
    }
    let mut video = video_pattern(cfg, &labels, phase);
    for x in video.data_mut() {
        let z: f64 = r.sample(StandardNormal);
        *x += cfg.noise * z;
    }
    Instance {
        id: format!("s{index:05}"),
        labels,
        audio,
        video,
        phase,
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    Ok(Dataset {
        num_classes: cfg.num_classes,
        instances: (0..cfg.len()).map(|i| instance(cfg, i)).collect(),
    })
}

/// Class-stratified split on the first label. Returns sorted index lists.
pub fn split_indices(labels: &[Vec<usize>], num_classes: usize, train_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::invalid(format!("train fraction {train_frac} outside (0, 1)")));
    }
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, l) in labels.iter().enumerate() {
        let c = *l
            .first()
            .ok_or_else(|| Error::invalid(format!("instance {i} has no label")))?;
        by_class
            .get_mut(c)
            .ok_or_else(|| Error::invalid(format!("label {c} out of range")))?
            .push(i);
    }
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (c, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::invalid(format!("class {c} has fewer than 2 instances")));
        }
        members.shuffle(&mut rng::stream(seed, &[domain::SPLIT, c as u64]));
        let k = ((members.len() as f64 * train_frac).round() as usize).clamp(1, members.len() - 1);
        train.extend_from_slice(&members[..k]);
        eval.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    eval.sort_unstable();
    Ok((train, eval))
}

pub fn split(data: &Dataset, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let labels: Vec<Vec<usize>> = data.instances.iter().map(|i| i.labels.clone()).collect();
    let (tr, ev) = split_indices(&labels, data.num_classes, train_frac, seed)?;
    Ok((data.subset(&tr), data.subset(&ev)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{accuracy_top1, linear_probe};
    use std::collections::HashSet;

    fn small() -> SynthConfig {
        SynthConfig {
            per_class: 4,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn shapes_and_labels() {
        let cfg = small();
        let d = generate(&cfg).unwrap();
        assert_eq!(d.len(), 16);
        for (i, inst) in d.instances.iter().enumerate() {
            assert_eq!(inst.labels, vec![i % 4]);
            assert_eq!(inst.audio.shape(), &[64, 16]);
            assert_eq!(inst.video.shape(), &[8, 3, 32, 32]);
        }
    }

    #[test]
    fn noiseless_same_latent_is_identical() {
        let cfg = SynthConfig { noise: 0.0, ..small() };
        let a = audio_pattern(&cfg, &[2], 0.25);
        assert_eq!(a, audio_pattern(&cfg, &[2], 0.25));
        assert_ne!(a, audio_pattern(&cfg, &[2], 0.5));
        assert_eq!(video_pattern(&cfg, &[1], 0.3), video_pattern(&cfg, &[1], 0.3));
        // noise-free instances are their patterns
        let inst = instance(&cfg, 5);
        let v = video_pattern(&cfg, &inst.labels, inst.phase);
        assert_eq!(inst.video, v);
    }

    #[test]
    fn energy_sits_in_the_class_block() {
        let cfg = SynthConfig { noise: 0.0, ..small() };
        let a = audio_pattern(&cfg, &[3], 0.1);
        for t in 0..cfg.frames {
            for f in 0..cfg.bands {
                let want = if (12..16).contains(&f) { envelope(t, cfg.frames, 0.1) } else { 0.0 };
                assert_eq!(a.at(t, f), want);
            }
        }
        // class 0 square starts at the origin and drifts one pixel per frame
        let v = video_pattern(&cfg, &[0], 0.0);
        let (n, side) = (cfg.size, cfg.side());
        assert_eq!(v.data()[0], 1.0);
        let frame1 = n * n * 3;
        assert_eq!(v.data()[frame1], 0.0);
        assert_eq!(v.data()[frame1 + side], 1.0);
        assert_eq!(v.data()[n * n], 0.3);
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = small();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate(&cfg).unwrap().save(d1.path()).unwrap();
        generate(&cfg).unwrap().save(d2.path()).unwrap();
        for f in ["manifest.jsonl", "audio/s00003.mvtn", "video/s00011.mvtn"] {
            assert_eq!(std::fs::read(d1.path().join(f)).unwrap(), std::fs::read(d2.path().join(f)).unwrap());
        }
        let other = generate(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(other.instances[0].audio, generate(&cfg).unwrap().instances[0].audio);
    }

    #[test]
    fn multilabel_adds_distinct_second_labels() {
        let cfg = SynthConfig {
            multilabel: true,
            per_class: 100,
            ..SynthConfig::default()
        };
        let mut doubles = 0;
        for i in 0..cfg.len() {
            let inst = instance(&cfg, i);
            if inst.labels.len() == 2 {
                doubles += 1;
                assert_ne!(inst.labels[0], inst.labels[1]);
            }
        }
        let frac = doubles as f64 / cfg.len() as f64;
        assert!((frac - SECOND_LABEL_PROB).abs() < 0.05, "{frac}");
    }

    #[test]
    fn stratified_split() {
        let labels: Vec<Vec<usize>> = (0..8).map(|i| vec![i % 2]).collect();
        let (tr, ev) = split_indices(&labels, 2, 0.5, 3).unwrap();
        assert_eq!(tr.len(), 4);
        assert_eq!(tr.iter().filter(|&&i| i % 2 == 0).count(), 2);
        let all: HashSet<_> = tr.iter().chain(&ev).collect();
        assert_eq!(all.len(), 8);
        assert!(split_indices(&[vec![0], vec![1], vec![1]], 2, 0.5, 0).is_err());
        assert!(split_indices(&labels, 2, 1.0, 0).is_err());
    }

    #[test]
    fn audio_means_are_linearly_separable() {
        let cfg = SynthConfig::default();
        let d = generate(&cfg).unwrap();
        let (tr, ev) = split(&d, 0.5, 0).unwrap();
        let feats = |d: &Dataset| -> Tensor {
            let rows: Vec<Vec<f64>> = d
                .instances
                .iter()
                .map(|i| {
                    let spec = crate::audio::MelSpectrogram { frames: i.audio.clone() };
                    let a = crate::audio::normalize(&spec, &cfg.norm).unwrap().frames;
                    (0..cfg.bands)
                        .map(|f| (0..cfg.frames).map(|t| a.at(t, f)).sum::<f64>() / cfg.frames as f64)
                        .collect()
                })
                .collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let label = |d: &Dataset| -> Vec<usize> { d.instances.iter().map(|i| i.labels[0]).collect() };
        let probe = linear_probe(&feats(&tr), &label(&tr), cfg.num_classes, 1e-3).unwrap();
        let acc = accuracy_top1(&probe.scores(&feats(&ev)).unwrap(), &label(&ev)).unwrap();
        assert!(acc >= 0.95, "probe accuracy {acc}");
    }
}
