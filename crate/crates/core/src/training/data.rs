//! Model-ready views of a dataset.

use crate::audio::{normalize, pad_or_crop_time, MelSpectrogram, NormStats};
use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::model::ModelConfig;
use crate::numerics::Tensor;
use crate::tokenizer::{patchify_audio, tubelet_video};

/// Normalized audio patches, first-clip video tubelets and the full videos
/// (for multi-clip evaluation) of every instance.
#[derive(Clone, Debug)]
pub struct PreparedSet {
    pub model: ModelConfig,
    pub audio: Vec<Tensor>,
    pub video: Vec<Tensor>,
    pub full_video: Vec<Tensor>,
    pub labels: Vec<Vec<usize>>,
    pub num_classes: usize,
}

impl PreparedSet {
    pub fn len(&self) -> usize {
        self.audio.len()
    }

    pub fn is_empty(&self) -> bool {
        self.audio.is_empty()
    }

    pub fn first_labels(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l[0]).collect()
    }

    /// Tubelets of the clip starting at `offset` frames.
    pub fn clip_patches(&self, index: usize, offset: usize) -> Result<Tensor> {
        let v = &self.model.video;
        let clip = video_clip(&self.full_video[index], offset, v.frames)?;
        Ok(tubelet_video(&clip, v.patch_time, v.patch_size)?.data)
    }

    pub fn subset(&self, idx: &[usize]) -> PreparedSet {
        let pick = |xs: &Vec<Tensor>| idx.iter().map(|&i| xs[i].clone()).collect();
        PreparedSet {
            model: self.model.clone(),
            audio: pick(&self.audio),
            video: pick(&self.video),
            full_video: pick(&self.full_video),
            labels: idx.iter().map(|&i| self.labels[i].clone()).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// `frames` consecutive frames of a `T x C x H x W` video from `offset`.
pub fn video_clip(video: &Tensor, offset: usize, frames: usize) -> Result<Tensor> {
    let [t, c, h, w] = *video.shape() else {
        return Err(Error::shape("video_clip", format!("expected a 4-d video, got {:?}", video.shape())));
    };
    if offset + frames > t {
        return Err(Error::shape("video_clip", format!("clip {offset}..{} of a {t}-frame video", offset + frames)));
    }
    let per = c * h * w;
    Tensor::new(vec![frames, c, h, w], video.data()[offset * per..(offset + frames) * per].to_vec())
}

/// `clips` start offsets spread evenly over a `total`-frame video.
pub fn clip_offsets(total: usize, clip: usize, clips: usize) -> Vec<usize> {
    let span = total.saturating_sub(clip);
    if clips <= 1 || span == 0 {
        return vec![0; clips.max(1)];
    }
    (0..clips)
        .map(|i| ((i * span) as f64 / (clips - 1) as f64).round() as usize)
        .collect()
}

pub fn prepare(data: &Dataset, model: &ModelConfig, norm: &NormStats) -> Result<PreparedSet> {
    model.validate()?;
    let (ga, gv) = (&model.audio, &model.video);
    let mut out = PreparedSet {
        model: model.clone(),
        audio: Vec::with_capacity(data.len()),
        video: Vec::with_capacity(data.len()),
        full_video: Vec::with_capacity(data.len()),
        labels: Vec::with_capacity(data.len()),
        num_classes: data.num_classes,
    };
    for inst in &data.instances {
        if inst.audio.cols() != ga.bands {
            return Err(Error::shape(
                "prepare",
                format!("instance {} has {} mel bands, model expects {}", inst.id, inst.audio.cols(), ga.bands),
            ));
        }
        let [_, c, h, w] = *inst.video.shape() else {
            return Err(Error::shape("prepare", format!("instance {} video is not 4-d", inst.id)));
        };
        if (c, h, w) != (gv.channels, gv.size, gv.size) {
            return Err(Error::shape(
                "prepare",
                format!("instance {} frames are {c}x{h}x{w}, model expects {}x{}x{}", inst.id, gv.channels, gv.size, gv.size),
            ));
        }
        if inst.labels.is_empty() || inst.labels.iter().any(|&l| l >= data.num_classes) {
            return Err(Error::invalid(format!("instance {} has labels {:?} for {} classes", inst.id, inst.labels, data.num_classes)));
        }
        let spec = MelSpectrogram { frames: inst.audio.clone() };
        let spec = normalize(&pad_or_crop_time(&spec, ga.frames), norm)?;
        out.audio.push(patchify_audio(&spec.frames, ga.patch_time, ga.patch_freq)?.data);
        let clip = video_clip(&inst.video, 0, gv.frames)?;
        out.video.push(tubelet_video(&clip, gv.patch_time, gv.patch_size)?.data);
        out.full_video.push(inst.video.clone());
        out.labels.push(inst.labels.clone());
    }
    Ok(out)
}
