//! Patchification of spectrograms and clips, fixed sin-cos positional tables,
//! and token-sequence assembly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Video,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Video => "video",
        }
    }
}

/// Token grid. Audio is `time x freq`; video is `time x rows x cols`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Grid {
    Plane { rows: usize, cols: usize },
    Volume { time: usize, rows: usize, cols: usize },
}

impl Grid {
    pub fn len(&self) -> usize {
        match *self {
            Grid::Plane { rows, cols } => rows * cols,
            Grid::Volume { time, rows, cols } => time * rows * cols,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Splits the grid into an "outer" axis and an "inner" axis for structured
    /// masking: `(time slots, tokens per slot)`.
    pub fn time_and_rest(&self) -> (usize, usize) {
        match *self {
            Grid::Plane { rows, cols } => (rows, cols),
            Grid::Volume { time, rows, cols } => (time, rows * cols),
        }
    }
}

/// Raw, flattened patches of one input, `L x patch_dim`, in grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct Patches {
    pub data: Tensor,
    pub grid: Grid,
}

/// Embedded tokens for one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub grid: Grid,
    pub has_cls: bool,
    pub modality: Modality,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }
}

fn divisible(op: &'static str, what: &str, n: usize, k: usize) -> Result<usize> {
    if k == 0 || !n.is_multiple_of(k) || n == 0 {
        return Err(Error::shape(op, format!("{what} {n} is not divisible by patch size {k}")));
    }
    Ok(n / k)
}

/// Splits a `time x freq` spectrogram into non-overlapping patches, time-major.
pub fn patchify_audio(spec: &Tensor, patch_time: usize, patch_freq: usize) -> Result<Patches> {
    let (t, f) = spec.dims2()?;
    let gt = divisible("patchify_audio", "time", t, patch_time)?;
    let gf = divisible("patchify_audio", "frequency", f, patch_freq)?;
    let pd = patch_time * patch_freq;
    let mut data = Vec::with_capacity(t * f);
    for ti in 0..gt {
        for fi in 0..gf {
            for dt in 0..patch_time {
                let row = spec.row(ti * patch_time + dt);
                data.extend_from_slice(&row[fi * patch_freq..(fi + 1) * patch_freq]);
            }
        }
    }
    Ok(Patches {
        data: Tensor::new(vec![gt * gf, pd], data)?,
        grid: Grid::Plane { rows: gt, cols: gf },
    })
}

pub fn unpatchify_audio(p: &Patches, patch_time: usize, patch_freq: usize) -> Result<Tensor> {
    let Grid::Plane { rows: gt, cols: gf } = p.grid else {
        return Err(Error::shape("unpatchify_audio", "expected a plane grid"));
    };
    let (t, f) = (gt * patch_time, gf * patch_freq);
    let mut out = vec![0.0; t * f];
    for ti in 0..gt {
        for fi in 0..gf {
            let patch = p.data.row(ti * gf + fi);
            for dt in 0..patch_time {
                let dst = (ti * patch_time + dt) * f + fi * patch_freq;
                out[dst..dst + patch_freq].copy_from_slice(&patch[dt * patch_freq..(dt + 1) * patch_freq]);
            }
        }
    }
    Tensor::new(vec![t, f], out)
}

/// Splits a `frames x channels x height x width` clip into tubelets.
///
/// Tokens are ordered time-major, then row-major; each tubelet is flattened
/// as `(dt, y, x, channel)`.
pub fn tubelet_video(clip: &Tensor, patch_time: usize, patch_size: usize) -> Result<Patches> {
    let [t, c, h, w] = *clip.shape() else {
        return Err(Error::shape(
            "tubelet_video",
            format!("expected frames x channels x height x width, got {:?}", clip.shape()),
        ));
    };
    let gt = divisible("tubelet_video", "frames", t, patch_time)?;
    let gh = divisible("tubelet_video", "height", h, patch_size)?;
    let gw = divisible("tubelet_video", "width", w, patch_size)?;
    let pd = patch_time * patch_size * patch_size * c;
    let src = clip.data();
    let mut data = Vec::with_capacity(gt * gh * gw * pd);
    for ti in 0..gt {
        for yi in 0..gh {
            for xi in 0..gw {
                for dt in 0..patch_time {
                    for dy in 0..patch_size {
                        for dx in 0..patch_size {
                            let (ft, y, x) = (ti * patch_time + dt, yi * patch_size + dy, xi * patch_size + dx);
                            for ch in 0..c {
                                data.push(src[((ft * c + ch) * h + y) * w + x]);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Patches {
        data: Tensor::new(vec![gt * gh * gw, pd], data)?,
        grid: Grid::Volume {
            time: gt,
            rows: gh,
            cols: gw,
        },
    })
}

pub fn untubelet_video(p: &Patches, patch_time: usize, patch_size: usize, channels: usize) -> Result<Tensor> {
    let Grid::Volume { time: gt, rows: gh, cols: gw } = p.grid else {
        return Err(Error::shape("untubelet_video", "expected a volume grid"));
    };
    let (t, h, w, c) = (gt * patch_time, gh * patch_size, gw * patch_size, channels);
    let mut out = vec![0.0; t * c * h * w];
    for ti in 0..gt {
        for yi in 0..gh {
            for xi in 0..gw {
                let patch = p.data.row((ti * gh + yi) * gw + xi);
                let mut k = 0;
                for dt in 0..patch_time {
                    for dy in 0..patch_size {
                        for dx in 0..patch_size {
                            let (ft, y, x) = (ti * patch_time + dt, yi * patch_size + dy, xi * patch_size + dx);
                            for ch in 0..c {
                                out[((ft * c + ch) * h + y) * w + x] = patch[k];
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![t, c, h, w], out)
}

/// `[sin(p w_0) .. sin(p w_{d/2-1}), cos(p w_0) .. cos(p w_{d/2-1})]` with
/// `w_i = 10000^(-i / (d/2))`.
fn sincos_1d(dim: usize, pos: f64, out: &mut Vec<f64>) {
    let half = dim / 2;
    let freq = |i: usize| 1.0 / 10000f64.powf(i as f64 / half as f64);
    out.extend((0..half).map(|i| (pos * freq(i)).sin()));
    out.extend((0..half).map(|i| (pos * freq(i)).cos()));
}

/// Fixed sin-cos table, one row per grid cell in token order.
///
/// Planes split the width evenly between the two axes (width divisible by 4).
/// Volumes give half the width to time and a quarter to each spatial axis
/// (width divisible by 8).
pub fn sincos_pos_embed(grid: Grid, width: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(grid.len() * width);
    match grid {
        Grid::Plane { rows, cols } => {
            if !width.is_multiple_of(4) || width == 0 {
                return Err(Error::invalid(format!("2-D positional width {width} must be divisible by 4")));
            }
            for r in 0..rows {
                for c in 0..cols {
                    sincos_1d(width / 2, r as f64, &mut data);
                    sincos_1d(width / 2, c as f64, &mut data);
                }
            }
        }
        Grid::Volume { time, rows, cols } => {
            if !width.is_multiple_of(8) || width == 0 {
                return Err(Error::invalid(format!("3-D positional width {width} must be divisible by 8")));
            }
            for t in 0..time {
                for r in 0..rows {
                    for c in 0..cols {
                        sincos_1d(width / 2, t as f64, &mut data);
                        sincos_1d(width / 4, r as f64, &mut data);
                        sincos_1d(width / 4, c as f64, &mut data);
                    }
                }
            }
        }
    }
    Tensor::new(vec![grid.len(), width], data)
}

/// Linear patch embedding, `patches * weight + bias`.
pub fn embed_patches(p: &Patches, weight: &Tensor, bias: &Tensor, modality: Modality) -> Result<TokenSequence> {
    let mut tokens = p.data.matmul(weight)?;
    let h = tokens.cols();
    if bias.numel() != h {
        return Err(Error::shape("embed_patches", format!("bias {:?} for width {h}", bias.shape())));
    }
    for row in tokens.data_mut().chunks_mut(h) {
        row.iter_mut().zip(bias.data()).for_each(|(x, b)| *x += b);
    }
    Ok(TokenSequence {
        tokens,
        grid: p.grid,
        has_cls: false,
        modality,
    })
}

/// Adds positional rows and prepends the class token (which gets no position).
pub fn assemble(seq: &TokenSequence, pos: &Tensor, cls: Option<&Tensor>) -> Result<TokenSequence> {
    if seq.has_cls {
        return Err(Error::invalid("sequence already carries a class token"));
    }
    if pos.shape() != seq.tokens.shape() {
        return Err(Error::shape(
            "assemble",
            format!("positional table {:?} vs tokens {:?}", pos.shape(), seq.tokens.shape()),
        ));
    }
    let h = seq.width();
    let mut data = Vec::with_capacity((seq.len() + 1) * h);
    if let Some(cls) = cls {
        if cls.numel() != h {
            return Err(Error::shape("assemble", format!("class token {:?} for width {h}", cls.shape())));
        }
        data.extend_from_slice(cls.data());
    }
    data.extend(seq.tokens.data().iter().zip(pos.data()).map(|(x, p)| x + p));
    let rows = seq.len() + usize::from(cls.is_some());
    Ok(TokenSequence {
        tokens: Tensor::new(vec![rows, h], data)?,
        grid: seq.grid,
        has_cls: cls.is_some(),
        modality: seq.modality,
    })
}
