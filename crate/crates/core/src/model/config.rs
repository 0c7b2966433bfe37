use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tokenizer::Grid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionVariant {
    Vanilla,
    Mbt,
}

/// What the decoder heads regress: raw patches or `H`-wide latent rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Raw,
    Latent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioGeometry {
    pub frames: usize,
    pub bands: usize,
    pub patch_time: usize,
    pub patch_freq: usize,
}

impl AudioGeometry {
    pub fn grid(&self) -> Grid {
        Grid::Plane {
            rows: self.frames / self.patch_time,
            cols: self.bands / self.patch_freq,
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_time * self.patch_freq
    }

    pub fn num_tokens(&self) -> usize {
        self.grid().len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoGeometry {
    pub frames: usize,
    pub channels: usize,
    pub size: usize,
    pub patch_time: usize,
    pub patch_size: usize,
}

impl VideoGeometry {
    pub fn grid(&self) -> Grid {
        let s = self.size / self.patch_size;
        Grid::Volume {
            time: self.frames / self.patch_time,
            rows: s,
            cols: s,
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_time * self.patch_size * self.patch_size * self.channels
    }

    pub fn num_tokens(&self) -> usize {
        self.grid().len()
    }

    pub fn clip_shape(&self) -> [usize; 4] {
        [self.frames, self.channels, self.size, self.size]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub width: usize,
    pub uni_depth: usize,
    pub uni_heads: usize,
    pub fusion_depth: usize,
    pub fusion_variant: FusionVariant,
    pub mbt_tokens: usize,
    /// Average the per-modality bottleneck copies after every fusion layer.
    pub mbt_exchange: bool,
    pub decoder_width: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: usize,
    pub audio: AudioGeometry,
    pub video: VideoGeometry,
}

impl ModelConfig {
    pub fn base() -> Self {
        ModelConfig {
            width: 768,
            uni_depth: 12,
            uni_heads: 12,
            fusion_depth: 2,
            fusion_variant: FusionVariant::Vanilla,
            mbt_tokens: 4,
            mbt_exchange: true,
            decoder_width: 512,
            decoder_depth: 8,
            decoder_heads: 16,
            mlp_ratio: 4,
            audio: AudioGeometry {
                frames: 1024,
                bands: 128,
                patch_time: 16,
                patch_freq: 16,
            },
            video: VideoGeometry {
                frames: 8,
                channels: 3,
                size: 224,
                patch_time: 2,
                patch_size: 16,
            },
        }
    }

    /// 64x16 spectrograms in 8x8 patches and 4x3x32x32 clips in 2x8x8 tubelets.
    pub fn desk() -> Self {
        ModelConfig {
            width: 32,
            uni_depth: 2,
            uni_heads: 4,
            fusion_depth: 2,
            decoder_width: 32,
            decoder_depth: 2,
            decoder_heads: 4,
            audio: AudioGeometry {
                frames: 64,
                bands: 16,
                patch_time: 8,
                patch_freq: 8,
            },
            video: VideoGeometry {
                frames: 4,
                channels: 3,
                size: 32,
                patch_time: 2,
                patch_size: 8,
            },
            ..Self::base()
        }
    }

    /// Desk geometry with one layer per stage and width 16.
    pub fn tiny() -> Self {
        ModelConfig {
            width: 16,
            uni_depth: 1,
            uni_heads: 2,
            fusion_depth: 1,
            decoder_width: 16,
            decoder_depth: 1,
            decoder_heads: 2,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "base" => Ok(Self::base()),
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            _ => Err(Error::Config(format!("unknown model preset {name:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.uni_heads == 0 || !self.width.is_multiple_of(self.uni_heads) {
            return bad(format!("width {} not divisible by {} heads", self.width, self.uni_heads));
        }
        if self.decoder_width == 0 || self.decoder_heads == 0 || !self.decoder_width.is_multiple_of(self.decoder_heads) {
            return bad(format!(
                "decoder width {} not divisible by {} heads",
                self.decoder_width, self.decoder_heads
            ));
        }
        if !self.width.is_multiple_of(8) || !self.decoder_width.is_multiple_of(8) {
            return bad("encoder and decoder widths must be multiples of 8".into());
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        if self.fusion_variant == FusionVariant::Mbt && self.mbt_tokens == 0 {
            return bad("MBT fusion needs at least one bottleneck token".into());
        }
        let a = &self.audio;
        if a.patch_time == 0 || a.patch_freq == 0 || !a.frames.is_multiple_of(a.patch_time) || !a.bands.is_multiple_of(a.patch_freq) || a.frames == 0 || a.bands == 0 {
            return bad(format!("audio {}x{} does not tile into {}x{} patches", a.frames, a.bands, a.patch_time, a.patch_freq));
        }
        let v = &self.video;
        if v.patch_time == 0 || v.patch_size == 0 || !v.frames.is_multiple_of(v.patch_time) || !v.size.is_multiple_of(v.patch_size) || v.frames == 0 || v.size == 0 || v.channels == 0 {
            return bad(format!(
                "video {}x{}x{} does not tile into {}x{}x{} tubelets",
                v.frames, v.size, v.size, v.patch_time, v.patch_size, v.patch_size
            ));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}
