//! Line-delimited manifests and in-memory datasets.
//!
//! The first line of a manifest is a header carrying the format version and
//! the class count; every following line describes one paired instance.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tensor_file::{load_tensor, save_tensor, write_atomic, ElemType};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    num_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub labels: Vec<usize>,
    /// Paths relative to the dataset directory.
    pub audio: String,
    pub video: String,
    pub audio_frames: usize,
    pub video_frames: usize,
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub num_classes: usize,
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(&r.id) {
                return Err(Error::invalid(format!("duplicate id {} in manifest", r.id)));
            }
            if let Some(&c) = r.labels.iter().find(|&&c| c >= self.num_classes) {
                return Err(Error::invalid(format!(
                    "instance {} has label {c} but only {} classes",
                    r.id, self.num_classes
                )));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&Header {
            format: "mavil-manifest".into(),
            version: MANIFEST_VERSION,
            num_classes: self.num_classes,
        })?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Header = serde_json::from_str(lines.next().ok_or_else(|| Error::format(path, "empty manifest"))?)
            .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
        if header.format != "mavil-manifest" || header.version != MANIFEST_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported manifest {} version {}", header.format, header.version),
            ));
        }
        let records = lines
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 2))))
            .collect::<Result<Vec<Record>>>()?;
        let m = Manifest {
            num_classes: header.num_classes,
            records,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl()?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Checks that every referenced tensor file exists under `base`.
    pub fn check_files(&self, base: &Path) -> Result<()> {
        for r in &self.records {
            for f in [&r.audio, &r.video] {
                let p = base.join(f);
                if !p.is_file() {
                    return Err(Error::format(p, format!("missing file referenced by {}", r.id)));
                }
            }
        }
        Ok(())
    }
}

/// One paired audio-video example held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub id: String,
    pub labels: Vec<usize>,
    /// Log-mel spectrogram, `frames x bands`.
    pub audio: Tensor,
    /// Full video, `frames x channels x height x width`.
    pub video: Tensor,
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            num_classes: self.num_classes,
            records: self
                .instances
                .iter()
                .map(|i| Record {
                    id: i.id.clone(),
                    labels: i.labels.clone(),
                    audio: format!("audio/{}.mvtn", i.id),
                    video: format!("video/{}.mvtn", i.id),
                    audio_frames: i.audio.shape()[0],
                    video_frames: i.video.shape()[0],
                    phase: i.phase,
                })
                .collect(),
        }
    }

    /// Writes tensor files (32-bit) and `manifest.jsonl` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        for sub in ["audio", "video"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        let manifest = self.manifest();
        for (inst, rec) in self.instances.iter().zip(&manifest.records) {
            save_tensor(&dir.join(&rec.audio), &inst.audio, ElemType::F32)?;
            save_tensor(&dir.join(&rec.video), &inst.video, ElemType::F32)?;
        }
        let path = dir.join(MANIFEST_FILE);
        manifest.write(&path)?;
        Ok(path)
    }

    /// Loads the instances listed in a manifest; tensor paths resolve
    /// relative to the manifest's directory.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let m = Manifest::read(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        m.check_files(base)?;
        let instances = m
            .records
            .iter()
            .map(|r| {
                Ok(Instance {
                    id: r.id.clone(),
                    labels: r.labels.clone(),
                    audio: load_tensor(&base.join(&r.audio))?,
                    video: load_tensor(&base.join(&r.video))?,
                    phase: r.phase,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            num_classes: m.num_classes,
            instances,
        })
    }

    /// Resolves a path that is either a manifest file or a dataset directory.
    pub fn load_path(path: &Path) -> Result<Self> {
        if path.is_dir() {
            Self::load(&path.join(MANIFEST_FILE))
        } else {
            Self::load(path)
        }
    }

    pub fn subset(&self, ids: &[usize]) -> Dataset {
        Dataset {
            num_classes: self.num_classes,
            instances: ids.iter().map(|&i| self.instances[i].clone()).collect(),
        }
    }
}
