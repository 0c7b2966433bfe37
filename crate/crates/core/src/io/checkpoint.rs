//! Checkpoint directories.
//!
//! ```text
//! <dir>/header.json        format, version, configs, lineage, progress
//! <dir>/params/<i>.mvtn    one 64-bit tensor per parameter, in store order
//! <dir>/opt/m<i>.mvtn      AdamW first moments (when saved with state)
//! <dir>/opt/v<i>.mvtn      AdamW second moments
//! ```
//!
//! A directory is written under a temporary name and renamed into place.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tensor_file::{load_tensor, save_tensor, write_atomic, ElemType};
use crate::error::{Error, Result};
use crate::model::{ClassifierBundle, ClassifyMode, ModelBundle, ModelConfig, TargetKind};
use crate::numerics::{AdamWConfig, OptimizerState, ParamStore, Tensor};
use crate::objectives::Stage;

pub const CHECKPOINT_FORMAT: &str = "mavil-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const HEADER_FILE: &str = "header.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum CheckpointKind {
    Pretrain { target: TargetKind },
    Classifier { mode: ClassifyMode, classes: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Where a run stands; with counter-based streams this is the whole RNG state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub seed: u64,
    /// Optimizer steps taken.
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub config: AdamWConfig,
    pub step: u64,
    pub lr_scale: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    /// Training configuration of the run that produced the weights.
    pub train: serde_json::Value,
    pub stage: Stage,
    /// Self-training iteration (0 for stage 1 and fine-tuning).
    pub iteration: usize,
    /// Fingerprint of the checkpoint that taught or initialized this one.
    pub parent: Option<String>,
    pub progress: Progress,
    pub params: Vec<ParamEntry>,
    pub optimizer: Option<OptimizerHeader>,
    /// Content hash of every other header field; empty until saved.
    #[serde(default)]
    pub fingerprint: String,
}

impl CheckpointHeader {
    /// SHA-256 over the header (fingerprint blanked) and parameter layout.
    pub fn compute_fingerprint(&self) -> String {
        let mut blank = self.clone();
        blank.fingerprint.clear();
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&blank).expect("header serializes"));
        for p in &self.params {
            h.update(p.name.as_bytes());
            for d in &p.shape {
                h.update((*d as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
}

/// Lineage and progress fields supplied by the trainer.
#[derive(Clone, Debug)]
pub struct CheckpointMeta {
    pub train: serde_json::Value,
    pub stage: Stage,
    pub iteration: usize,
    pub parent: Option<String>,
    pub progress: Progress,
}

impl Checkpoint {
    fn build(
        kind: CheckpointKind,
        model: &ModelConfig,
        params: &ParamStore,
        optimizer: Option<&OptimizerState>,
        meta: CheckpointMeta,
    ) -> Self {
        let mut header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind,
            model: model.clone(),
            train: meta.train,
            stage: meta.stage,
            iteration: meta.iteration,
            parent: meta.parent,
            progress: meta.progress,
            params: params
                .iter()
                .map(|(_, name, t)| ParamEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            optimizer: optimizer.map(|o| OptimizerHeader {
                config: o.config,
                step: o.step,
                lr_scale: o.lr_scale.clone(),
            }),
            fingerprint: String::new(),
        };
        header.fingerprint = header.compute_fingerprint();
        Checkpoint {
            header,
            params: params.clone(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn pretrain(bundle: &ModelBundle, optimizer: Option<&OptimizerState>, meta: CheckpointMeta) -> Self {
        Self::build(
            CheckpointKind::Pretrain {
                target: bundle.model.target,
            },
            bundle.config(),
            &bundle.params,
            optimizer,
            meta,
        )
    }

    pub fn classifier(bundle: &ClassifierBundle, optimizer: Option<&OptimizerState>, meta: CheckpointMeta) -> Self {
        Self::build(
            CheckpointKind::Classifier {
                mode: bundle.model.mode,
                classes: bundle.model.classes,
            },
            &bundle.model.config,
            &bundle.params,
            optimizer,
            meta,
        )
    }

    pub fn fingerprint(&self) -> &str {
        &self.header.fingerprint
    }

    /// Writes the checkpoint atomically, replacing any existing directory.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let name = dir
            .file_name()
            .ok_or_else(|| Error::invalid(format!("checkpoint path {} has no file name", dir.display())))?;
        let tmp = dir.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        for sub in ["params", "opt"] {
            fs::create_dir_all(tmp.join(sub)).map_err(|e| Error::io(tmp.join(sub), e))?;
        }
        for (id, _, t) in self.params.iter() {
            save_tensor(&tmp.join(format!("params/{}.mvtn", id.index())), t, ElemType::F64)?;
        }
        if let Some(opt) = &self.optimizer {
            for (i, (m, v)) in opt.first.iter().zip(&opt.second).enumerate() {
                save_tensor(&tmp.join(format!("opt/m{i}.mvtn")), m, ElemType::F64)?;
                save_tensor(&tmp.join(format!("opt/v{i}.mvtn")), v, ElemType::F64)?;
            }
        }
        let json = serde_json::to_vec_pretty(&self.header)?;
        write_atomic(&tmp.join(HEADER_FILE), &json)?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
    }

    /// Reads and verifies a checkpoint directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let header = read_header(dir)?;
        let entries = header
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let path = dir.join(format!("params/{i}.mvtn"));
                let t = load_tensor(&path)?;
                if t.shape() != p.shape.as_slice() {
                    return Err(Error::format(
                        &path,
                        format!("shape {:?}, header says {:?} for {}", t.shape(), p.shape, p.name),
                    ));
                }
                Ok((p.name.clone(), t))
            })
            .collect::<Result<Vec<_>>>()?;
        let params = ParamStore::from_named(entries)?;
        let optimizer = match &header.optimizer {
            None => None,
            Some(o) => {
                let read = |prefix: &str| -> Result<Vec<Tensor>> {
                    (0..params.len())
                        .map(|i| load_tensor(&dir.join(format!("opt/{prefix}{i}.mvtn"))))
                        .collect()
                };
                let (first, second) = (read("m")?, read("v")?);
                if o.lr_scale.len() != params.len() {
                    return Err(Error::format(dir.join(HEADER_FILE), "optimizer lr scales do not match parameters"));
                }
                Some(OptimizerState::from_parts(o.config, first, second, o.lr_scale.clone(), o.step))
            }
        };
        Ok(Checkpoint {
            header,
            params,
            optimizer,
        })
    }

    pub fn pretrain_bundle(&self) -> Result<ModelBundle> {
        match self.header.kind {
            CheckpointKind::Pretrain { target } => {
                ModelBundle::from_params(&self.header.model, target, self.params.clone())
            }
            other => Err(Error::Config(format!("expected a pre-training checkpoint, found {other:?}"))),
        }
    }

    pub fn classifier_bundle(&self) -> Result<ClassifierBundle> {
        match self.header.kind {
            CheckpointKind::Classifier { mode, classes } => {
                ClassifierBundle::from_params(&self.header.model, mode, classes, self.params.clone())
            }
            other => Err(Error::Config(format!("expected a classifier checkpoint, found {other:?}"))),
        }
    }

    /// Checks that a run may continue from this checkpoint.
    pub fn check_resume(&self, model: &ModelConfig, train: &serde_json::Value, stage: Stage) -> Result<()> {
        let want = (model.fingerprint(), train, stage);
        let have = (self.header.model.fingerprint(), &self.header.train, self.header.stage);
        if want != have {
            return Err(Error::Fingerprint {
                expected: format!("model {} stage {:?} train {}", want.0, want.2, want.1),
                found: format!("model {} stage {:?} train {}", have.0, have.2, have.1),
            });
        }
        if self.optimizer.is_none() {
            return Err(Error::Config("checkpoint has no optimizer state to resume from".into()));
        }
        Ok(())
    }
}

/// Reads and verifies only the header.
pub fn read_header(dir: &Path) -> Result<CheckpointHeader> {
    let path: PathBuf = dir.join(HEADER_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes)?;
    match (value.get("format").and_then(|f| f.as_str()), value.get("version").and_then(|v| v.as_u64())) {
        (Some(CHECKPOINT_FORMAT), Some(v)) if v == CHECKPOINT_VERSION as u64 => {}
        (f, v) => {
            return Err(Error::format(
                &path,
                format!("expected {CHECKPOINT_FORMAT} version {CHECKPOINT_VERSION}, found {f:?} version {v:?}"),
            ))
        }
    }
    let header: CheckpointHeader = serde_json::from_value(value)?;
    let found = header.compute_fingerprint();
    if found != header.fingerprint {
        return Err(Error::Fingerprint {
            expected: header.fingerprint.clone(),
            found,
        });
    }
    Ok(header)
}
