//! Flat run configuration with a fixed schema.
//!
//! Precedence, lowest first: schema defaults, `MAVIL_SEED`, the TOML file,
//! then `key=value` overrides. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::NormStats;
use crate::error::{Error, Result};
use crate::masking::MaskStrategy;
use crate::model::{ClassifyMode, FusionVariant, ModelConfig};
use crate::numerics::AdamWConfig;
use crate::objectives::ContrastConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Bool(b) => write!(f, "{b}"),
            Value::Int(i) => write!(f, "{i}"),
            Value::Float(x) => write!(f, "{x}"),
            Value::Str(s) => write!(f, "{s:?}"),
        }
    }
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Bool(_) => "bool",
        Value::Int(_) => "integer",
        Value::Float(_) => "float",
        Value::Str(_) => "string",
    }
}

/// Every accepted key with its default.
fn schema() -> Vec<(&'static str, Value)> {
    use Value::*;
    vec![
        ("model.preset", Str("desk".into())),
        ("model.width", Int(0)),
        ("model.uni_depth", Int(-1)),
        ("model.uni_heads", Int(0)),
        ("model.fusion_depth", Int(-1)),
        ("model.fusion_variant", Str("vanilla".into())),
        ("model.mbt_tokens", Int(4)),
        ("model.mbt_exchange", Bool(true)),
        ("model.decoder_width", Int(0)),
        ("model.decoder_depth", Int(-1)),
        ("model.decoder_heads", Int(0)),
        ("model.stage2_decoder_depth", Int(-1)),
        ("mask.ratio_audio", Float(0.8)),
        ("mask.ratio_video", Float(0.8)),
        ("mask.strategy_audio", Str("random".into())),
        ("mask.strategy_video", Str("random".into())),
        ("loss.alpha", Float(0.1)),
        ("loss.beta", Float(0.01)),
        ("loss.tau_inter", Float(0.1)),
        ("loss.tau_intra", Float(1.0)),
        ("loss.ctx_target_norm", Bool(false)),
        ("loss.ctx_all_positions", Bool(false)),
        ("train.seed", Int(0)),
        ("train.epochs", Float(20.0)),
        ("train.k_iters", Int(3)),
        ("train.batch", Int(8)),
        ("train.lr_base", Float(2e-4)),
        ("train.min_lr", Float(1e-6)),
        ("train.warmup_epochs", Float(4.0)),
        ("train.accum_steps", Int(1)),
        ("train.max_steps", Int(0)),
        ("train.warm_start", Bool(false)),
        ("optim.beta1", Float(0.9)),
        ("optim.beta2", Float(0.95)),
        ("optim.eps", Float(1e-8)),
        ("optim.weight_decay", Float(1e-5)),
        ("finetune.mode", Str("A".into())),
        ("finetune.mask_ratio", Float(0.2)),
        ("finetune.video_lr_mult", Float(0.5)),
        ("finetune.loss", Str("bce".into())),
        ("finetune.epochs", Float(60.0)),
        ("finetune.lr_base", Float(1e-3)),
        ("finetune.warmup_epochs", Float(4.0)),
        ("finetune.batch", Int(8)),
        ("finetune.weighted_sampling", Bool(false)),
        ("finetune.sample_size", Int(0)),
        ("eval.clips", Int(10)),
        ("eval.average", Str("logits".into())),
        ("eval.recall_k", Int(1)),
        ("synth.num_classes", Int(4)),
        ("synth.per_class", Int(64)),
        ("synth.noise", Float(0.1)),
        ("synth.multilabel", Bool(false)),
        ("synth.video_frames", Int(8)),
        ("synth.seed", Int(0)),
        ("data.norm_mean", Float(NormStats::AUDIOSET.mean)),
        ("data.norm_std", Float(NormStats::AUDIOSET.std)),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    values: BTreeMap<String, Value>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: schema().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, toml::Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

impl RunConfig {
    /// Defaults with `MAVIL_SEED` applied when set.
    pub fn from_env() -> Result<Self> {
        let mut c = Self::default();
        if let Ok(s) = std::env::var("MAVIL_SEED") {
            c.set_str("train.seed", &s)?;
        }
        Ok(c)
    }

    /// Builds a configuration from an optional TOML file and overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut c = Self::from_env()?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            c.merge_toml(&text)?;
        }
        for o in overrides {
            c.apply_override(o)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn keys() -> Vec<&'static str> {
        schema().into_iter().map(|(k, _)| k).collect()
    }

    pub fn merge_toml(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("TOML: {e}")))?;
        let mut flat = Vec::new();
        flatten("", &table, &mut flat);
        for (k, v) in flat {
            let value = match v {
                toml::Value::Boolean(b) => Value::Bool(b),
                toml::Value::Integer(i) => Value::Int(i),
                toml::Value::Float(f) => Value::Float(f),
                toml::Value::String(s) => Value::Str(s),
                other => return Err(Error::Config(format!("{k}: unsupported value {other}"))),
            };
            self.set(&k, value)?;
        }
        Ok(())
    }

    /// Applies `key=value`.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set_str(k.trim(), v.trim())
    }

    /// Parses `raw` according to the key's declared type.
    pub fn set_str(&mut self, key: &str, raw: &str) -> Result<()> {
        let current = self.get(key)?;
        let parsed = match current {
            Value::Bool(_) => raw.parse().map(Value::Bool).ok(),
            Value::Int(_) => raw.parse().map(Value::Int).ok(),
            Value::Float(_) => raw.parse().map(Value::Float).ok(),
            Value::Str(_) => Some(Value::Str(raw.trim_matches('"').to_string())),
        };
        let v = parsed.ok_or_else(|| Error::Config(format!("{key}: cannot parse {raw:?} as {}", kind(current))))?;
        self.set(key, v)
    }

    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        let current = self.get(key)?;
        let value = match (current, value) {
            (Value::Float(_), Value::Int(i)) => Value::Float(i as f64),
            (c, v) if kind(c) == kind(&v) => v,
            (c, v) => {
                return Err(Error::Config(format!("{key}: expected {}, got {}", kind(c), kind(&v))));
            }
        };
        self.values.insert(key.to_string(), value);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<&Value> {
        self.values.get(key).ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))
    }

    fn f(&self, key: &str) -> f64 {
        match self.values[key] {
            Value::Float(x) => x,
            Value::Int(i) => i as f64,
            _ => unreachable!("schema types are enforced on set"),
        }
    }

    fn i(&self, key: &str) -> i64 {
        match self.values[key] {
            Value::Int(i) => i,
            _ => unreachable!("schema types are enforced on set"),
        }
    }

    fn u(&self, key: &str) -> usize {
        self.i(key).max(0) as usize
    }

    fn b(&self, key: &str) -> bool {
        matches!(self.values[key], Value::Bool(true))
    }

    fn s(&self, key: &str) -> &str {
        match &self.values[key] {
            Value::Str(s) => s,
            _ => unreachable!("schema types are enforced on set"),
        }
    }

    pub fn seed(&self) -> u64 {
        self.i("train.seed") as u64
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig::preset(self.s("model.preset"))?;
        let pos = |k: &str, dst: &mut usize| {
            if self.i(k) > 0 {
                *dst = self.u(k);
            }
        };
        let nonneg = |k: &str, dst: &mut usize| {
            if self.i(k) >= 0 {
                *dst = self.u(k);
            }
        };
        pos("model.width", &mut m.width);
        nonneg("model.uni_depth", &mut m.uni_depth);
        pos("model.uni_heads", &mut m.uni_heads);
        nonneg("model.fusion_depth", &mut m.fusion_depth);
        pos("model.decoder_width", &mut m.decoder_width);
        nonneg("model.decoder_depth", &mut m.decoder_depth);
        pos("model.decoder_heads", &mut m.decoder_heads);
        m.fusion_variant = match self.s("model.fusion_variant").to_ascii_lowercase().as_str() {
            "vanilla" => FusionVariant::Vanilla,
            "mbt" => FusionVariant::Mbt,
            other => return Err(Error::Config(format!("unknown fusion variant {other:?}"))),
        };
        m.mbt_tokens = self.u("model.mbt_tokens");
        m.mbt_exchange = self.b("model.mbt_exchange");
        m.validate()?;
        Ok(m)
    }

    /// Student configuration for stage 2 (optionally shallower decoders).
    pub fn stage2_model(&self) -> Result<ModelConfig> {
        let mut m = self.model()?;
        if self.i("model.stage2_decoder_depth") >= 0 {
            m.decoder_depth = self.u("model.stage2_decoder_depth");
        }
        Ok(m)
    }

    pub fn mask(&self) -> Result<MaskConfig> {
        Ok(MaskConfig {
            ratio_audio: self.f("mask.ratio_audio"),
            ratio_video: self.f("mask.ratio_video"),
            strategy_audio: self.s("mask.strategy_audio").parse()?,
            strategy_video: self.s("mask.strategy_video").parse()?,
        })
    }

    pub fn contrast(&self) -> ContrastConfig {
        ContrastConfig {
            alpha: self.f("loss.alpha"),
            beta: self.f("loss.beta"),
            tau_inter: self.f("loss.tau_inter"),
            tau_intra: self.f("loss.tau_intra"),
        }
    }

    pub fn optim(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.f("optim.beta1"),
            beta2: self.f("optim.beta2"),
            eps: self.f("optim.eps"),
            weight_decay: self.f("optim.weight_decay"),
        }
    }

    pub fn norm(&self) -> NormStats {
        NormStats {
            mean: self.f("data.norm_mean"),
            std: self.f("data.norm_std"),
            ..NormStats::AUDIOSET
        }
    }

    pub fn train(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            seed: self.seed(),
            epochs: self.f("train.epochs"),
            k_iters: self.u("train.k_iters"),
            batch: self.u("train.batch"),
            lr_base: self.f("train.lr_base"),
            min_lr: self.f("train.min_lr"),
            warmup_epochs: self.f("train.warmup_epochs"),
            accum_steps: self.u("train.accum_steps"),
            max_steps: self.u("train.max_steps"),
            warm_start: self.b("train.warm_start"),
            ctx_target_norm: self.b("loss.ctx_target_norm"),
            ctx_all_positions: self.b("loss.ctx_all_positions"),
            mask: self.mask()?,
            contrast: self.contrast(),
            optim: self.optim(),
            norm: self.norm(),
        })
    }

    pub fn finetune(&self) -> Result<FinetuneConfig> {
        Ok(FinetuneConfig {
            seed: self.seed(),
            mode: self.s("finetune.mode").parse()?,
            mask_ratio: self.f("finetune.mask_ratio"),
            video_lr_mult: self.f("finetune.video_lr_mult"),
            loss: match self.s("finetune.loss").to_ascii_lowercase().as_str() {
                "bce" => FinetuneLoss::Bce,
                "ce" => FinetuneLoss::Ce,
                other => return Err(Error::Config(format!("unknown fine-tune loss {other:?}"))),
            },
            epochs: self.f("finetune.epochs"),
            lr_base: self.f("finetune.lr_base"),
            min_lr: self.f("train.min_lr"),
            warmup_epochs: self.f("finetune.warmup_epochs"),
            batch: self.u("finetune.batch"),
            weighted_sampling: self.b("finetune.weighted_sampling"),
            sample_size: self.u("finetune.sample_size"),
            max_steps: self.u("train.max_steps"),
            optim: self.optim(),
            norm: self.norm(),
        })
    }

    pub fn eval(&self) -> Result<EvalConfig> {
        Ok(EvalConfig {
            clips: self.u("eval.clips"),
            average_probs: match self.s("eval.average").to_ascii_lowercase().as_str() {
                "logits" => false,
                "probs" => true,
                other => return Err(Error::Config(format!("unknown clip averaging {other:?}"))),
            },
            recall_k: self.u("eval.recall_k"),
        })
    }

    pub fn synth(&self) -> Result<crate::synth::SynthConfig> {
        let m = self.model()?;
        Ok(crate::synth::SynthConfig {
            num_classes: self.u("synth.num_classes"),
            per_class: self.u("synth.per_class"),
            noise: self.f("synth.noise"),
            multilabel: self.b("synth.multilabel"),
            frames: m.audio.frames,
            bands: m.audio.bands,
            video_frames: self.u("synth.video_frames"),
            channels: m.video.channels,
            size: m.video.size,
            seed: self.i("synth.seed") as u64,
            norm: self.norm(),
        })
    }

    /// Checks every typed view so bad values fail before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.model()?;
        self.stage2_model()?.validate()?;
        self.train()?.validate()?;
        self.finetune()?.validate()?;
        self.eval()?;
        self.synth()?.validate()?;
        Ok(())
    }

    /// Canonical TOML-style listing of all keys, for logs and checkpoints.
    pub fn dump(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub ratio_audio: f64,
    pub ratio_video: f64,
    pub strategy_audio: MaskStrategy,
    pub strategy_video: MaskStrategy,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            ratio_audio: 0.8,
            ratio_video: 0.8,
            strategy_audio: MaskStrategy::Random,
            strategy_video: MaskStrategy::Random,
        }
    }
}

fn check_ratio(name: &str, r: f64) -> Result<()> {
    if !(0.0..1.0).contains(&r) {
        return Err(Error::Config(format!("{name} {r} outside [0, 1)")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: f64,
    pub k_iters: usize,
    pub batch: usize,
    pub lr_base: f64,
    pub min_lr: f64,
    pub warmup_epochs: f64,
    /// Micro-batches accumulated per optimizer step.
    pub accum_steps: usize,
    /// Stop after this many optimizer steps (0 runs the full schedule).
    pub max_steps: usize,
    /// Start each student from the teacher's weights instead of a fresh init.
    pub warm_start: bool,
    /// Layer-normalize teacher rows before regression.
    pub ctx_target_norm: bool,
    /// Regress teacher rows at every position instead of masked ones only.
    pub ctx_all_positions: bool,
    pub mask: MaskConfig,
    pub contrast: ContrastConfig,
    pub optim: AdamWConfig,
    pub norm: NormStats,
}

impl Default for TrainConfig {
    fn default() -> Self {
        RunConfig::default().train().expect("defaults are valid")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_iters == 0 {
            return Err(Error::Config("train.k_iters must be at least 1".into()));
        }
        if self.batch == 0 || self.accum_steps == 0 {
            return Err(Error::Config("batch size and accumulation steps must be positive".into()));
        }
        if !(self.epochs > 0.0 && self.warmup_epochs >= 0.0 && self.lr_base >= 0.0 && self.min_lr >= 0.0) {
            return Err(Error::Config("epochs, warm-up and learning rates must be non-negative".into()));
        }
        check_ratio("mask.ratio_audio", self.mask.ratio_audio)?;
        check_ratio("mask.ratio_video", self.mask.ratio_video)?;
        self.contrast.validate()
    }

    /// Samples consumed per optimizer step.
    pub fn effective_batch(&self) -> usize {
        self.batch * self.accum_steps
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinetuneLoss {
    /// Per-class binary cross-entropy on multi-hot targets.
    Bce,
    /// Softmax cross-entropy on the first label.
    Ce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub seed: u64,
    pub mode: ClassifyMode,
    pub mask_ratio: f64,
    pub video_lr_mult: f64,
    pub loss: FinetuneLoss,
    pub epochs: f64,
    pub lr_base: f64,
    pub min_lr: f64,
    pub warmup_epochs: f64,
    pub batch: usize,
    pub weighted_sampling: bool,
    /// Draws per epoch under weighted sampling (0 uses the dataset size).
    pub sample_size: usize,
    pub max_steps: usize,
    pub optim: AdamWConfig,
    pub norm: NormStats,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        RunConfig::default().finetune().expect("defaults are valid")
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        check_ratio("finetune.mask_ratio", self.mask_ratio)?;
        if self.batch == 0 || !(self.epochs > 0.0) || !(self.video_lr_mult >= 0.0) {
            return Err(Error::Config("fine-tune batch, epochs and lr multiplier must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub clips: usize,
    /// Average sigmoid probabilities across clips instead of logits.
    pub average_probs: bool,
    pub recall_k: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_hyperparameters() {
        let c = RunConfig::default();
        let t = c.train().unwrap();
        assert_eq!((t.lr_base, t.warmup_epochs, t.epochs, t.k_iters), (2e-4, 4.0, 20.0, 3));
        assert_eq!((t.contrast.alpha, t.contrast.beta), (0.1, 0.01));
        assert_eq!((t.contrast.tau_inter, t.contrast.tau_intra), (0.1, 1.0));
        assert_eq!((t.mask.ratio_audio, t.mask.ratio_video), (0.8, 0.8));
        assert_eq!((t.optim.beta2, t.optim.weight_decay, t.min_lr), (0.95, 1e-5, 1e-6));
        let f = c.finetune().unwrap();
        assert_eq!((f.mask_ratio, f.video_lr_mult), (0.2, 0.5));
        assert_eq!(c.eval().unwrap().clips, 10);
        c.validate().unwrap();
    }

    #[test]
    fn file_then_overrides() {
        let mut c = RunConfig::default();
        c.merge_toml("[train]\nbatch = 4\nlr_base = 1\n[model]\npreset = \"tiny\"\n").unwrap();
        assert_eq!(c.train().unwrap().batch, 4);
        assert_eq!(c.train().unwrap().lr_base, 1.0);
        c.apply_override("train.batch=16").unwrap();
        assert_eq!(c.train().unwrap().batch, 16);
        assert_eq!(c.model().unwrap(), ModelConfig::tiny());
    }

    #[test]
    fn unknown_keys_and_bad_types_are_rejected() {
        let mut c = RunConfig::default();
        assert!(c.apply_override("train.nope=1").unwrap_err().to_string().contains("unknown"));
        assert!(c.merge_toml("[mask]\nratio = 0.5\n").is_err());
        assert!(c.apply_override("train.batch=abc").is_err());
        assert!(c.apply_override("train.batch").is_err());
        assert!(c.merge_toml("[train]\nbatch = \"x\"\n").is_err());
        c.apply_override("mask.ratio_audio=1.5").unwrap();
        assert!(c.validate().is_err());
    }
}
