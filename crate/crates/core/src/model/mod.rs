//! Uni-modal encoders, the fusion encoder, per-modality decoders and the
//! classification model.

mod config;
mod layers;
#[cfg(test)]
mod tests;

pub use config::{AudioGeometry, FusionVariant, ModelConfig, TargetKind, VideoGeometry};
pub use layers::{declare_blocks, run_blocks, Block, LayerNorm, Linear, LN_EPS};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::numerics::{Init, ParamBuilder, ParamId, ParamSpec, ParamStore, Tape, Tensor, Var};
use crate::rng;
use crate::tokenizer::{sincos_pos_embed, Grid, Modality};

/// Patch embedding, class token, pre-norm blocks and a final norm.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub patch: Linear,
    pub cls: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl Encoder {
    pub fn declare(pb: &mut ParamBuilder, name: &str, cfg: &ModelConfig, patch_dim: usize) -> Self {
        pb.scoped(name, |pb| Encoder {
            patch: Linear::declare(pb, "patch", patch_dim, cfg.width),
            cls: pb.declare("cls", &[1, cfg.width], Init::Normal(0.02)),
            blocks: declare_blocks(pb, "blocks", cfg.uni_depth, cfg.width, cfg.uni_heads, cfg.mlp_ratio),
            norm: LayerNorm::declare(pb, "norm", cfg.width),
        })
    }

    /// Embeds the kept patches, adds their positions and prepends the class token.
    pub fn embed(&self, tape: &Tape, p: &ParamStore, patches: &Tensor, plan: &MaskPlan, pos: &Tensor) -> Result<Var> {
        if patches.rows() != plan.len() || pos.rows() != plan.len() {
            return Err(Error::shape(
                "encoder",
                format!("{} patches, {} positions, plan of {}", patches.rows(), pos.rows(), plan.len()),
            ));
        }
        let cls = tape.param(p, self.cls);
        if plan.kept.is_empty() {
            return Ok(cls);
        }
        let x = tape.constant(patches.gather_rows(&plan.kept)?);
        let x = self.patch.forward(tape, p, x)?;
        let x = tape.add(x, tape.constant(pos.gather_rows(&plan.kept)?))?;
        tape.concat_rows(&[cls, x])
    }

    pub fn encode(&self, tape: &Tape, p: &ParamStore, tokens: Var) -> Result<Var> {
        let x = run_blocks(&self.blocks, tape, p, tokens)?;
        self.norm.forward(tape, p, x)
    }

    pub fn forward(&self, tape: &Tape, p: &ParamStore, patches: &Tensor, plan: &MaskPlan, pos: &Tensor) -> Result<Var> {
        let x = self.embed(tape, p, patches, plan, pos)?;
        self.encode(tape, p, x)
    }
}

#[derive(Clone, Debug)]
pub enum Fusion {
    Vanilla(Vec<Block>),
    Mbt {
        blocks: Vec<Block>,
        bottleneck: ParamId,
        exchange: bool,
    },
}

#[derive(Clone, Debug)]
pub struct FusionOutput {
    pub a_mm: Var,
    pub v_mm: Var,
    /// Bottleneck rows after each layer (MBT only; the averaged copy when exchange is on).
    pub bottleneck: Vec<Var>,
}

impl Fusion {
    pub fn declare(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Self {
        pb.scoped("fusion", |pb| {
            let blocks = declare_blocks(pb, "blocks", cfg.fusion_depth, cfg.width, cfg.uni_heads, cfg.mlp_ratio);
            match cfg.fusion_variant {
                FusionVariant::Vanilla => Fusion::Vanilla(blocks),
                FusionVariant::Mbt => Fusion::Mbt {
                    blocks,
                    bottleneck: pb.declare("bottleneck", &[cfg.mbt_tokens, cfg.width], Init::Normal(0.02)),
                    exchange: cfg.mbt_exchange,
                },
            }
        })
    }

    pub fn forward(&self, tape: &Tape, p: &ParamStore, a: Var, v: Var) -> Result<FusionOutput> {
        let (na, nv) = (tape.shape(a)[0], tape.shape(v)[0]);
        match self {
            Fusion::Vanilla(blocks) => {
                if blocks.is_empty() {
                    return Ok(FusionOutput {
                        a_mm: a,
                        v_mm: v,
                        bottleneck: Vec::new(),
                    });
                }
                let x = run_blocks(blocks, tape, p, tape.concat_rows(&[a, v])?)?;
                Ok(FusionOutput {
                    a_mm: tape.slice_rows(x, 0, na)?,
                    v_mm: tape.slice_rows(x, na, nv)?,
                    bottleneck: Vec::new(),
                })
            }
            Fusion::Mbt {
                blocks,
                bottleneck,
                exchange,
            } => {
                let b0 = tape.param(p, *bottleneck);
                let nb = tape.shape(b0)[0];
                let (mut a, mut v) = (a, v);
                let (mut ba, mut bv) = (b0, b0);
                let mut trace = Vec::with_capacity(blocks.len());
                for block in blocks {
                    let xa = block.forward(tape, p, tape.concat_rows(&[a, ba])?)?;
                    let xv = block.forward(tape, p, tape.concat_rows(&[v, bv])?)?;
                    a = tape.slice_rows(xa, 0, na)?;
                    v = tape.slice_rows(xv, 0, nv)?;
                    let (na_b, nv_b) = (tape.slice_rows(xa, na, nb)?, tape.slice_rows(xv, nv, nb)?);
                    if *exchange {
                        let avg = tape.scale(tape.add(na_b, nv_b)?, 0.5);
                        ba = avg;
                        bv = avg;
                        trace.push(avg);
                    } else {
                        ba = na_b;
                        bv = nv_b;
                        trace.push(nv_b);
                    }
                }
                Ok(FusionOutput {
                    a_mm: a,
                    v_mm: v,
                    bottleneck: trace,
                })
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub embed: Linear,
    pub mask_token: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl Decoder {
    pub fn declare(pb: &mut ParamBuilder, name: &str, cfg: &ModelConfig, out_dim: usize) -> Self {
        pb.scoped(name, |pb| Decoder {
            embed: Linear::declare(pb, "embed", cfg.width, cfg.decoder_width),
            mask_token: pb.declare("mask_token", &[1, cfg.decoder_width], Init::Normal(0.02)),
            blocks: declare_blocks(
                pb,
                "blocks",
                cfg.decoder_depth,
                cfg.decoder_width,
                cfg.decoder_heads,
                cfg.mlp_ratio,
            ),
            norm: LayerNorm::declare(pb, "norm", cfg.decoder_width),
            head: Linear::declare(pb, "head", cfg.decoder_width, out_dim),
        })
    }

    /// Predictions for every patch position, class row dropped.
    ///
    /// `pos` carries one row per full-sequence position including the
    /// class row (which is zero).
    pub fn forward(&self, tape: &Tape, p: &ParamStore, fused: Var, plan: &MaskPlan, pos: &Tensor) -> Result<Var> {
        if pos.rows() != plan.len() + 1 {
            return Err(Error::shape(
                "decode",
                format!("positional table of {} rows for plan of {}", pos.rows(), plan.len()),
            ));
        }
        let x = self.embed.forward(tape, p, fused)?;
        let x = crate::masking::restore_order(tape, x, plan, tape.param(p, self.mask_token), true)?;
        let x = tape.add(x, tape.constant(pos.clone()))?;
        let x = run_blocks(&self.blocks, tape, p, x)?;
        let x = self.norm.forward(tape, p, x)?;
        let x = self.head.forward(tape, p, x)?;
        tape.slice_rows(x, 1, plan.len())
    }
}

/// Fixed positional tables for one configuration.
#[derive(Clone, Debug)]
pub struct PosTables {
    pub audio: Tensor,
    pub video: Tensor,
    /// Decoder tables with a leading zero row for the class position.
    pub audio_dec: Tensor,
    pub video_dec: Tensor,
}

fn with_zero_row(t: Tensor) -> Result<Tensor> {
    let cols = t.cols();
    let mut data = vec![0.0; cols];
    data.extend_from_slice(t.data());
    Tensor::new(vec![t.rows() + 1, cols], data)
}

impl PosTables {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let (ga, gv) = (cfg.audio.grid(), cfg.video.grid());
        Ok(PosTables {
            audio: sincos_pos_embed(ga, cfg.width)?,
            video: sincos_pos_embed(gv, cfg.width)?,
            audio_dec: with_zero_row(sincos_pos_embed(ga, cfg.decoder_width)?)?,
            video_dec: with_zero_row(sincos_pos_embed(gv, cfg.decoder_width)?)?,
        })
    }

    pub fn encoder(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Audio => &self.audio,
            Modality::Video => &self.video,
        }
    }
}

/// Parameter layout of the pre-training model.
#[derive(Clone, Debug)]
pub struct Mavil {
    pub config: ModelConfig,
    pub target: TargetKind,
    pub audio: Encoder,
    pub video: Encoder,
    pub fusion: Fusion,
    pub audio_dec: Decoder,
    pub video_dec: Decoder,
}

impl Mavil {
    pub fn declare(config: &ModelConfig, target: TargetKind) -> Result<(Self, Vec<ParamSpec>)> {
        config.validate()?;
        let mut pb = ParamBuilder::new();
        let (out_a, out_v) = match target {
            TargetKind::Raw => (config.audio.patch_dim(), config.video.patch_dim()),
            TargetKind::Latent => (config.width, config.width),
        };
        let m = Mavil {
            config: config.clone(),
            target,
            audio: Encoder::declare(&mut pb, "audio", config, config.audio.patch_dim()),
            video: Encoder::declare(&mut pb, "video", config, config.video.patch_dim()),
            fusion: Fusion::declare(&mut pb, config),
            audio_dec: Decoder::declare(&mut pb, "audio_dec", config, out_a),
            video_dec: Decoder::declare(&mut pb, "video_dec", config, out_v),
        };
        Ok((m, pb.into_specs()))
    }

    pub fn encoder(&self, m: Modality) -> &Encoder {
        match m {
            Modality::Audio => &self.audio,
            Modality::Video => &self.video,
        }
    }

    pub fn decoder(&self, m: Modality) -> &Decoder {
        match m {
            Modality::Audio => &self.audio_dec,
            Modality::Video => &self.video_dec,
        }
    }
}

/// Parameter counts per submodule, fixed positional tables included.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub audio_encoder: usize,
    pub video_encoder: usize,
    pub fusion: usize,
    pub audio_decoder: usize,
    pub video_decoder: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.audio_encoder + self.video_encoder + self.fusion + self.audio_decoder + self.video_decoder
    }
}

/// Counts parameters from the declared layout alone, without allocating weights.
pub fn parameter_count(config: &ModelConfig, target: TargetKind) -> Result<ParamCount> {
    let (_, specs) = Mavil::declare(config, target)?;
    let sum = |prefix: &str| -> usize {
        specs
            .iter()
            .filter(|s| s.name.starts_with(prefix))
            .map(ParamSpec::numel)
            .sum()
    };
    let (la, lv) = (config.audio.num_tokens() + 1, config.video.num_tokens() + 1);
    Ok(ParamCount {
        audio_encoder: sum("audio.") + la * config.width,
        video_encoder: sum("video.") + lv * config.width,
        fusion: sum("fusion."),
        audio_decoder: sum("audio_dec.") + la * config.decoder_width,
        video_decoder: sum("video_dec.") + lv * config.decoder_width,
    })
}

/// Layout, fixed tables and weights of a pre-training model.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub model: Mavil,
    pub tables: PosTables,
    pub params: ParamStore,
}

impl ModelBundle {
    /// Fresh weights drawn from the init stream of `seed`.
    pub fn init(config: &ModelConfig, target: TargetKind, seed: u64) -> Result<Self> {
        let (model, specs) = Mavil::declare(config, target)?;
        let mut rng = rng::stream(seed, &[rng::domain::INIT]);
        let params = ParamStore::materialize(&specs, &mut rng);
        Ok(ModelBundle {
            tables: PosTables::new(config)?,
            model,
            params,
        })
    }

    /// Rebinds stored weights, checking every declared name and shape.
    pub fn from_params(config: &ModelConfig, target: TargetKind, params: ParamStore) -> Result<Self> {
        let (model, specs) = Mavil::declare(config, target)?;
        check_layout(&specs, &params)?;
        Ok(ModelBundle {
            tables: PosTables::new(config)?,
            model,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    /// Hash of the configuration, target kind and parameter names and shapes.
    pub fn fingerprint(&self) -> String {
        layout_fingerprint(&self.model.config, self.model.target, &self.params)
    }

    pub fn encode(&self, tape: &Tape, m: Modality, patches: &Tensor, plan: &MaskPlan) -> Result<Var> {
        self.model
            .encoder(m)
            .forward(tape, &self.params, patches, plan, self.tables.encoder(m))
    }

    pub fn fuse(&self, tape: &Tape, a: Var, v: Var) -> Result<FusionOutput> {
        self.model.fusion.forward(tape, &self.params, a, v)
    }

    pub fn decode(&self, tape: &Tape, m: Modality, fused: Var, plan: &MaskPlan) -> Result<Var> {
        let pos = match m {
            Modality::Audio => &self.tables.audio_dec,
            Modality::Video => &self.tables.video_dec,
        };
        self.model.decoder(m).forward(tape, &self.params, fused, plan, pos)
    }
}

pub(crate) fn check_layout(specs: &[ParamSpec], params: &ParamStore) -> Result<()> {
    if specs.len() != params.len() {
        return Err(Error::invalid(format!(
            "layout declares {} parameters, store holds {}",
            specs.len(),
            params.len()
        )));
    }
    for (spec, (_, name, t)) in specs.iter().zip(params.iter()) {
        if spec.name != name || spec.shape != t.shape() {
            return Err(Error::invalid(format!(
                "parameter {name} {:?} does not match declared {} {:?}",
                t.shape(),
                spec.name,
                spec.shape
            )));
        }
    }
    Ok(())
}

pub(crate) fn layout_fingerprint(config: &ModelConfig, tag: impl Serialize, params: &ParamStore) -> String {
    let mut h = Sha256::new();
    h.update(config.fingerprint().as_bytes());
    h.update(serde_json::to_vec(&tag).expect("tag serializes"));
    for (_, name, t) in params.iter() {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Mean over rows, skipping the class row when present.
pub fn pool_embedding(tape: &Tape, tokens: Var, has_cls: bool) -> Result<Var> {
    let n = tape.shape(tokens)[0];
    let off = usize::from(has_cls);
    if n <= off {
        return Err(Error::invalid("cannot pool an empty token sequence"));
    }
    let body = if has_cls { tape.slice_rows(tokens, 1, n - 1)? } else { tokens };
    tape.mean_rows(body)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassifyMode {
    A,
    V,
    AV,
}

impl std::str::FromStr for ClassifyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace(['+', '-', '_'], "").as_str() {
            "A" | "AUDIO" => Ok(ClassifyMode::A),
            "V" | "VIDEO" => Ok(ClassifyMode::V),
            "AV" => Ok(ClassifyMode::AV),
            _ => Err(Error::Config(format!("unknown classification mode {s:?}"))),
        }
    }
}

impl ClassifyMode {
    pub fn uses(self, m: Modality) -> bool {
        matches!(
            (self, m),
            (ClassifyMode::AV, _) | (ClassifyMode::A, Modality::Audio) | (ClassifyMode::V, Modality::Video)
        )
    }
}

/// Encoders reused from pre-training plus a fresh head (and, for `AV`, a
/// fresh joint Transformer).
#[derive(Clone, Debug)]
pub struct Classifier {
    pub config: ModelConfig,
    pub mode: ClassifyMode,
    pub classes: usize,
    pub audio: Option<Encoder>,
    pub video: Option<Encoder>,
    pub fusion: Vec<Block>,
    pub head: Linear,
}

/// Joint layers placed over both encoders in `AV` mode.
pub const AV_FUSION_DEPTH: usize = 2;

impl Classifier {
    pub fn declare(config: &ModelConfig, mode: ClassifyMode, classes: usize) -> Result<(Self, Vec<ParamSpec>)> {
        config.validate()?;
        if classes == 0 {
            return Err(Error::Config("classifier needs at least one class".into()));
        }
        let mut pb = ParamBuilder::new();
        let audio = mode
            .uses(Modality::Audio)
            .then(|| Encoder::declare(&mut pb, "audio", config, config.audio.patch_dim()));
        let video = mode
            .uses(Modality::Video)
            .then(|| Encoder::declare(&mut pb, "video", config, config.video.patch_dim()));
        let depth = if mode == ClassifyMode::AV { AV_FUSION_DEPTH } else { 0 };
        let fusion = declare_blocks(&mut pb, "cls_fusion", depth, config.width, config.uni_heads, config.mlp_ratio);
        let head = Linear::declare(&mut pb, "head", config.width, classes);
        let c = Classifier {
            config: config.clone(),
            mode,
            classes,
            audio,
            video,
            fusion,
            head,
        };
        Ok((c, pb.into_specs()))
    }

    /// `1 x classes` logits for one instance.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &Tape,
        p: &ParamStore,
        tables: &PosTables,
        audio: Option<(&Tensor, &MaskPlan)>,
        video: Option<(&Tensor, &MaskPlan)>,
    ) -> Result<Var> {
        let run = |enc: &Option<Encoder>, input: Option<(&Tensor, &MaskPlan)>, m: Modality| -> Result<Option<Var>> {
            match (enc, input) {
                (Some(e), Some((x, plan))) => Ok(Some(e.forward(tape, p, x, plan, tables.encoder(m))?)),
                (Some(_), None) => Err(Error::invalid(format!(
                    "{:?} classification needs {} input",
                    self.mode,
                    m.name()
                ))),
                (None, _) => Ok(None),
            }
        };
        let a = run(&self.audio, audio, Modality::Audio)?;
        let v = run(&self.video, video, Modality::Video)?;
        let pooled = match (a, v) {
            (Some(a), Some(v)) => {
                let (na, nv) = (tape.shape(a)[0], tape.shape(v)[0]);
                let x = run_blocks(&self.fusion, tape, p, tape.concat_rows(&[a, v])?)?;
                let rows: Vec<usize> = (1..na).chain(na + 1..na + nv).collect();
                if rows.is_empty() {
                    return Err(Error::invalid("cannot pool an empty token sequence"));
                }
                tape.mean_rows(tape.gather_rows(x, &rows)?)?
            }
            (Some(x), None) | (None, Some(x)) => pool_embedding(tape, x, true)?,
            (None, None) => unreachable!("every mode uses at least one encoder"),
        };
        self.head.forward(tape, p, pooled)
    }
}

/// Layout, fixed tables and weights of a classifier.
#[derive(Clone, Debug)]
pub struct ClassifierBundle {
    pub model: Classifier,
    pub tables: PosTables,
    pub params: ParamStore,
}

impl ClassifierBundle {
    pub fn init(config: &ModelConfig, mode: ClassifyMode, classes: usize, seed: u64) -> Result<Self> {
        let (model, specs) = Classifier::declare(config, mode, classes)?;
        let mut rng = rng::stream(seed, &[rng::domain::INIT, 1]);
        Ok(ClassifierBundle {
            tables: PosTables::new(config)?,
            params: ParamStore::materialize(&specs, &mut rng),
            model,
        })
    }

    pub fn from_params(config: &ModelConfig, mode: ClassifyMode, classes: usize, params: ParamStore) -> Result<Self> {
        let (model, specs) = Classifier::declare(config, mode, classes)?;
        check_layout(&specs, &params)?;
        Ok(ClassifierBundle {
            tables: PosTables::new(config)?,
            params,
            model,
        })
    }

    pub fn fingerprint(&self) -> String {
        layout_fingerprint(&self.model.config, (self.model.mode, self.model.classes), &self.params)
    }

    pub fn forward(
        &self,
        tape: &Tape,
        audio: Option<(&Tensor, &MaskPlan)>,
        video: Option<(&Tensor, &MaskPlan)>,
    ) -> Result<Var> {
        self.model.forward(tape, &self.params, &self.tables, audio, video)
    }
}

/// Grid of a modality under a configuration.
pub fn grid_of(config: &ModelConfig, m: Modality) -> Grid {
    match m {
        Modality::Audio => config.audio.grid(),
        Modality::Video => config.video.grid(),
    }
}
