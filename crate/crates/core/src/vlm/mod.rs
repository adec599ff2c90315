//! The toy vision-language model: a per-frame visual encoder feeding an
//! encoder-decoder language model over the BPE vocabulary.
//!
//! The visual side patchifies each 16×16 frame into N=16 tokens of width
//! C=32 and runs a small transformer *per frame* — no attention ever
//! crosses frame boundaries, so visual cost grows linearly in the frame
//! count. Frame token blocks are concatenated with embedded instruction
//! tokens and consumed by a bidirectional encoder; a causal decoder with
//! cross-attention produces output logits.
//!
//! Parameters live in two named groups, `"visual"` and `"language"`,
//! which is what the two-stage adaptation freezes against.

mod blocks;
mod forward;
mod generate;

pub use forward::{caption_loss, encode_frames, VisualTokens};
pub(crate) use forward::{patchify, validate_and_insert_tokens};
pub use generate::{
    generate, generate_traced, nucleus_filter, sample_index, DecodeMode, GenerateOptions,
    GeneratedSample, NucleusSet, StepTrace,
};

pub(crate) use blocks::{
    causal_mask, decoder_layer, encoder_layer, final_layer_norm, linear, param,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::rng_from;
use crate::tensor::{ParamSet, Tensor};
use crate::tokenizer::DEFAULT_VOCAB_SIZE;
use crate::world::CANVAS;

/// Feed-forward hidden width as a multiple of the model width.
pub(crate) const FFN_MULT: usize = 4;

pub const VISUAL_GROUP: &str = "visual";
pub const LANGUAGE_GROUP: &str = "language";

/// Hyperparameters of [`VlmModel`]. Defaults are the pipeline values;
/// smaller configs exist for fast exact checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VlmConfig {
    pub vocab_size: usize,
    /// Token width C, shared by both towers (identity projection).
    pub width: usize,
    /// Weight-initialization standard deviation for all matrices.
    ///
    /// This bounds how expressive a model with a frozen language tower can
    /// ever be: the final layer norm pins the decoder feature norm to √C,
    /// so output logits cannot exceed ≈ init_std·C in magnitude. Training
    /// only the visual tower therefore needs init_std·C comfortably above
    /// the logit range the task demands, while finite-difference gradient
    /// verification wants the smallest (smoothest) weights that still
    /// clear the layer-norm variance floor.
    pub init_std: f64,
    /// Patch edge in pixels; `CANVAS/patch` squared patches per frame.
    pub patch: usize,
    pub heads: usize,
    pub visual_layers: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Maximum frames T the encoder positional table supports.
    pub max_frames: usize,
    /// Maximum instruction token count (with framing).
    pub max_instruction_len: usize,
    /// Maximum output token count (with framing).
    pub max_output_len: usize,
    /// Start with an all-zero output head so a fresh model emits exactly
    /// uniform logits. Only useful for analytical checks: training a
    /// frozen-language model through a zero head goes nowhere.
    pub zero_output_head: bool,
}

impl Default for VlmConfig {
    fn default() -> Self {
        VlmConfig {
            vocab_size: DEFAULT_VOCAB_SIZE,
            width: 32,
            init_std: 0.15,
            patch: 4,
            heads: 2,
            visual_layers: 2,
            encoder_layers: 2,
            decoder_layers: 2,
            max_frames: 8,
            max_instruction_len: 64,
            max_output_len: 32,
            zero_output_head: false,
        }
    }
}

impl VlmConfig {
    /// Tiny configuration for exact numeric checks (gradient checking
    /// walks every parameter twice per element). Uses a smaller init_std
    /// than the training default: verification wants minimal curvature,
    /// not trainability through frozen towers.
    pub fn micro() -> Self {
        VlmConfig {
            vocab_size: 16,
            width: 8,
            init_std: 0.05,
            patch: 8,
            heads: 2,
            visual_layers: 1,
            encoder_layers: 1,
            decoder_layers: 1,
            max_frames: 2,
            max_instruction_len: 8,
            max_output_len: 8,
            zero_output_head: false,
        }
    }

    /// Patches per frame, N.
    pub fn tokens_per_frame(&self) -> usize {
        (CANVAS / self.patch) * (CANVAS / self.patch)
    }

    /// Flattened pixel values per patch (3 channels).
    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    /// Encoder positions: all visual tokens plus the instruction.
    pub fn max_context(&self) -> usize {
        self.max_frames * self.tokens_per_frame() + self.max_instruction_len
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::Config(what));
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            ));
        }
        if self.patch == 0 || CANVAS % self.patch != 0 {
            return bad(format!("patch {} must divide the canvas {CANVAS}", self.patch));
        }
        if self.vocab_size < 4 {
            return bad(format!("vocab_size {} must cover the specials", self.vocab_size));
        }
        if !(self.init_std > 0.0 && self.init_std <= 1.0) {
            return bad(format!("init_std {} must lie in (0, 1]", self.init_std));
        }
        if self.visual_layers == 0 || self.encoder_layers == 0 || self.decoder_layers == 0 {
            return bad("all three stacks need at least one layer".into());
        }
        if self.max_frames == 0 || self.max_instruction_len < 2 || self.max_output_len < 2 {
            return bad("context limits too small".into());
        }
        Ok(())
    }
}

/// The model: a config plus its named, grouped parameters.
#[derive(Debug, Clone)]
pub struct VlmModel {
    pub config: VlmConfig,
    pub params: ParamSet,
}

impl VlmModel {
    /// Initialize all weights N(0, init_std²), biases zero, layer-norm
    /// gains one — deterministically from the seed.
    pub fn new(config: VlmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from(seed);
        let mut ps = ParamSet::new();
        let c = config.width;
        let std = config.init_std;

        // Visual tower F_V.
        add_linear(&mut ps, &mut rng, std, "fv.patch_proj", VISUAL_GROUP, config.patch_dim(), c)?;
        add_table(&mut ps, &mut rng, std, "fv.pos", VISUAL_GROUP, config.tokens_per_frame(), c)?;
        for l in 0..config.visual_layers {
            add_encoder_layer(&mut ps, &mut rng, std, &format!("fv.l{l}"), VISUAL_GROUP, c)?;
        }
        add_layer_norm(&mut ps, "fv.ln_f", VISUAL_GROUP, c)?;

        // Language model F_L: encoder over [x'; y], causal decoder over z.
        add_table(&mut ps, &mut rng, std, "fl.enc.pos", LANGUAGE_GROUP, config.max_context(), c)?;
        for l in 0..config.encoder_layers {
            add_encoder_layer(&mut ps, &mut rng, std, &format!("fl.enc.l{l}"), LANGUAGE_GROUP, c)?;
        }
        add_layer_norm(&mut ps, "fl.enc.ln_f", LANGUAGE_GROUP, c)?;

        add_table(&mut ps, &mut rng, std, "fl.tok_emb", LANGUAGE_GROUP, config.vocab_size, c)?;
        add_table(&mut ps, &mut rng, std, "fl.dec.pos", LANGUAGE_GROUP, config.max_output_len, c)?;
        for l in 0..config.decoder_layers {
            let prefix = format!("fl.dec.l{l}");
            add_attention(&mut ps, &mut rng, std, &format!("{prefix}.self"), LANGUAGE_GROUP, c)?;
            add_layer_norm(&mut ps, &format!("{prefix}.ln1"), LANGUAGE_GROUP, c)?;
            add_attention(&mut ps, &mut rng, std, &format!("{prefix}.cross"), LANGUAGE_GROUP, c)?;
            add_layer_norm(&mut ps, &format!("{prefix}.lnc"), LANGUAGE_GROUP, c)?;
            add_ffn(&mut ps, &mut rng, std, &prefix, LANGUAGE_GROUP, c)?;
            add_layer_norm(&mut ps, &format!("{prefix}.ln2"), LANGUAGE_GROUP, c)?;
        }
        add_layer_norm(&mut ps, "fl.dec.ln_f", LANGUAGE_GROUP, c)?;
        if config.zero_output_head {
            ps.insert("fl.head.w", LANGUAGE_GROUP, Tensor::zeros(vec![c, config.vocab_size]))?;
        } else {
            ps.insert(
                "fl.head.w",
                LANGUAGE_GROUP,
                Tensor::randn(vec![c, config.vocab_size], std, &mut rng),
            )?;
        }
        ps.insert("fl.head.b", LANGUAGE_GROUP, Tensor::zeros(vec![1, config.vocab_size]))?;

        Ok(VlmModel { config, params: ps })
    }

    /// Write the parameter table to `path` and the config to a JSON
    /// sidecar next to it. Weights are rounded to `f32` on disk.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::checkpoint::save_param_table(path, &self.params)?;
        crate::checkpoint::save_sidecar(path, &self.config)
    }

    /// Rebuild a model from [`VlmModel::save`] output. The stored table
    /// must cover exactly the parameters implied by the sidecar config.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let config: VlmConfig = crate::checkpoint::load_sidecar(path)?;
        let mut model = VlmModel::new(config, 0)?;
        let records = crate::checkpoint::load_param_table(path)?;
        crate::checkpoint::restore_params(&mut model.params, &records)?;
        Ok(model)
    }
}

pub(crate) fn add_linear(
    ps: &mut ParamSet,
    rng: &mut impl Rng,
    std: f64,
    prefix: &str,
    group: &str,
    input: usize,
    output: usize,
) -> Result<()> {
    ps.insert(
        &format!("{prefix}.w"),
        group,
        Tensor::randn(vec![input, output], std, rng),
    )?;
    ps.insert(&format!("{prefix}.b"), group, Tensor::zeros(vec![1, output]))?;
    Ok(())
}

pub(crate) fn add_table(
    ps: &mut ParamSet,
    rng: &mut impl Rng,
    std: f64,
    name: &str,
    group: &str,
    rows: usize,
    cols: usize,
) -> Result<()> {
    ps.insert(name, group, Tensor::randn(vec![rows, cols], std, rng))?;
    Ok(())
}

pub(crate) fn add_layer_norm(
    ps: &mut ParamSet,
    name: &str,
    group: &str,
    dim: usize,
) -> Result<()> {
    ps.insert(&format!("{name}.g"), group, Tensor::full(vec![1, dim], 1.0))?;
    ps.insert(&format!("{name}.b"), group, Tensor::zeros(vec![1, dim]))?;
    Ok(())
}

pub(crate) fn add_attention(
    ps: &mut ParamSet,
    rng: &mut impl Rng,
    std: f64,
    prefix: &str,
    group: &str,
    width: usize,
) -> Result<()> {
    for proj in ["wq", "wk", "wv", "wo"] {
        add_linear(ps, rng, std, &format!("{prefix}.{proj}"), group, width, width)?;
    }
    Ok(())
}

pub(crate) fn add_ffn(
    ps: &mut ParamSet,
    rng: &mut impl Rng,
    std: f64,
    prefix: &str,
    group: &str,
    width: usize,
) -> Result<()> {
    add_linear(ps, rng, std, &format!("{prefix}.ffn1"), group, width, FFN_MULT * width)?;
    add_linear(ps, rng, std, &format!("{prefix}.ffn2"), group, FFN_MULT * width, width)?;
    Ok(())
}

/// One encoder layer: self-attention and feed-forward, each pre-normed.
pub(crate) fn add_encoder_layer(
    ps: &mut ParamSet,
    rng: &mut impl Rng,
    std: f64,
    prefix: &str,
    group: &str,
    width: usize,
) -> Result<()> {
    add_attention(ps, rng, std, &format!("{prefix}.self"), group, width)?;
    add_layer_norm(ps, &format!("{prefix}.ln1"), group, width)?;
    add_ffn(ps, rng, std, prefix, group, width)?;
    add_layer_norm(ps, &format!("{prefix}.ln2"), group, width)?;
    Ok(())
}
