//! Contrastive video-text dual encoder: a spatio-temporal video tower
//! `G_V` and a causal text tower `G_T`, each followed by a linear
//! projection (`h_V`, `h_T`) into a shared embedding space where cosine
//! similarity is trained with a symmetric InfoNCE loss.
//!
//! The video tower patch-embeds all `T·N` tokens of a clip and runs
//! *joint* space-time attention: every token attends to every token
//! across both frames and patches. Positions are encoded as the sum of a
//! temporal table `PE_t[T×D]` and a spatial table `PE_s[N×D]`,
//! broadcast as `PE[i,j,:] = PE_t[i,:] + PE_s[j,:]`; the sum is rebuilt
//! from the two tables on every forward pass and never stored fused, so
//! the broadcast identity survives every optimizer step by construction.
//!
//! The dual encoder shares no parameters with the captioning model: it
//! owns a disjoint `ParamSet` whose names (`gv.*`, `hv.*`, `gt.*`,
//! `ht.*`, `log_temp`) never collide with the captioner's `fv.*`/`fl.*`.

mod forward;
mod train;

pub use forward::{embed_text, embed_texts, embed_video, embed_videos, info_nce};
pub use train::{
    choose_caption_index, train_dual, DualClip, DualOptimizer, DualTrainConfig, DualTrainReport,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::rng_from;
use crate::tensor::{ParamSet, Tensor};
use crate::tokenizer::DEFAULT_VOCAB_SIZE;
use crate::vlm::{add_attention, add_ffn, add_layer_norm, add_linear, add_table};
use crate::world::CANVAS;

/// Parameter groups of the dual encoder.
pub const VIDEO_GROUP: &str = "video";
pub const TEXT_GROUP: &str = "text";
pub const TEMPERATURE_GROUP: &str = "temperature";

/// The temporal position table is always drawn from N(0, 0.02²), matching
/// the convention for freshly added position embeddings, independent of
/// the width-matrix `init_std`.
pub const PE_T_STD: f64 = 0.02;

/// Hyperparameters of [`DualEncoder`]. Defaults are the pipeline values;
/// [`DualConfig::micro`] exists for exact numeric checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DualConfig {
    pub vocab_size: usize,
    /// Token width D inside both towers.
    pub width: usize,
    /// Shared embedding dimension D_e that `h_V`/`h_T` project into.
    pub embed_dim: usize,
    /// Weight-initialization standard deviation for all matrices except
    /// the temporal position table (see [`PE_T_STD`]).
    pub init_std: f64,
    /// Exact number of frames T every video input must have.
    pub frames: usize,
    /// Patch edge in pixels; `CANVAS/patch` squared patches per frame.
    pub patch: usize,
    pub heads: usize,
    pub video_layers: usize,
    pub text_layers: usize,
    /// Hard cap on text length in tokens (framing included).
    pub max_text_len: usize,
    /// Initial value of the trained log-temperature; the contrastive
    /// logits are `cos/τ` with `τ = exp(log_temp)`.
    pub log_temp_init: f64,
}

impl Default for DualConfig {
    fn default() -> Self {
        DualConfig {
            vocab_size: DEFAULT_VOCAB_SIZE,
            width: 32,
            embed_dim: 16,
            init_std: 0.15,
            frames: 4,
            patch: 4,
            heads: 2,
            video_layers: 2,
            text_layers: 2,
            max_text_len: 77,
            log_temp_init: (1.0 / 0.07f64).ln(),
        }
    }
}

impl DualConfig {
    /// Tiny configuration for exact numeric checks. A unit starting
    /// temperature keeps contrastive gradients large — the production
    /// temperature divides every gradient by 1/0.07, which would drown
    /// finite differences in truncation error. The initial weight scale
    /// is picked so embedded token rows (token table plus positional
    /// table) clear the layer-norm variance floor: rows parked at the
    /// floor feel the floor's own curvature instead of the gradient
    /// under test.
    pub fn micro() -> Self {
        DualConfig {
            vocab_size: 16,
            width: 8,
            embed_dim: 4,
            init_std: 0.2,
            frames: 2,
            patch: 8,
            heads: 2,
            video_layers: 1,
            text_layers: 1,
            max_text_len: 8,
            log_temp_init: 0.0,
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
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive".into());
        }
        if self.frames == 0 {
            return bad("frames must be positive".into());
        }
        if self.video_layers == 0 || self.text_layers == 0 {
            return bad("both towers need at least one layer".into());
        }
        if self.max_text_len < 2 {
            return bad("max_text_len must fit <s> and </s>".into());
        }
        if !self.log_temp_init.is_finite() {
            return bad(format!("log_temp_init {} must be finite", self.log_temp_init));
        }
        Ok(())
    }
}

/// The dual encoder: a config plus its named, grouped parameters.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub config: DualConfig,
    pub params: ParamSet,
}

impl DualEncoder {
    /// Initialize all weights N(0, init_std²) — except the temporal
    /// position table, drawn N(0, 0.02²) — deterministically from the
    /// seed. Biases start at zero, layer-norm gains at one, and the
    /// log-temperature at `config.log_temp_init`.
    pub fn new(config: DualConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from(seed);
        let mut ps = ParamSet::new();
        let d = config.width;
        let std = config.init_std;

        // Video tower G_V with joint space-time attention.
        add_linear(&mut ps, &mut rng, std, "gv.patch_proj", VIDEO_GROUP, config.patch_dim(), d)?;
        ps.insert(
            "gv.pe_t",
            VIDEO_GROUP,
            Tensor::randn(vec![config.frames, d], PE_T_STD, &mut rng),
        )?;
        ps.insert(
            "gv.pe_s",
            VIDEO_GROUP,
            Tensor::randn(vec![config.tokens_per_frame(), d], std, &mut rng),
        )?;
        for l in 0..config.video_layers {
            add_dual_layer(&mut ps, &mut rng, std, &format!("gv.l{l}"), VIDEO_GROUP, d)?;
        }
        add_layer_norm(&mut ps, "gv.ln_f", VIDEO_GROUP, d)?;
        // The projections feed straight into L2 normalization, whose
        // conditioning degrades as the pre-normalization norm shrinks;
        // 1/√width keeps that feature at unit scale for any width.
        let proj_std = 1.0 / (d as f64).sqrt();
        add_linear(&mut ps, &mut rng, proj_std, "hv", VIDEO_GROUP, d, config.embed_dim)?;

        // Text tower G_T: decoder-only (causally masked) transformer.
        add_table(&mut ps, &mut rng, std, "gt.tok_emb", TEXT_GROUP, config.vocab_size, d)?;
        add_table(&mut ps, &mut rng, std, "gt.pos", TEXT_GROUP, config.max_text_len, d)?;
        for l in 0..config.text_layers {
            add_dual_layer(&mut ps, &mut rng, std, &format!("gt.l{l}"), TEXT_GROUP, d)?;
        }
        add_layer_norm(&mut ps, "gt.ln_f", TEXT_GROUP, d)?;
        add_linear(&mut ps, &mut rng, proj_std, "ht", TEXT_GROUP, d, config.embed_dim)?;

        ps.insert(
            "log_temp",
            TEMPERATURE_GROUP,
            Tensor::full(vec![1, 1], config.log_temp_init),
        )?;

        Ok(DualEncoder { config, params: ps })
    }

    /// Contrastive temperature `τ = exp(log_temp)`; positive for every
    /// finite parameter value by construction.
    pub fn temperature(&self) -> f64 {
        self.params
            .by_name("log_temp")
            .expect("log_temp always exists")
            .tensor
            .data[0]
            .exp()
    }

    /// The full `[T·N, D]` position encoding, re-derived from the
    /// temporal and spatial tables (their broadcast sum is never stored).
    /// Row `i·N + j` equals `PE_t[i] + PE_s[j]`.
    pub fn positional_encoding(&self) -> Result<Tensor> {
        let pe_t = &self.params.by_name("gv.pe_t")?.tensor;
        let pe_s = &self.params.by_name("gv.pe_s")?.tensor;
        let pe = build_pe(pe_t, pe_s)?;
        let (t, n, d) = (pe.shape[0], pe.shape[1], pe.shape[2]);
        Tensor::new(vec![t * n, d], pe.data)
    }

    /// Write the parameter table to `path` and the config to a JSON
    /// sidecar next to it. Weights are rounded to `f32` on disk.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::checkpoint::save_param_table(path, &self.params)?;
        crate::checkpoint::save_sidecar(path, &self.config)
    }

    /// Rebuild a dual encoder from [`DualEncoder::save`] output.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let config: DualConfig = crate::checkpoint::load_sidecar(path)?;
        let mut model = DualEncoder::new(config, 0)?;
        let records = crate::checkpoint::load_param_table(path)?;
        crate::checkpoint::restore_params(&mut model.params, &records)?;
        Ok(model)
    }
}

/// One pre-norm layer of either tower: self-attention plus feed-forward.
fn add_dual_layer(
    ps: &mut ParamSet,
    rng: &mut impl rand::Rng,
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

/// Broadcast-sum the temporal table `PE_t[T×D]` and spatial table
/// `PE_s[N×D]` into the combined `PE[T×N×D]` with
/// `PE[i,j,:] = PE_t[i,:] + PE_s[j,:]`.
pub fn build_pe(pe_t: &Tensor, pe_s: &Tensor) -> Result<Tensor> {
    if pe_t.shape.len() != 2 || pe_s.shape.len() != 2 || pe_t.shape[1] != pe_s.shape[1] {
        return Err(Error::ShapeMismatch {
            op: "build_pe",
            lhs: pe_t.shape.clone(),
            rhs: pe_s.shape.clone(),
        });
    }
    let (t, n, d) = (pe_t.shape[0], pe_s.shape[0], pe_t.shape[1]);
    let mut data = Vec::with_capacity(t * n * d);
    for i in 0..t {
        for j in 0..n {
            for k in 0..d {
                data.push(pe_t.data[i * d + k] + pe_s.data[j * d + k]);
            }
        }
    }
    Tensor::new(vec![t, n, d], data)
}
