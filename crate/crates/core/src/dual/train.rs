//! Contrastive training of the dual encoder on captioned clips.
//!
//! Every epoch re-chooses one caption per clip uniformly (seeded per
//! epoch and clip, so the draw is independent of iteration order),
//! shuffles the clip order, and takes one optimizer step per minibatch.
//! Training is single-threaded and fully deterministic in the seed.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{derive_seed, derive_seed_str, rng_from};
use crate::tensor::{Graph, LrSchedule, Optimizer, OptimizerKind};
use crate::tokenizer::{TokenRole, TokenSequence, Vocabulary};
use crate::world::Frame;

use super::DualEncoder;

/// Update rule for [`train_dual`]. AdamW is the default; SGD with
/// momentum is kept selectable for ablation-style comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DualOptimizer {
    Adamw,
    Sgd,
}

/// Trainer hyperparameters; independent of the model architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DualTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Decoupled weight decay (AdamW only).
    pub weight_decay: f64,
    /// Momentum coefficient (SGD only).
    pub momentum: f64,
    /// Fraction of total steps spent in linear warmup before the cosine
    /// decay to zero.
    pub warmup_fraction: f64,
    pub optimizer: DualOptimizer,
    pub seed: u64,
}

impl Default for DualTrainConfig {
    fn default() -> Self {
        DualTrainConfig {
            epochs: 20,
            batch_size: 64,
            learning_rate: 3e-3,
            weight_decay: 0.01,
            momentum: 0.9,
            warmup_fraction: 0.1,
            optimizer: DualOptimizer::Adamw,
            seed: 0,
        }
    }
}

impl DualTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::Config(what));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size < 2 {
            return bad(format!(
                "batch_size {} is too small for a contrastive batch",
                self.batch_size
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad(format!(
                "warmup_fraction {} must lie in [0, 1]",
                self.warmup_fraction
            ));
        }
        Ok(())
    }
}

/// One training item: a clip's sampled frames plus every caption of the
/// requested source attached to it.
#[derive(Debug, Clone, PartialEq)]
pub struct DualClip {
    pub clip_id: String,
    pub frames: Vec<Frame>,
    pub captions: Vec<String>,
}

/// Loss curve and bookkeeping from one [`train_dual`] run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualTrainReport {
    /// Per-epoch mean contrastive loss, weighted by batch size.
    pub epoch_mean_losses: Vec<f64>,
    /// Optimizer steps applied.
    pub steps: usize,
    /// `exp(log_temp)` after training.
    pub final_temperature: f64,
}

/// Uniform seeded caption choice for one clip in one epoch. Keyed by the
/// clip id rather than its position, so dataset reordering cannot change
/// which caption a clip trains on.
pub fn choose_caption_index(seed: u64, epoch: u64, clip_id: &str, count: usize) -> usize {
    debug_assert!(count > 0, "caption choice needs a non-empty pool");
    let epoch_seed = derive_seed(seed, "dual/caption-choice", epoch);
    let clip_seed = derive_seed_str(epoch_seed, "dual/caption-choice", clip_id);
    rng_from(clip_seed).random_range(0..count)
}

/// Train the dual encoder in place with symmetric InfoNCE.
///
/// Each epoch draws one caption per clip (uniform, seeded), shuffles the
/// clip order, and steps once per minibatch. Trailing chunks with fewer
/// than two clips are skipped — a single pair has no negatives. Returns
/// the per-epoch mean loss curve.
pub fn train_dual(
    model: &mut DualEncoder,
    vocab: &Vocabulary,
    clips: &[DualClip],
    config: &DualTrainConfig,
) -> Result<DualTrainReport> {
    config.validate()?;
    if clips.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "contrastive training needs at least two clips, got {}",
            clips.len()
        )));
    }
    for clip in clips {
        if clip.captions.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "clip {} has no captions of the requested source",
                clip.clip_id
            )));
        }
    }

    // Tokenize every caption once; `encode` truncates to the cap.
    let encoded: Vec<Vec<TokenSequence>> = clips
        .iter()
        .map(|clip| {
            clip.captions
                .iter()
                .map(|text| vocab.encode(text, model.config.max_text_len, TokenRole::Caption))
                .collect()
        })
        .collect::<Result<_>>()?;

    let steps_per_epoch = contrastive_steps(clips.len(), config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let warmup = ((total_steps as f64) * config.warmup_fraction).round() as usize;
    let kind = match config.optimizer {
        DualOptimizer::Adamw => OptimizerKind::adamw(config.weight_decay),
        DualOptimizer::Sgd => OptimizerKind::Sgd {
            momentum: config.momentum,
        },
    };
    let mut optimizer = Optimizer::new(
        kind,
        LrSchedule::warmup_cosine(config.learning_rate, warmup, total_steps),
    )?;

    let mut epoch_mean_losses = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..clips.len()).collect();
    for epoch in 0..config.epochs {
        let chosen: Vec<usize> = clips
            .iter()
            .map(|clip| {
                choose_caption_index(config.seed, epoch as u64, &clip.clip_id, clip.captions.len())
            })
            .collect();
        let mut rng = rng_from(derive_seed(config.seed, "dual/epoch-order", epoch as u64));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut examples = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let items: Vec<(&[Frame], &TokenSequence)> = chunk
                .iter()
                .map(|&i| (&clips[i].frames[..], &encoded[i][chosen[i]]))
                .collect();
            let mut g = Graph::new();
            let loss = model.build_batch_loss(&mut g, &items)?;
            let value = g.value(loss);
            g.backward(loss)?;
            model.params.zero_grads();
            g.accumulate_param_grads(&mut model.params);
            optimizer.step(&mut model.params)?;
            model.params.zero_grads();
            loss_sum += value * chunk.len() as f64;
            examples += chunk.len();
        }
        epoch_mean_losses.push(loss_sum / examples as f64);
    }

    Ok(DualTrainReport {
        epoch_mean_losses,
        steps: optimizer.step_count(),
        final_temperature: model.temperature(),
    })
}

/// Minibatches per epoch, excluding a trailing single-clip chunk.
fn contrastive_steps(clip_count: usize, batch_size: usize) -> usize {
    let full = clip_count / batch_size;
    let remainder = clip_count % batch_size;
    full + usize::from(remainder >= 2)
}
