//! Two-stage adaptation of the captioning model and pseudo-caption
//! distillation.
//!
//! Stage 1 trains the visual tower against short ground-truth captions
//! under a fixed captioning instruction, with the language tower frozen;
//! stage 2 trains the language tower on instruction triplets with the
//! visual tower frozen. Freezing is bitwise: frozen parameters never
//! receive optimizer state, and their gradients are zeroed before every
//! step. Distillation samples several pseudo-captions per unlabeled clip
//! with nucleus decoding and per-clip derived seeds.
//!
//! Trainers are single-threaded and fully seeded; distillation fans out
//! across clips against a read-only model.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instruct::CAPTION_TASK_PROMPT;
use crate::seeding::{derive_seed, derive_seed_str, rng_from};
use crate::tensor::{Graph, LrSchedule, Optimizer, OptimizerKind};
use crate::tokenizer::{TokenRole, TokenSequence, Vocabulary};
use crate::vlm::{
    caption_loss, encode_frames, generate, DecodeMode, GenerateOptions, VisualTokens, VlmModel,
};
use crate::world::{CaptionRecord, CaptionSource, Frame};

/// Which parameter groups a training stage may update. Everything not
/// listed is frozen bitwise for the duration of the stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePlan {
    pub trainable: BTreeSet<String>,
    pub stage: String,
}

impl FreezePlan {
    pub fn new(trainable: impl IntoIterator<Item = impl Into<String>>, stage: &str) -> Self {
        FreezePlan {
            trainable: trainable.into_iter().map(Into::into).collect(),
            stage: stage.to_string(),
        }
    }

    /// Stage 1: visual tower trains, language tower frozen.
    pub fn visual_only() -> Self {
        FreezePlan::new([crate::vlm::VISUAL_GROUP], "visual-adapt")
    }

    /// Stage 2: language tower trains, visual tower frozen.
    pub fn language_only() -> Self {
        FreezePlan::new([crate::vlm::LANGUAGE_GROUP], "language-adapt")
    }
}

/// Freeze every parameter group outside `plan.trainable`.
///
/// Errors if the plan names a group the model does not have. A group that
/// exists but is absent from the plan is frozen — including all of them,
/// which yields a model no optimizer step can change.
pub fn apply_freeze(model: &mut VlmModel, plan: &FreezePlan) -> Result<()> {
    let groups = model.params.groups();
    for wanted in &plan.trainable {
        if !groups.iter().any(|g| g == wanted) {
            return Err(Error::InvalidArgument(format!(
                "freeze plan names unknown parameter group {wanted:?}; model has {groups:?}"
            )));
        }
    }
    for group in &groups {
        model
            .params
            .set_group_frozen(group, !plan.trainable.contains(group))?;
    }
    Ok(())
}

/// A clip with one caption, the unit of captioning-style training data.
#[derive(Debug, Clone)]
pub struct CaptionedClip {
    pub clip_id: String,
    pub frames: Vec<Frame>,
    pub caption: String,
}

/// A clip with an instruction and target output, the unit of stage-2 data.
#[derive(Debug, Clone)]
pub struct InstructionClip {
    pub clip_id: String,
    pub frames: Vec<Frame>,
    pub instruction: String,
    pub output: String,
}

/// A clip without any caption, awaiting distillation.
#[derive(Debug, Clone)]
pub struct UnlabeledClip {
    pub clip_id: String,
    pub frames: Vec<Frame>,
}

/// One mixed self-training batch: references into the labeled and
/// pseudo-captioned pools.
#[derive(Debug, Clone)]
pub struct TrainingBatch<'a> {
    pub labeled: Vec<&'a CaptionedClip>,
    pub unlabeled: Vec<&'a CaptionedClip>,
}

impl TrainingBatch<'_> {
    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn iter(&self) -> impl Iterator<Item = &CaptionedClip> {
        self.labeled.iter().chain(self.unlabeled.iter()).copied()
    }
}

/// Draw a batch of `batch_size` examples: `round(labeled_fraction ·
/// batch_size)` uniformly without replacement from `d_l`, the remainder
/// from `d_u`. Deterministic per seed.
pub fn mix_batch<'a>(
    d_l: &'a [CaptionedClip],
    d_u: &'a [CaptionedClip],
    batch_size: usize,
    labeled_fraction: f64,
    seed: u64,
) -> Result<TrainingBatch<'a>> {
    if !(0.0..=1.0).contains(&labeled_fraction) {
        return Err(Error::InvalidArgument(format!(
            "labeled_fraction must lie in [0, 1], got {labeled_fraction}"
        )));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let n_labeled = (labeled_fraction * batch_size as f64).round() as usize;
    let n_unlabeled = batch_size - n_labeled;
    if n_labeled > d_l.len() {
        return Err(Error::InvalidArgument(format!(
            "batch needs {n_labeled} labeled examples but the pool has {}",
            d_l.len()
        )));
    }
    if n_unlabeled > d_u.len() {
        return Err(Error::InvalidArgument(format!(
            "batch needs {n_unlabeled} pseudo-captioned examples but the pool has {}",
            d_u.len()
        )));
    }

    let mut rng = rng_from(seed);
    let labeled: Vec<&CaptionedClip> = rand::seq::index::sample(&mut rng, d_l.len(), n_labeled)
        .iter()
        .map(|i| &d_l[i])
        .collect();
    let unlabeled: Vec<&CaptionedClip> = rand::seq::index::sample(&mut rng, d_u.len(), n_unlabeled)
        .iter()
        .map(|i| &d_u[i])
        .collect();

    let ids: BTreeSet<&str> = labeled
        .iter()
        .chain(unlabeled.iter())
        .map(|c| c.clip_id.as_str())
        .collect();
    if ids.len() != labeled.len() + unlabeled.len() {
        return Err(Error::InvalidArgument(
            "batch parts must be disjoint by clip id; the labeled and pseudo pools overlap".into(),
        ));
    }
    Ok(TrainingBatch { labeled, unlabeled })
}

/// Hyperparameters shared by both adaptation stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Fraction of total steps spent on linear warmup.
    pub warmup_fraction: f64,
    /// Labeled share of each self-training batch; only consulted when a
    /// pseudo-caption pool is supplied.
    pub labeled_fraction: f64,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            epochs: 30,
            batch_size: 8,
            learning_rate: 3e-3,
            weight_decay: 0.01,
            warmup_fraction: 0.1,
            labeled_fraction: 0.5,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "adaptation needs at least one epoch and a positive batch size".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup fraction must lie in [0, 1], got {}",
                self.warmup_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.labeled_fraction) {
            return Err(Error::Config(format!(
                "labeled fraction must lie in [0, 1], got {}",
                self.labeled_fraction
            )));
        }
        Ok(())
    }
}

/// Loss curve of one adaptation stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub stage: String,
    /// Mean per-example loss over the stage's primary dataset, evaluated
    /// before the first optimizer step. Epoch means average losses taken
    /// mid-epoch while the weights move, so this is the curve's true
    /// starting point.
    pub initial_loss: f64,
    /// Mean per-example loss (sum over output positions) for each epoch.
    pub epoch_mean_losses: Vec<f64>,
    pub steps: usize,
}

/// A tokenized example ready for the loss graph.
struct PreparedExample {
    frames_index: usize,
    y: TokenSequence,
    z: TokenSequence,
}

fn make_optimizer(config: &AdaptConfig, total_steps: usize) -> Result<Optimizer> {
    let warmup = ((total_steps as f64) * config.warmup_fraction).round() as usize;
    Optimizer::new(
        OptimizerKind::adamw(config.weight_decay),
        LrSchedule::warmup_cosine(config.learning_rate, warmup, total_steps),
    )
}

/// Stage 1: adapt the visual tower to video captioning.
///
/// Every example pairs a clip with the fixed instruction
/// `"Generate the alt-text:"` and its caption as the target. When
/// `pseudo` is non-empty, each step draws a self-training batch mixing
/// both pools at `config.labeled_fraction`; otherwise epochs sweep the
/// labeled set in seeded shuffled order. The language tower is frozen
/// bitwise throughout.
pub fn stage1_visual_adapt(
    model: &mut VlmModel,
    vocab: &Vocabulary,
    labeled: &[CaptionedClip],
    pseudo: &[CaptionedClip],
    config: &AdaptConfig,
) -> Result<AdaptReport> {
    config.validate()?;
    if labeled.is_empty() {
        return Err(Error::InvalidArgument(
            "stage-1 adaptation requires a non-empty labeled dataset".into(),
        ));
    }
    apply_freeze(model, &FreezePlan::visual_only())?;

    let y = vocab.encode(
        CAPTION_TASK_PROMPT,
        model.config.max_instruction_len,
        TokenRole::Instruction,
    )?;

    if pseudo.is_empty() {
        let prepared: Vec<PreparedExample> = labeled
            .iter()
            .enumerate()
            .map(|(i, clip)| {
                Ok(PreparedExample {
                    frames_index: i,
                    y: y.clone(),
                    z: vocab.encode(&clip.caption, model.config.max_output_len, TokenRole::Output)?,
                })
            })
            .collect::<Result<_>>()?;
        let frames: Vec<&[Frame]> = labeled.iter().map(|c| c.frames.as_slice()).collect();
        return train_epochs(model, &frames, &prepared, config, "visual-adapt");
    }

    // Self-training: per-step mixed batches instead of epoch sweeps.
    let steps_per_epoch = (labeled.len() + pseudo.len()).div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut optimizer = make_optimizer(config, total_steps)?;
    let mut epoch_mean_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0;
        let mut examples = 0usize;
        for step in 0..steps_per_epoch {
            let step_seed = derive_seed(
                config.seed,
                "adapt/self-train",
                (epoch * steps_per_epoch + step) as u64,
            );
            let batch = mix_batch(
                labeled,
                pseudo,
                config.batch_size,
                config.labeled_fraction,
                step_seed,
            )?;
            let items: Vec<(&[Frame], TokenSequence, TokenSequence)> = batch
                .iter()
                .map(|clip| {
                    Ok((
                        clip.frames.as_slice(),
                        y.clone(),
                        vocab.encode(
                            &clip.caption,
                            model.config.max_output_len,
                            TokenRole::Output,
                        )?,
                    ))
                })
                .collect::<Result<_>>()?;
            loss_sum += train_batch(model, &items, &mut optimizer)?;
            examples += items.len();
        }
        epoch_mean_losses.push(loss_sum / examples as f64);
    }
    Ok(AdaptReport {
        stage: "visual-adapt".into(),
        epoch_mean_losses,
        steps: optimizer.step_count(),
    })
}

/// Stage 2: adapt the language tower to instruction following.
///
/// Instructions must be non-empty. The visual tower is frozen bitwise, so
/// each clip's visual tokens are computed once up front and reused across
/// epochs.
pub fn stage2_language_adapt(
    model: &mut VlmModel,
    vocab: &Vocabulary,
    dataset: &[InstructionClip],
    config: &AdaptConfig,
) -> Result<AdaptReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument(
            "stage-2 adaptation requires a non-empty instruction dataset".into(),
        ));
    }
    for example in dataset {
        if example.instruction.trim().is_empty() {
            return Err(Error::InvalidArgument(format!(
                "clip {} has an empty instruction; stage 2 requires one",
                example.clip_id
            )));
        }
    }
    apply_freeze(model, &FreezePlan::language_only())?;

    let prepared: Vec<PreparedExample> = dataset
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            Ok(PreparedExample {
                frames_index: i,
                y: vocab.encode(
                    &ex.instruction,
                    model.config.max_instruction_len,
                    TokenRole::Instruction,
                )?,
                z: vocab.encode(&ex.output, model.config.max_output_len, TokenRole::Output)?,
            })
        })
        .collect::<Result<_>>()?;

    // The frozen visual tower makes x' a constant per clip.
    let visual: Vec<crate::vlm::VisualTokens> = dataset
        .iter()
        .map(|ex| encode_frames(model, &ex.frames))
        .collect::<Result<_>>()?;

    let steps_per_epoch = prepared.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut optimizer = make_optimizer(config, total_steps)?;
    let mut epoch_mean_losses = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..prepared.len()).collect();

    for epoch in 0..config.epochs {
        let mut rng = rng_from(derive_seed(config.seed, "adapt/stage2-epoch", epoch as u64));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut g = Graph::new();
            let mut losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let ex = &prepared[i];
                let node =
                    crate::vlm::validate_and_insert_tokens(model, &mut g, &visual[ex.frames_index])?;
                losses.push(model.build_caption_loss(&mut g, node, &ex.y.ids, &ex.z.ids)?);
            }
            loss_sum += optimize_batch(model, &mut g, &losses, &mut optimizer)?;
        }
        epoch_mean_losses.push(loss_sum / prepared.len() as f64);
    }
    Ok(AdaptReport {
        stage: "language-adapt".into(),
        epoch_mean_losses,
        steps: optimizer.step_count(),
    })
}

/// Epoch sweeps over a fixed example list (no batch mixing).
fn train_epochs(
    model: &mut VlmModel,
    frames: &[&[Frame]],
    prepared: &[PreparedExample],
    config: &AdaptConfig,
    stage: &str,
) -> Result<AdaptReport> {
    let steps_per_epoch = prepared.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut optimizer = make_optimizer(config, total_steps)?;
    let mut epoch_mean_losses = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..prepared.len()).collect();

    for epoch in 0..config.epochs {
        let mut rng = rng_from(derive_seed(config.seed, "adapt/epoch", epoch as u64));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let items: Vec<(&[Frame], TokenSequence, TokenSequence)> = chunk
                .iter()
                .map(|&i| {
                    (
                        frames[prepared[i].frames_index],
                        prepared[i].y.clone(),
                        prepared[i].z.clone(),
                    )
                })
                .collect();
            loss_sum += train_batch(model, &items, &mut optimizer)?;
        }
        epoch_mean_losses.push(loss_sum / prepared.len() as f64);
    }
    Ok(AdaptReport {
        stage: stage.into(),
        epoch_mean_losses,
        steps: optimizer.step_count(),
    })
}

/// One optimizer step over a batch built straight from frames.
/// Returns the batch's summed per-example loss.
fn train_batch(
    model: &mut VlmModel,
    items: &[(&[Frame], TokenSequence, TokenSequence)],
    optimizer: &mut Optimizer,
) -> Result<f64> {
    let mut g = Graph::new();
    let mut losses = Vec::with_capacity(items.len());
    for (frames, y, z) in items {
        losses.push(model.build_example_loss(&mut g, frames, &y.ids, &z.ids)?);
    }
    optimize_batch(model, &mut g, &losses, optimizer)
}

/// Backpropagate the mean of `losses` and apply one optimizer step.
/// Returns the summed loss value.
fn optimize_batch(
    model: &mut VlmModel,
    g: &mut Graph,
    losses: &[crate::tensor::NodeId],
    optimizer: &mut Optimizer,
) -> Result<f64> {
    let total = g.add_n(losses)?;
    let mean = g.scale(total, 1.0 / losses.len() as f64);
    let value = g.value(total);
    g.backward(mean)?;
    model.params.zero_grads();
    g.accumulate_param_grads(&mut model.params);
    model.params.zero_frozen_grads();
    optimizer.step(&mut model.params)?;
    model.params.zero_grads();
    Ok(value)
}

/// Caption every unlabeled clip `k_samples` times with nucleus sampling.
///
/// Each clip's decode seed derives from `(seed, clip id)`, so the output
/// is a pure function of (model, clips, k, p, seed), independent of
/// traversal order or thread count. Records carry `source = pseudo` and
/// the sample index; text is stored after detokenization with special
/// tokens stripped.
pub fn distill_dataset(
    model: &VlmModel,
    vocab: &Vocabulary,
    clips: &[UnlabeledClip],
    k_samples: usize,
    p: f64,
    seed: u64,
) -> Result<Vec<CaptionRecord>> {
    if k_samples == 0 {
        return Err(Error::InvalidArgument(
            "distillation requires at least one sample per clip".into(),
        ));
    }
    let y = vocab.encode(
        CAPTION_TASK_PROMPT,
        model.config.max_instruction_len,
        TokenRole::Instruction,
    )?;

    let per_clip: Vec<Vec<CaptionRecord>> = clips
        .par_iter()
        .map(|clip| {
            let with_context = |e: Error| {
                Error::InvalidArgument(format!("clip {}: {e}", clip.clip_id))
            };
            let visual = encode_frames(model, &clip.frames).map_err(with_context)?;
            let options = GenerateOptions {
                mode: DecodeMode::Nucleus { p },
                samples: k_samples,
                max_len: model.config.max_output_len,
                seed: derive_seed_str(seed, "distill", &clip.clip_id),
            };
            let texts =
                generate(model, &visual, &y, vocab, &options).map_err(with_context)?;
            Ok(texts
                .into_iter()
                .enumerate()
                .map(|(i, text)| CaptionRecord {
                    clip_id: clip.clip_id.clone(),
                    text,
                    source: CaptionSource::Pseudo,
                    sample_index: Some(i as u32),
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_clip.into_iter().flatten().collect())
}
