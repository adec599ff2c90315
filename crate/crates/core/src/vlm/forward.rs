//! Forward passes of the vision-language model: frame encoding,
//! teacher-forced captioning loss, and the graph builders the trainers
//! drive gradients through.

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};
use crate::tokenizer::{TokenSequence, BOS_ID, EOS_ID};
use crate::vlm::{causal_mask, decoder_layer, encoder_layer, final_layer_norm, param, VlmModel};
use crate::world::{Frame, CANVAS};

/// Frame tokens produced by the visual tower: `frames · per_frame` rows
/// of `width` features, frame blocks stacked in order.
#[derive(Debug, Clone)]
pub struct VisualTokens {
    pub tokens: Tensor,
    pub frames: usize,
    pub per_frame: usize,
}

impl VlmModel {
    /// Visual tower over a clip: per-frame patchify → project → add
    /// spatial positions → transformer → final norm, then stack the
    /// per-frame token blocks by rows. No attention crosses frames.
    pub fn build_visual(&self, g: &mut Graph, frames: &[Frame]) -> Result<NodeId> {
        if frames.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot encode a clip with zero frames".into(),
            ));
        }
        if frames.len() > self.config.max_frames {
            return Err(Error::InvalidArgument(format!(
                "{} frames exceed the visual position table ({})",
                frames.len(),
                self.config.max_frames
            )));
        }
        let expected = 3 * CANVAS * CANVAS;
        let ps = &self.params;
        let mut blocks = Vec::with_capacity(frames.len());
        for frame in frames {
            if frame.len() != expected {
                return Err(Error::InvalidArgument(format!(
                    "frame has {} values, expected {expected}",
                    frame.len()
                )));
            }
            let patches = g.constant(patchify(frame, self.config.patch));
            let mut x = {
                let w = param(g, ps, "fv.patch_proj.w")?;
                let b = param(g, ps, "fv.patch_proj.b")?;
                let xw = g.matmul(patches, w)?;
                g.add_row(xw, b)?
            };
            let pos = param(g, ps, "fv.pos")?;
            x = g.add(x, pos)?;
            for l in 0..self.config.visual_layers {
                x = encoder_layer(g, ps, x, &format!("fv.l{l}"), self.config.heads, None)?;
            }
            blocks.push(final_layer_norm(g, ps, x, "fv.ln_f")?);
        }
        if blocks.len() == 1 {
            return Ok(blocks[0]);
        }
        g.concat_rows(&blocks)
    }

    /// Language-model encoder over the concatenation of visual tokens
    /// and the embedded instruction, with one learned position per row.
    pub fn build_encoder(&self, g: &mut Graph, visual: NodeId, y: &[u32]) -> Result<NodeId> {
        self.validate_instruction(y)?;
        let ps = &self.params;
        let emb_table = param(g, ps, "fl.tok_emb")?;
        let y_ids: Vec<usize> = y.iter().map(|&t| t as usize).collect();
        let y_emb = g.embed(emb_table, &y_ids)?;
        let mut x = g.concat_rows(&[visual, y_emb])?;
        let rows = g.shape(x)[0];
        if rows > self.config.max_context() {
            return Err(Error::InvalidArgument(format!(
                "context of {rows} rows exceeds the position table ({})",
                self.config.max_context()
            )));
        }
        let pos_table = param(g, ps, "fl.enc.pos")?;
        let pos = g.slice_rows(pos_table, 0, rows)?;
        x = g.add(x, pos)?;
        for l in 0..self.config.encoder_layers {
            x = encoder_layer(g, ps, x, &format!("fl.enc.l{l}"), self.config.heads, None)?;
        }
        final_layer_norm(g, ps, x, "fl.enc.ln_f")
    }

    /// Causal decoder producing one logit row per input position.
    /// `z_in` is the shifted output sequence (starts with `<s>`).
    pub fn build_decoder_logits(
        &self,
        g: &mut Graph,
        encoded: NodeId,
        z_in: &[u32],
    ) -> Result<NodeId> {
        if z_in.is_empty() {
            return Err(Error::InvalidArgument("decoder needs at least one input".into()));
        }
        if z_in.len() > self.config.max_output_len {
            return Err(Error::InvalidArgument(format!(
                "output of {} tokens exceeds the position table ({})",
                z_in.len(),
                self.config.max_output_len
            )));
        }
        self.validate_ids(z_in)?;
        let ps = &self.params;
        let emb_table = param(g, ps, "fl.tok_emb")?;
        let ids: Vec<usize> = z_in.iter().map(|&t| t as usize).collect();
        let mut x = g.embed(emb_table, &ids)?;
        let pos_table = param(g, ps, "fl.dec.pos")?;
        let pos = g.slice_rows(pos_table, 0, z_in.len())?;
        x = g.add(x, pos)?;
        let mask = g.constant(causal_mask(z_in.len()));
        for l in 0..self.config.decoder_layers {
            x = decoder_layer(
                g,
                ps,
                x,
                encoded,
                &format!("fl.dec.l{l}"),
                self.config.heads,
                mask,
            )?;
        }
        let x = final_layer_norm(g, ps, x, "fl.dec.ln_f")?;
        let w = param(g, ps, "fl.head.w")?;
        let b = param(g, ps, "fl.head.b")?;
        let logits = g.matmul(x, w)?;
        g.add_row(logits, b)
    }

    /// Captioning loss: the sum over output positions of the negative
    /// log-likelihood of the framed output `z` given visual tokens and
    /// the instruction. Position zero conditions on `<s>`.
    pub fn build_caption_loss(
        &self,
        g: &mut Graph,
        visual: NodeId,
        y: &[u32],
        z: &[u32],
    ) -> Result<NodeId> {
        self.validate_output(z)?;
        let encoded = self.build_encoder(g, visual, y)?;
        let logits = self.build_decoder_logits(g, encoded, &z[..z.len() - 1])?;
        let targets: Vec<usize> = z[1..].iter().map(|&t| t as usize).collect();
        g.cross_entropy_sum(logits, &targets)
    }

    /// Convenience: loss straight from raw frames, differentiable
    /// through both towers.
    pub fn build_example_loss(
        &self,
        g: &mut Graph,
        frames: &[Frame],
        y: &[u32],
        z: &[u32],
    ) -> Result<NodeId> {
        let visual = self.build_visual(g, frames)?;
        self.build_caption_loss(g, visual, y, z)
    }

    fn validate_ids(&self, ids: &[u32]) -> Result<()> {
        for &t in ids {
            if t as usize >= self.config.vocab_size {
                return Err(Error::IndexOutOfRange {
                    what: "token id",
                    index: t as usize,
                    size: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    fn validate_instruction(&self, y: &[u32]) -> Result<()> {
        if y.is_empty() {
            return Err(Error::InvalidArgument("instruction must be non-empty".into()));
        }
        if y.len() > self.config.max_instruction_len {
            return Err(Error::InvalidArgument(format!(
                "instruction of {} tokens exceeds the limit ({})",
                y.len(),
                self.config.max_instruction_len
            )));
        }
        self.validate_ids(y)
    }

    fn validate_output(&self, z: &[u32]) -> Result<()> {
        if z.len() < 2 {
            return Err(Error::InvalidArgument(
                "output sequence must contain start and end markers".into(),
            ));
        }
        if z[0] != BOS_ID {
            return Err(Error::InvalidArgument(
                "output sequence must start with the start-of-sequence token".into(),
            ));
        }
        if *z.last().expect("non-empty") != EOS_ID {
            return Err(Error::InvalidArgument(
                "output sequence must end with the end-of-sequence token".into(),
            ));
        }
        if z.len() > self.config.max_output_len {
            return Err(Error::InvalidArgument(format!(
                "output of {} tokens exceeds the position table ({})",
                z.len(),
                self.config.max_output_len
            )));
        }
        self.validate_ids(z)
    }
}

/// Run the visual tower and return the token values.
pub fn encode_frames(model: &VlmModel, frames: &[Frame]) -> Result<VisualTokens> {
    let mut g = Graph::new();
    let node = model.build_visual(&mut g, frames)?;
    Ok(VisualTokens {
        tokens: Tensor::new(g.shape(node).to_vec(), g.data(node).to_vec())?,
        frames: frames.len(),
        per_frame: model.config.tokens_per_frame(),
    })
}

/// Captioning loss on precomputed visual tokens (no gradients).
pub fn caption_loss(
    model: &VlmModel,
    x: &VisualTokens,
    y: &TokenSequence,
    z: &TokenSequence,
) -> Result<f64> {
    let mut g = Graph::new();
    let visual = validate_and_insert_tokens(model, &mut g, x)?;
    let loss = model.build_caption_loss(&mut g, visual, &y.ids, &z.ids)?;
    Ok(g.value(loss))
}

pub(crate) fn validate_and_insert_tokens(
    model: &VlmModel,
    g: &mut Graph,
    x: &VisualTokens,
) -> Result<NodeId> {
    let shape = &x.tokens.shape;
    if shape.len() != 2
        || shape[1] != model.config.width
        || shape[0] != x.frames * x.per_frame
        || x.per_frame != model.config.tokens_per_frame()
        || x.frames == 0
    {
        return Err(Error::InvalidArgument(format!(
            "visual tokens of shape {shape:?} ({} frames × {} tokens) do not fit the model",
            x.frames, x.per_frame
        )));
    }
    Ok(g.constant(x.tokens.clone()))
}

/// Split a channels-first frame into per-patch rows, channel-major
/// within each patch.
pub(crate) fn patchify(frame: &[f64], patch: usize) -> Tensor {
    let per_side = CANVAS / patch;
    let mut data = Vec::with_capacity(per_side * per_side * 3 * patch * patch);
    for py in 0..per_side {
        for px in 0..per_side {
            for c in 0..3 {
                for dy in 0..patch {
                    for dx in 0..patch {
                        let y = py * patch + dy;
                        let x = px * patch + dx;
                        data.push(frame[c * CANVAS * CANVAS + y * CANVAS + x]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![per_side * per_side, 3 * patch * patch], data).expect("patch shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from;
    use crate::tensor::{grad_check, LrSchedule, Optimizer, OptimizerKind};
    use crate::vlm::VlmConfig;
    use rand::Rng;

    fn random_frames(count: usize, seed: u64) -> Vec<Frame> {
        let mut rng = rng_from(seed);
        (0..count)
            .map(|_| (0..3 * CANVAS * CANVAS).map(|_| rng.random::<f64>()).collect())
            .collect()
    }

    fn micro_model(seed: u64) -> VlmModel {
        VlmModel::new(VlmConfig::micro(), seed).unwrap()
    }

    #[test]
    fn default_shapes_eight_frames() {
        let model = VlmModel::new(VlmConfig::default(), 0).unwrap();
        let frames = random_frames(8, 1);
        let x = encode_frames(&model, &frames).unwrap();
        assert_eq!(x.tokens.shape, vec![128, 32]);
        assert_eq!(x.frames, 8);
        assert_eq!(x.per_frame, 16);
    }

    #[test]
    fn zero_frames_is_an_error() {
        let model = micro_model(0);
        assert!(encode_frames(&model, &[]).is_err());
    }

    #[test]
    fn too_many_frames_is_an_error() {
        let model = micro_model(0);
        let frames = random_frames(3, 2); // micro allows 2
        assert!(encode_frames(&model, &frames).is_err());
    }

    #[test]
    fn swapping_frames_swaps_row_blocks_exactly() {
        let model = micro_model(3);
        let mut frames = random_frames(2, 4);
        let a = encode_frames(&model, &frames).unwrap();
        frames.swap(0, 1);
        let b = encode_frames(&model, &frames).unwrap();
        let n = model.config.tokens_per_frame() * model.config.width;
        assert_eq!(a.tokens.data[..n], b.tokens.data[n..2 * n]);
        assert_eq!(a.tokens.data[n..2 * n], b.tokens.data[..n]);
    }

    #[test]
    fn single_frame_encode_equals_batched_row_block() {
        let model = micro_model(5);
        let frames = random_frames(2, 6);
        let both = encode_frames(&model, &frames).unwrap();
        let n = model.config.tokens_per_frame() * model.config.width;
        for t in 0..2 {
            let alone = encode_frames(&model, &frames[t..t + 1]).unwrap();
            assert_eq!(alone.tokens.data, both.tokens.data[t * n..(t + 1) * n]);
        }
    }

    #[test]
    fn perturbing_one_frame_changes_only_its_block() {
        let model = micro_model(7);
        let mut frames = random_frames(2, 8);
        let a = encode_frames(&model, &frames).unwrap();
        frames[1][40] += 0.5;
        let b = encode_frames(&model, &frames).unwrap();
        let n = model.config.tokens_per_frame() * model.config.width;
        assert_eq!(a.tokens.data[..n], b.tokens.data[..n]);
        assert_ne!(a.tokens.data[n..2 * n], b.tokens.data[n..2 * n]);
    }

    #[test]
    fn fresh_zero_head_model_scores_uniformly() {
        // With a zeroed output head every logit is exactly zero, so the
        // loss over L output positions is L·ln(vocab) for any input.
        let mut cfg = VlmConfig::micro();
        cfg.zero_output_head = true;
        let model = VlmModel::new(cfg, 11).unwrap();
        let frames = random_frames(1, 12);
        let x = encode_frames(&model, &frames).unwrap();
        let y = TokenSequence::raw(vec![BOS_ID, 5, 6, EOS_ID]);
        let z = TokenSequence::raw(vec![BOS_ID, 7, 8, 9, EOS_ID]);
        let loss = caption_loss(&model, &x, &y, &z).unwrap();
        let expected = 4.0 * (model.config.vocab_size as f64).ln();
        assert!(
            (loss - expected).abs() < 1e-9,
            "loss {loss} vs uniform {expected}"
        );
    }

    #[test]
    fn loss_is_sum_of_per_position_cross_entropies() {
        let model = micro_model(13);
        let frames = random_frames(2, 14);
        let y = vec![BOS_ID, 4, EOS_ID];
        let z = vec![BOS_ID, 6, 10, 3, 12, EOS_ID];

        let mut g = Graph::new();
        let visual = model.build_visual(&mut g, &frames).unwrap();
        let loss = model.build_caption_loss(&mut g, visual, &y, &z).unwrap();
        let loss = g.value(loss);

        // Independent recomputation: take the raw logits and evaluate
        // each position's negative log-likelihood by hand.
        let mut g2 = Graph::new();
        let visual = model.build_visual(&mut g2, &frames).unwrap();
        let encoded = model.build_encoder(&mut g2, visual, &y).unwrap();
        let logits = model
            .build_decoder_logits(&mut g2, encoded, &z[..z.len() - 1])
            .unwrap();
        let values = g2.data(logits);
        let vocab = model.config.vocab_size;
        let mut by_hand = 0.0;
        for (pos, &target) in z[1..].iter().enumerate() {
            let row = &values[pos * vocab..(pos + 1) * vocab];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            by_hand += lse - row[target as usize];
        }
        assert!(
            (loss - by_hand).abs() < 1e-9,
            "loss {loss} vs decomposition {by_hand}"
        );
    }

    #[test]
    fn output_sequence_framing_is_enforced() {
        let model = micro_model(15);
        let frames = random_frames(1, 16);
        let x = encode_frames(&model, &frames).unwrap();
        let y = TokenSequence::raw(vec![BOS_ID, 4, EOS_ID]);
        // Missing end marker.
        let z = TokenSequence::raw(vec![BOS_ID, 6, 7]);
        assert!(caption_loss(&model, &x, &y, &z).is_err());
        // Missing start marker.
        let z = TokenSequence::raw(vec![6, 7, EOS_ID]);
        assert!(caption_loss(&model, &x, &y, &z).is_err());
        // Too short to contain anything.
        let z = TokenSequence::raw(vec![EOS_ID]);
        assert!(caption_loss(&model, &x, &y, &z).is_err());
        // Empty instruction.
        let z = TokenSequence::raw(vec![BOS_ID, 6, EOS_ID]);
        assert!(caption_loss(&model, &x, &TokenSequence::raw(vec![]), &z).is_err());
        // Token id beyond the vocabulary.
        let z = TokenSequence::raw(vec![BOS_ID, 99, EOS_ID]);
        assert!(caption_loss(&model, &x, &y, &z).is_err());
    }

    #[test]
    fn caption_loss_rejects_mismatched_visual_tokens() {
        let model = micro_model(17);
        let other = VlmModel::new(VlmConfig::default(), 17).unwrap();
        let frames = random_frames(2, 18);
        let x = encode_frames(&other, &frames[..1]).unwrap();
        let y = TokenSequence::raw(vec![BOS_ID, 4, EOS_ID]);
        let z: TokenSequence = TokenSequence::raw(vec![BOS_ID, 6, EOS_ID]);
        assert!(caption_loss(&model, &x, &y, &z).is_err());
    }

    #[test]
    fn losses_are_deterministic() {
        let model = micro_model(19);
        let frames = random_frames(2, 20);
        let y = vec![BOS_ID, 4, 5, EOS_ID];
        let z = vec![BOS_ID, 6, 10, EOS_ID];
        let run = || {
            let mut g = Graph::new();
            let loss = model.build_example_loss(&mut g, &frames, &y, &z).unwrap();
            g.value(loss)
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn model_memorizes_a_single_pair() {
        let mut model = micro_model(21);
        let frames = random_frames(1, 22);
        let y = vec![BOS_ID, 4, 5, EOS_ID];
        let z = vec![BOS_ID, 6, 10, 3, EOS_ID];
        let mut opt = Optimizer::new(
            OptimizerKind::adamw(0.0),
            LrSchedule::constant(1e-2),
        )
        .unwrap();
        let mut last = f64::INFINITY;
        for _ in 0..300 {
            let mut g = Graph::new();
            let loss = model.build_example_loss(&mut g, &frames, &y, &z).unwrap();
            last = g.value(loss);
            model.params.zero_grads();
            g.backward(loss).unwrap();
            g.accumulate_param_grads(&mut model.params);
            opt.step(&mut model.params).unwrap();
        }
        assert!(last < 0.01, "failed to memorize: final loss {last}");
    }

    #[test]
    fn full_model_gradients_match_central_differences() {
        let model = micro_model(23);
        let frames = random_frames(2, 24);
        let y = vec![BOS_ID, 4, EOS_ID];
        let z = vec![BOS_ID, 6, 10, EOS_ID];
        let mut params = model.params.clone();
        let config = model.config.clone();
        let worst = grad_check(&mut params, 1e-3, |ps, with_grad| {
            let probe = VlmModel { config: config.clone(), params: ps.clone() };
            let mut g = Graph::new();
            let loss = probe.build_example_loss(&mut g, &frames, &y, &z)?;
            let value = g.value(loss);
            if with_grad {
                g.backward(loss)?;
                g.accumulate_param_grads(ps);
            }
            Ok(value)
        })
        .unwrap();
        assert!(worst < 1e-4, "worst relative gradient error {worst}");
    }
}
