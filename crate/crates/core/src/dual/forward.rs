//! Forward graphs of the dual encoder: video and text embeddings and the
//! symmetric InfoNCE loss, plus eager single-item and parallel batch
//! wrappers around them.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};
use crate::tokenizer::TokenSequence;
use crate::vlm::{causal_mask, encoder_layer, final_layer_norm, linear, param, patchify};
use crate::world::{frame_len, Frame};

use super::DualEncoder;

impl DualEncoder {
    /// Graph of the video tower: patch-embed every frame, add the
    /// re-derived position encoding, run joint space-time attention over
    /// all `T·N` tokens, mean-pool, project through `h_V`, and
    /// L2-normalize. Returns a `[1, D_e]` unit row.
    pub fn build_video_embedding(&self, g: &mut Graph, frames: &[Frame]) -> Result<NodeId> {
        let cfg = &self.config;
        if frames.len() != cfg.frames {
            return Err(Error::InvalidArgument(format!(
                "video input must have exactly {} frames, got {}",
                cfg.frames,
                frames.len()
            )));
        }
        for (i, frame) in frames.iter().enumerate() {
            if frame.len() != frame_len() {
                return Err(Error::InvalidArgument(format!(
                    "frame {i} has {} values, expected {}",
                    frame.len(),
                    frame_len()
                )));
            }
        }

        let blocks: Vec<NodeId> = frames
            .iter()
            .map(|frame| g.constant(patchify(frame, cfg.patch)))
            .collect();
        let tokens = if blocks.len() == 1 {
            blocks[0]
        } else {
            g.concat_rows(&blocks)?
        };
        let projected = linear(g, &self.params, tokens, "gv.patch_proj")?;
        let pe = self.build_pe_node(g)?;
        let mut x = g.add(projected, pe)?;
        for l in 0..cfg.video_layers {
            x = encoder_layer(g, &self.params, x, &format!("gv.l{l}"), cfg.heads, None)?;
        }
        let x = final_layer_norm(g, &self.params, x, "gv.ln_f")?;
        let pooled = g.mean_rows(x);
        let projected = linear(g, &self.params, pooled, "hv")?;
        g.l2_normalize_rows(projected)
    }

    /// Graph of the text tower: token + position embeddings, causally
    /// masked self-attention, the final token's state, `h_T`, and
    /// L2-normalization. Returns a `[1, D_e]` unit row.
    pub fn build_text_embedding(&self, g: &mut Graph, text: &TokenSequence) -> Result<NodeId> {
        let cfg = &self.config;
        let len = text.ids.len();
        if len == 0 {
            return Err(Error::InvalidArgument(
                "text embedding needs at least one token".into(),
            ));
        }
        if len > cfg.max_text_len {
            return Err(Error::InvalidArgument(format!(
                "text of {len} tokens exceeds the {}-token cap; truncate before embedding",
                cfg.max_text_len
            )));
        }
        let ids: Vec<usize> = text.ids.iter().map(|&i| i as usize).collect();

        let table = param(g, &self.params, "gt.tok_emb")?;
        let embedded = g.embed(table, &ids)?;
        let pos = param(g, &self.params, "gt.pos")?;
        let pos_rows = g.slice_rows(pos, 0, len)?;
        let mut x = g.add(embedded, pos_rows)?;
        let mask = g.constant(causal_mask(len));
        for l in 0..cfg.text_layers {
            x = encoder_layer(g, &self.params, x, &format!("gt.l{l}"), cfg.heads, Some(mask))?;
        }
        let x = final_layer_norm(g, &self.params, x, "gt.ln_f")?;
        let last = g.slice_rows(x, len - 1, 1)?;
        let projected = linear(g, &self.params, last, "ht")?;
        g.l2_normalize_rows(projected)
    }

    /// Symmetric InfoNCE over a batch of (video, caption) pairs with the
    /// trained temperature `τ = exp(log_temp)`. Returns the scalar loss
    /// node; gradients flow through both towers and the temperature.
    pub fn build_batch_loss(
        &self,
        g: &mut Graph,
        items: &[(&[Frame], &TokenSequence)],
    ) -> Result<NodeId> {
        if items.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "contrastive batch needs at least two pairs, got {}",
                items.len()
            )));
        }
        let mut u_rows = Vec::with_capacity(items.len());
        let mut v_rows = Vec::with_capacity(items.len());
        for (frames, text) in items {
            u_rows.push(self.build_video_embedding(g, frames)?);
            v_rows.push(self.build_text_embedding(g, text)?);
        }
        let u = g.concat_rows(&u_rows)?;
        let v = g.concat_rows(&v_rows)?;
        let log_temp = param(g, &self.params, "log_temp")?;
        let tau = g.exp(log_temp);
        info_nce_node(g, u, v, tau)
    }

    /// `[T·N, D]` position node rebuilt from the two tables by indexed
    /// lookup, so both receive gradients and no fused copy ever exists.
    fn build_pe_node(&self, g: &mut Graph) -> Result<NodeId> {
        let t = self.config.frames;
        let n = self.config.tokens_per_frame();
        let temporal_ids: Vec<usize> = (0..t).flat_map(|i| std::iter::repeat_n(i, n)).collect();
        let spatial_ids: Vec<usize> = (0..t).flat_map(|_| 0..n).collect();
        let pe_t = param(g, &self.params, "gv.pe_t")?;
        let pe_s = param(g, &self.params, "gv.pe_s")?;
        let rows_t = g.embed(pe_t, &temporal_ids)?;
        let rows_s = g.embed(pe_s, &spatial_ids)?;
        g.add(rows_t, rows_s)
    }
}

/// Symmetric InfoNCE on pre-built embedding nodes: logits `U·Vᵀ/τ`,
/// then the mean of row-wise and column-wise cross-entropy against the
/// diagonal. `tau` must be a positive scalar node.
pub(crate) fn info_nce_node(
    g: &mut Graph,
    u: NodeId,
    v: NodeId,
    tau: NodeId,
) -> Result<NodeId> {
    let (b, d) = (g.shape(u)[0], g.shape(u)[1]);
    if g.shape(v) != [b, d] {
        return Err(Error::ShapeMismatch {
            op: "info_nce",
            lhs: g.shape(u).to_vec(),
            rhs: g.shape(v).to_vec(),
        });
    }
    if b < 2 {
        return Err(Error::InvalidArgument(
            "info_nce needs at least two pairs; a single pair has no negatives".into(),
        ));
    }
    let sims = g.matmul_nt(u, v)?;
    let logits = g.div_by_scalar(sims, tau)?;
    let targets: Vec<usize> = (0..b).collect();
    let rows = g.cross_entropy_sum(logits, &targets)?;
    let transposed = g.transpose(logits)?;
    let cols = g.cross_entropy_sum(transposed, &targets)?;
    let sum = g.add(rows, cols)?;
    Ok(g.scale(sum, 0.5 / b as f64))
}

/// Eager symmetric InfoNCE between row-stacked embeddings `u` and `v`
/// at a fixed temperature.
pub fn info_nce(u: &Tensor, v: &Tensor, temperature: f64) -> Result<f64> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    let mut g = Graph::new();
    let un = g.constant(u.clone());
    let vn = g.constant(v.clone());
    let tau = g.constant(Tensor::full(vec![1, 1], temperature));
    let loss = info_nce_node(&mut g, un, vn, tau)?;
    Ok(g.value(loss))
}

/// Embed one clip's frames into a `[1, D_e]` unit row.
pub fn embed_video(model: &DualEncoder, frames: &[Frame]) -> Result<Tensor> {
    let mut g = Graph::new();
    let node = model.build_video_embedding(&mut g, frames)?;
    Tensor::new(g.shape(node).to_vec(), g.data(node).to_vec())
}

/// Embed one token sequence into a `[1, D_e]` unit row.
pub fn embed_text(model: &DualEncoder, text: &TokenSequence) -> Result<Tensor> {
    let mut g = Graph::new();
    let node = model.build_text_embedding(&mut g, text)?;
    Tensor::new(g.shape(node).to_vec(), g.data(node).to_vec())
}

/// Embed many clips in parallel against the read-only model, stacking
/// the unit rows into `[B, D_e]` in input order.
pub fn embed_videos(model: &DualEncoder, items: &[Vec<Frame>]) -> Result<Tensor> {
    let rows: Vec<Tensor> = items
        .par_iter()
        .map(|frames| embed_video(model, frames))
        .collect::<Result<_>>()?;
    stack_unit_rows(rows, model.config.embed_dim)
}

/// Embed many token sequences in parallel, stacking into `[B, D_e]`.
pub fn embed_texts(model: &DualEncoder, items: &[TokenSequence]) -> Result<Tensor> {
    let rows: Vec<Tensor> = items
        .par_iter()
        .map(|text| embed_text(model, text))
        .collect::<Result<_>>()?;
    stack_unit_rows(rows, model.config.embed_dim)
}

fn stack_unit_rows(rows: Vec<Tensor>, dim: usize) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot stack an empty embedding batch".into(),
        ));
    }
    let count = rows.len();
    let mut data = Vec::with_capacity(count * dim);
    for row in rows {
        data.extend_from_slice(&row.data);
    }
    Tensor::new(vec![count, dim], data)
}
