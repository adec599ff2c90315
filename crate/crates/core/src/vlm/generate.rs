//! Autoregressive caption generation: greedy decoding and nucleus
//! (top-p) sampling, with per-step instrumentation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{derive_seed, rng_from};
use crate::tensor::{Graph, Tensor};
use crate::tokenizer::{TokenSequence, Vocabulary, BOS_ID, EOS_ID, PAD_ID, UNK_ID};
use crate::vlm::forward::{validate_and_insert_tokens, VisualTokens};
use crate::vlm::VlmModel;
use rand::Rng;

/// Token-selection rule at each decoding step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DecodeMode {
    /// Highest-probability token; ties resolve to the lowest id.
    Greedy,
    /// Sample from the smallest probability prefix reaching mass `p`.
    Nucleus { p: f64 },
}

/// Generation settings. `samples` independent sequences are drawn, each
/// from its own stream derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateOptions {
    pub mode: DecodeMode,
    pub samples: usize,
    /// Hard cap on sequence length, start and end markers included.
    pub max_len: usize,
    pub seed: u64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            mode: DecodeMode::Nucleus { p: 0.9 },
            samples: 4,
            max_len: 24,
            seed: 0,
        }
    }
}

/// What one decoding step did: how many tokens the nucleus kept, their
/// pre-renormalization probability mass, and the chosen token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTrace {
    pub step: usize,
    pub kept: usize,
    pub kept_mass: f64,
    pub token: u32,
}

/// One generated sequence with its per-step traces.
#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub text: String,
    pub ids: Vec<u32>,
    pub steps: Vec<StepTrace>,
}

/// The nucleus: indices kept by top-p filtering with renormalized
/// probabilities (in descending probability order), plus the kept mass
/// before renormalization.
#[derive(Debug, Clone)]
pub struct NucleusSet {
    pub kept: Vec<(usize, f64)>,
    pub mass: f64,
}

/// Top-p filter: sort probabilities descending (ties by ascending
/// index), keep the smallest prefix whose cumulative mass reaches `p`
/// — the token that crosses the threshold is included — and renormalize.
pub fn nucleus_filter(probs: &[f64], p: f64) -> Result<NucleusSet> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "nucleus mass {p} outside (0, 1]"
        )));
    }
    if probs.is_empty() {
        return Err(Error::InvalidArgument("empty distribution".into()));
    }
    for &q in probs {
        if !q.is_finite() || q < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "probability {q} is not a finite non-negative value"
            )));
        }
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));

    let mut kept = Vec::new();
    let mut mass = 0.0;
    for &idx in &order {
        mass += probs[idx];
        kept.push(idx);
        if mass >= p {
            break;
        }
    }
    if mass <= 0.0 {
        return Err(Error::InvalidArgument("distribution has zero mass".into()));
    }
    let kept = kept.into_iter().map(|idx| (idx, probs[idx] / mass)).collect();
    Ok(NucleusSet { kept, mass })
}

/// Draw from renormalized `(index, probability)` pairs with a uniform
/// variate `u` in [0, 1). Rounding shortfalls resolve to the last entry.
pub fn sample_index(kept: &[(usize, f64)], u: f64) -> usize {
    let mut cum = 0.0;
    for &(idx, q) in kept {
        cum += q;
        if u < cum {
            return idx;
        }
    }
    kept.last().expect("nucleus is never empty").0
}

/// Generate `samples` sequences and detokenize them.
pub fn generate(
    model: &VlmModel,
    x: &VisualTokens,
    y: &TokenSequence,
    vocab: &Vocabulary,
    options: &GenerateOptions,
) -> Result<Vec<String>> {
    Ok(generate_traced(model, x, y, vocab, options)?
        .into_iter()
        .map(|s| s.text)
        .collect())
}

/// As [`generate`], returning token ids and per-step traces as well.
pub fn generate_traced(
    model: &VlmModel,
    x: &VisualTokens,
    y: &TokenSequence,
    vocab: &Vocabulary,
    options: &GenerateOptions,
) -> Result<Vec<GeneratedSample>> {
    if options.samples == 0 {
        return Err(Error::InvalidArgument("at least one sample required".into()));
    }
    if options.max_len < 2 || options.max_len > model.config.max_output_len {
        return Err(Error::InvalidArgument(format!(
            "max_len {} outside 2..={}",
            options.max_len, model.config.max_output_len
        )));
    }
    if let DecodeMode::Nucleus { p } = options.mode {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "nucleus mass {p} outside (0, 1]"
            )));
        }
    }

    // Encode the context once; decoding steps reuse the values.
    let encoded = {
        let mut g = Graph::new();
        let visual = validate_and_insert_tokens(model, &mut g, x)?;
        let node = model.build_encoder(&mut g, visual, &y.ids)?;
        Tensor::new(g.shape(node).to_vec(), g.data(node).to_vec())?
    };

    let mut out = Vec::with_capacity(options.samples);
    for sample in 0..options.samples {
        let mut rng = rng_from(derive_seed(options.seed, "vlm/generate", sample as u64));
        let mut ids = vec![BOS_ID];
        let mut steps = Vec::new();
        while ids.len() < options.max_len {
            let mut g = Graph::new();
            let enc = g.constant(encoded.clone());
            let logits = model.build_decoder_logits(&mut g, enc, &ids)?;
            let vocab_size = model.config.vocab_size;
            let start = (ids.len() - 1) * vocab_size;
            let mut row = g.data(logits)[start..start + vocab_size].to_vec();
            // Control tokens are never valid continuations.
            for special in [PAD_ID, BOS_ID, UNK_ID] {
                row[special as usize] = f64::NEG_INFINITY;
            }
            let probs = softmax(&row);
            let (token, kept, kept_mass) = match options.mode {
                DecodeMode::Greedy => {
                    let idx = argmax_first(&probs);
                    (idx as u32, 1, probs[idx])
                }
                DecodeMode::Nucleus { p } => {
                    let set = nucleus_filter(&probs, p)?;
                    let idx = sample_index(&set.kept, rng.random::<f64>());
                    (idx as u32, set.kept.len(), set.mass)
                }
            };
            steps.push(StepTrace { step: ids.len() - 1, kept, kept_mass, token });
            ids.push(token);
            if token == EOS_ID {
                break;
            }
        }
        let text = vocab.decode(&ids)?;
        out.push(GeneratedSample { text, ids, steps });
    }
    Ok(out)
}

/// Numerically stable softmax over one logit row.
fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the maximum, lowest index winning ties.
fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from;
    use crate::vlm::{encode_frames, VlmConfig};
    use crate::world::CANVAS;
    use rand::Rng;

    #[test]
    fn nucleus_keeps_smallest_prefix_and_renormalizes() {
        let set = nucleus_filter(&[0.5, 0.3, 0.2], 0.7).unwrap();
        assert_eq!(set.kept.len(), 2);
        assert_eq!(set.kept[0].0, 0);
        assert_eq!(set.kept[1].0, 1);
        assert!((set.kept[0].1 - 0.625).abs() < 1e-12);
        assert!((set.kept[1].1 - 0.375).abs() < 1e-12);
        assert!((set.mass - 0.8).abs() < 1e-12);
    }

    #[test]
    fn nucleus_includes_the_crossing_token() {
        // Sorted: idx2 (0.4), idx0 (0.3), idx1 (0.3). Mass crosses 0.5
        // only once idx0 joins, so idx0 must be kept.
        let set = nucleus_filter(&[0.3, 0.3, 0.4], 0.5).unwrap();
        let kept: Vec<usize> = set.kept.iter().map(|&(i, _)| i).collect();
        assert_eq!(kept, vec![2, 0]);
        assert!((set.kept[0].1 - 4.0 / 7.0).abs() < 1e-12);
        assert!((set.kept[1].1 - 3.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn nucleus_ties_break_toward_lower_index() {
        let set = nucleus_filter(&[0.4, 0.4, 0.2], 0.75).unwrap();
        let kept: Vec<usize> = set.kept.iter().map(|&(i, _)| i).collect();
        assert_eq!(kept, vec![0, 1]);
    }

    #[test]
    fn nucleus_with_full_mass_keeps_everything() {
        let set = nucleus_filter(&[0.25, 0.5, 0.125, 0.125], 1.0).unwrap();
        assert_eq!(set.kept.len(), 4);
        let total: f64 = set.kept.iter().map(|&(_, q)| q).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nucleus_rejects_bad_mass_and_bad_distributions() {
        assert!(nucleus_filter(&[1.0], 0.0).is_err());
        assert!(nucleus_filter(&[1.0], -0.2).is_err());
        assert!(nucleus_filter(&[1.0], 1.2).is_err());
        assert!(nucleus_filter(&[], 0.5).is_err());
        assert!(nucleus_filter(&[0.5, f64::NAN], 0.5).is_err());
        assert!(nucleus_filter(&[0.5, -0.1], 0.5).is_err());
        assert!(nucleus_filter(&[0.0, 0.0], 0.5).is_err());
    }

    #[test]
    fn vanishing_mass_reduces_nucleus_to_greedy() {
        // For p approaching zero the nucleus is exactly the argmax, so
        // sampling must reproduce greedy decoding on any distribution.
        let mut rng = rng_from(77);
        for _ in 0..1000 {
            let n = rng.random_range(2..50);
            let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-9).collect();
            let total: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let set = nucleus_filter(&probs, 1e-12).unwrap();
            assert_eq!(set.kept.len(), 1);
            assert_eq!(set.kept[0].0, argmax_first(&probs));
            assert!((set.kept[0].1 - 1.0).abs() < 1e-12);
            // Any variate picks the single kept token.
            assert_eq!(sample_index(&set.kept, rng.random::<f64>()), set.kept[0].0);
        }
    }

    #[test]
    fn sample_index_walks_the_cumulative_distribution() {
        let kept = vec![(7, 0.5), (2, 0.3), (9, 0.2)];
        assert_eq!(sample_index(&kept, 0.0), 7);
        assert_eq!(sample_index(&kept, 0.49), 7);
        assert_eq!(sample_index(&kept, 0.51), 2);
        assert_eq!(sample_index(&kept, 0.79), 2);
        assert_eq!(sample_index(&kept, 0.81), 9);
        assert_eq!(sample_index(&kept, 0.9999999), 9);
        // Rounding shortfall at the top end falls back to the last entry.
        assert_eq!(sample_index(&kept, 1.0), 9);
    }

    fn generation_fixture() -> (VlmModel, VisualTokens, TokenSequence, Vocabulary) {
        let vocab = Vocabulary::base();
        let config = VlmConfig {
            vocab_size: vocab.size(),
            max_output_len: 24,
            ..VlmConfig::micro()
        };
        let model = VlmModel::new(config, 31).unwrap();
        let mut rng = rng_from(32);
        let frame: Vec<f64> = (0..3 * CANVAS * CANVAS).map(|_| rng.random()).collect();
        let x = encode_frames(&model, &[frame]).unwrap();
        let y = TokenSequence::raw(vec![BOS_ID, 70, 80, EOS_ID]);
        (model, x, y, vocab)
    }

    #[test]
    fn generation_is_seed_deterministic_and_bounded() {
        let (model, x, y, vocab) = generation_fixture();
        let options = GenerateOptions { samples: 3, max_len: 10, ..Default::default() };
        let a = generate_traced(&model, &x, &y, &vocab, &options).unwrap();
        let b = generate_traced(&model, &x, &y, &vocab, &options).unwrap();
        assert_eq!(a.len(), 3);
        for (sa, sb) in a.iter().zip(b.iter()) {
            assert_eq!(sa.ids, sb.ids);
            assert_eq!(sa.text, sb.text);
        }
        for s in &a {
            assert!(s.ids.len() <= 10);
            assert_eq!(s.ids[0], BOS_ID);
        }
    }

    #[test]
    fn control_tokens_never_appear_after_the_start() {
        let (model, x, y, vocab) = generation_fixture();
        for seed in 0..5 {
            let options = GenerateOptions {
                samples: 2,
                max_len: 12,
                seed,
                ..Default::default()
            };
            for s in generate_traced(&model, &x, &y, &vocab, &options).unwrap() {
                for &id in &s.ids[1..] {
                    assert_ne!(id, PAD_ID);
                    assert_ne!(id, BOS_ID);
                    assert_ne!(id, UNK_ID);
                }
            }
        }
    }

    #[test]
    fn nucleus_kept_mass_always_reaches_p() {
        let (model, x, y, vocab) = generation_fixture();
        let options = GenerateOptions {
            mode: DecodeMode::Nucleus { p: 0.8 },
            samples: 4,
            max_len: 12,
            seed: 5,
        };
        let samples = generate_traced(&model, &x, &y, &vocab, &options).unwrap();
        let mut checked = 0;
        for s in &samples {
            for t in &s.steps {
                assert!(t.kept_mass >= 0.8 - 1e-9, "step mass {}", t.kept_mass);
                assert!(t.kept >= 1);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn greedy_ignores_the_seed_and_tiny_p_matches_it() {
        let (model, x, y, vocab) = generation_fixture();
        let greedy_a = generate_traced(
            &model,
            &x,
            &y,
            &vocab,
            &GenerateOptions { mode: DecodeMode::Greedy, samples: 1, max_len: 16, seed: 1 },
        )
        .unwrap();
        let greedy_b = generate_traced(
            &model,
            &x,
            &y,
            &vocab,
            &GenerateOptions { mode: DecodeMode::Greedy, samples: 1, max_len: 16, seed: 999 },
        )
        .unwrap();
        assert_eq!(greedy_a[0].ids, greedy_b[0].ids);

        let tiny_p = generate_traced(
            &model,
            &x,
            &y,
            &vocab,
            &GenerateOptions {
                mode: DecodeMode::Nucleus { p: 1e-12 },
                samples: 1,
                max_len: 16,
                seed: 42,
            },
        )
        .unwrap();
        assert_eq!(tiny_p[0].ids, greedy_a[0].ids);
    }

    #[test]
    fn generation_options_are_validated() {
        let (model, x, y, vocab) = generation_fixture();
        let bad_samples = GenerateOptions { samples: 0, ..Default::default() };
        assert!(generate(&model, &x, &y, &vocab, &bad_samples).is_err());
        let bad_len = GenerateOptions { max_len: 1, ..Default::default() };
        assert!(generate(&model, &x, &y, &vocab, &bad_len).is_err());
        let long_len = GenerateOptions { max_len: 1000, ..Default::default() };
        assert!(generate(&model, &x, &y, &vocab, &long_len).is_err());
        let bad_p = GenerateOptions {
            mode: DecodeMode::Nucleus { p: 0.0 },
            ..Default::default()
        };
        assert!(generate(&model, &x, &y, &vocab, &bad_p).is_err());
    }

    #[test]
    fn distinct_sample_streams_can_disagree() {
        let (model, x, y, vocab) = generation_fixture();
        let options = GenerateOptions {
            mode: DecodeMode::Nucleus { p: 1.0 },
            samples: 6,
            max_len: 12,
            seed: 9,
        };
        let samples = generate_traced(&model, &x, &y, &vocab, &options).unwrap();
        let first = &samples[0].ids;
        assert!(
            samples.iter().any(|s| &s.ids != first),
            "six full-mass samples all identical"
        );
    }
}
