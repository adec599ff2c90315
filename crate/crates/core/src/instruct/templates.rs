//! Prompt templates and few-shot pools for QA generation.
//!
//! The template text lives in `assets/templates/` and is embedded at
//! compile time; each file carries five `{}` slots: two few-shot blocks
//! (captions + generated QA), then the target captions followed by a
//! trailing `Generated QA:` cue the completion continues from.

use crate::error::{Error, Result};
use crate::seeding::{derive_seed, rng_from};
use rand::Rng;

use super::QaKind;

const TEMPORAL_TEMPLATE: &str = include_str!("../../assets/templates/temporal.txt");
const CAUSAL_TEMPLATE: &str = include_str!("../../assets/templates/causal.txt");
const SHORT_QA_TEMPLATE: &str = include_str!("../../assets/templates/short-qa.txt");

/// One worked example: captions block, question, answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FewShotExample {
    pub captions: &'static str,
    pub question: &'static str,
    pub answer: &'static str,
}

const BACKFLIP_CAPTIONS: &str ="A boy wearing black shorts is standing on the side of the swimming pool over small rocks and then he performs a backflip and injured himself. In the background, there is a swimming pool, rocks, trees, and people's voices and water splashing sound is audible.";
const BICYCLE_CAPTIONS: &str = "A boy wearing a black t-shirt rides a black bicycle in a backward direction and falls on a gray surface. A girl wearing a black cloth is moving on a gray surface, stops, and looks back toward the boy. In the background, there are gray surfaces, buildings, metallic barrier poles, trees, boats, and the sky is visible, and sounds of people speaking and the wind are audible.";

const TEMPORAL_EXAMPLES: [FewShotExample; 3] = [
    FewShotExample {
        captions: concat!(
            "A baby girl on the left side wearing a grey t-shirt is carrying an egg then she throws the egg at the head of the man, then the egg falls on the ground and it breaks on a grey surface.",
            "\n",
            "A man wearing a red t-shirt sitting on his knees is talking with the baby girl on a grey surface. In the background, there is a grey car, a grey surface, a brown mat, and people speaking and crying sounds are audible.",
        ),
        question: "What did the baby girl on the left side wearing a grey t-shirt do with the egg after she is carrying it?",
        answer: "The girl throws the egg at the head of the man.",
    },
    FewShotExample {
        captions: BACKFLIP_CAPTIONS,
        question: "What was the boy wearing black shorts doing before he performing a backflip?",
        answer: "The boy is standing on the side of the swimming pool over small rocks. Then he performs a backflip and injured himself.",
    },
    FewShotExample {
        captions: BICYCLE_CAPTIONS,
        question: "What did the girl do after the boy wearing a black t-shirt rides a black bicycle in a backward direction and falls on a gray surface?",
        answer: "The girl wearing a black cloth is moving on a gray surface. After the boy falls on a gray surface, she stops and looks back toward the boy.",
    },
];

const CAUSAL_EXAMPLES: [FewShotExample; 3] = [
    FewShotExample {
        captions: concat!(
            "A baby girl on the left side wearing a grey t-shirt is carrying an egg then she throws the egg at the head of the man, then the egg falls on the ground and it breaks on a grey surface.",
            " ",
            "A man wearing a red t-shirt sitting on his knees is talking with the baby girl on a grey surface. In the background, there is a grey car, a grey surface, a brown mat, and people speaking and crying sounds are audible.",
        ),
        question: "Why did the egg fall on the ground and breaks?",
        answer: "The egg was thrown by the girl at the head of the man sitting on his knees. However, it did not hit the man. Therefore, the egg falls on the ground and breaks on a grey surface.",
    },
    FewShotExample {
        captions: BACKFLIP_CAPTIONS,
        question: "How did the boy standing on the side of the swimming pool over small rocks injure himself?",
        answer: "The boy standing on the side of the swimming pool over small rocks perform a backflip. Instead of falling into the water, he hit on the small rocks. That is why he injured himself.",
    },
    FewShotExample {
        captions: BICYCLE_CAPTIONS,
        question: "How did the boy wearing a black t-shirt fall on a gray surface?",
        answer: "The boy wearing a black t-shirt rides a black bicycle in a backward direction. Riding a black bicycle backward is slow and hard to balance. Also, the boy is not good at riding a black bicycle backward. As a result, he fell on a gray surface.",
    },
];

const SHORT_QA_EXAMPLES: [FewShotExample; 3] = [
    FewShotExample {
        captions: concat!(
            "A baby girl on the left side wearing a grey t-shirt is carrying an egg then she throws the egg at the head of the man, then the egg falls on the ground and it breaks on a grey surface.",
            " ",
            "A man wearing a red t-shirt sitting on his knees is talking with the baby girl on a grey surface. In the background, there is a grey car, a grey surface, a brown mat, and people speaking and crying sounds are audible.",
        ),
        question: "who throws the egg at the man",
        answer: "baby girl",
    },
    FewShotExample {
        captions: BACKFLIP_CAPTIONS,
        question: "what kind of pool is in the background",
        answer: "swimming",
    },
    FewShotExample {
        captions: BICYCLE_CAPTIONS,
        question: "what happens when the man loses control",
        answer: "falls down",
    },
];

/// The raw template text for `kind`, with its five `{}` slots unfilled.
pub fn template_text(kind: QaKind) -> &'static str {
    match kind {
        QaKind::Temporal => TEMPORAL_TEMPLATE,
        QaKind::Causal => CAUSAL_TEMPLATE,
        QaKind::ShortQa => SHORT_QA_TEMPLATE,
    }
}

/// The three worked examples available for `kind`.
pub fn few_shot_pool(kind: QaKind) -> &'static [FewShotExample; 3] {
    match kind {
        QaKind::Temporal => &TEMPORAL_EXAMPLES,
        QaKind::Causal => &CAUSAL_EXAMPLES,
        QaKind::ShortQa => &SHORT_QA_EXAMPLES,
    }
}

/// Assemble the full prompt for `kind`: header, two few-shot blocks drawn
/// uniformly without replacement from the pool of three (order = draw
/// order, seeded), and the target `captions` in the final slot.
pub fn build_prompt(kind: QaKind, captions: &str, seed: u64) -> Result<String> {
    if captions.trim().is_empty() {
        return Err(Error::InvalidArgument(
            "build_prompt requires non-empty captions".into(),
        ));
    }
    let pool = few_shot_pool(kind);
    let mut rng = rng_from(derive_seed(seed, "instruct/few-shot", kind.index() as u64));
    let first = rng.random_range(0..3usize);
    let remaining: Vec<usize> = (0..3).filter(|&i| i != first).collect();
    let second = remaining[rng.random_range(0..2usize)];

    let qa_block = |e: &FewShotExample| format!("Question: {}\nAnswer: {}", e.question, e.answer);
    let fills = [
        pool[first].captions.to_string(),
        qa_block(&pool[first]),
        pool[second].captions.to_string(),
        qa_block(&pool[second]),
        captions.to_string(),
    ];

    let parts: Vec<&str> = template_text(kind).split("{}").collect();
    debug_assert_eq!(parts.len(), fills.len() + 1, "template must have 5 slots");
    let mut prompt = String::new();
    for (part, fill) in parts.iter().zip(fills.iter()) {
        prompt.push_str(part);
        prompt.push_str(fill);
    }
    prompt.push_str(parts[parts.len() - 1]);
    Ok(prompt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_template_has_five_slots_and_shared_header_lines() {
        for kind in QaKind::ALL {
            let text = template_text(kind);
            assert_eq!(text.matches("{}").count(), 5, "{kind:?}");
            assert!(text.starts_with(
                "You are an AI visual assistant that can analyze a single video."
            ));
            assert!(text.contains("create a plausible question about the video"));
            assert!(text.contains("user's request.  Make the question challenging"));
            assert!(text.contains("Always answer as if you are directly looking at the video."));
            assert!(text.ends_with("(3) Captions:\n{}\nGenerated QA:\n"));
        }
    }

    #[test]
    fn kind_specific_directives_appear_verbatim() {
        assert!(template_text(QaKind::Temporal).contains(
            "Create questions that requires reasoning about temporal relationships between \
             actions, determined by order of occurrence. The questions can also cover \
             interactions between different persons or objects."
        ));
        assert!(template_text(QaKind::Causal).contains(
            "Create questions that explain actions, either uncovering the intentions of the \
             previously occurring actions or stating causes for subsequent actions."
        ));
        let short = template_text(QaKind::ShortQa);
        assert!(short.contains("provide a short answer with less than three words"));
        assert!(
            !short.contains("Create questions that"),
            "short-qa template has no directive line"
        );
    }

    #[test]
    fn built_prompt_contains_two_example_blocks_before_target() {
        let prompt = build_prompt(QaKind::Temporal, "a red circle spins slowly", 5).unwrap();
        assert_eq!(prompt.matches("Generated QA:").count(), 3);
        assert_eq!(prompt.matches("Question: ").count(), 2);
        assert_eq!(prompt.matches("Answer: ").count(), 2);
        let target_at = prompt.find("a red circle spins slowly").unwrap();
        let last_qa = prompt.rfind("Generated QA:\n").unwrap();
        assert!(target_at < last_qa, "target captions precede the final cue");
        assert!(prompt.ends_with("Generated QA:\n"));
    }

    #[test]
    fn short_qa_prompt_pins_the_three_word_phrase() {
        let prompt = build_prompt(QaKind::ShortQa, "a red circle spins slowly", 0).unwrap();
        assert!(prompt.contains("provide a short answer with less than three words"));
    }

    #[test]
    fn same_seed_gives_identical_bytes_and_seeds_vary_the_draw() {
        let a = build_prompt(QaKind::Causal, "a red circle spins slowly", 3).unwrap();
        let b = build_prompt(QaKind::Causal, "a red circle spins slowly", 3).unwrap();
        assert_eq!(a, b);
        let drawn: std::collections::BTreeSet<String> = (0..40)
            .map(|s| {
                let p = build_prompt(QaKind::Causal, "a red circle spins slowly", s).unwrap();
                let q = p.find("Question: ").unwrap();
                p[q..].lines().next().unwrap().to_string()
            })
            .collect();
        assert!(drawn.len() >= 2, "different seeds draw different examples");
    }

    #[test]
    fn all_six_ordered_example_pairs_occur() {
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..200 {
            let p = build_prompt(QaKind::ShortQa, "a red circle spins slowly", seed).unwrap();
            let pool = few_shot_pool(QaKind::ShortQa);
            let order: Vec<usize> = {
                let mut positions: Vec<(usize, usize)> = pool
                    .iter()
                    .enumerate()
                    .filter_map(|(i, e)| p.find(e.question).map(|at| (at, i)))
                    .collect();
                positions.sort_unstable();
                positions.into_iter().map(|(_, i)| i).collect()
            };
            assert_eq!(order.len(), 2);
            seen.insert((order[0], order[1]));
        }
        assert_eq!(seen.len(), 6, "all ordered pairs of distinct examples");
    }

    #[test]
    fn rejects_empty_captions() {
        assert!(build_prompt(QaKind::Temporal, "", 0).is_err());
        assert!(build_prompt(QaKind::Temporal, "   \n", 0).is_err());
    }

    #[test]
    fn few_shot_answers_for_short_qa_fit_three_words() {
        for e in few_shot_pool(QaKind::ShortQa) {
            assert!(e.answer.split_whitespace().count() <= 3);
        }
    }
}
