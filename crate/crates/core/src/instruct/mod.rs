//! Instruction-following data generation: prompt assembly from embedded
//! templates with seeded few-shot draws, a pluggable completion backend
//! (deterministic grammar-based mock or HTTP endpoint), QA extraction,
//! and corpus presets that mirror an incremental training-data recipe.
//!
//! Prompt building and parsing are pure; corpus generation walks clips in
//! order with per-clip derived seeds, so output is independent of any
//! batching of the walk.

mod llm;
mod templates;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::derive_seed_str;
use crate::tokenizer::{TokenRole, TokenSequence, Vocabulary};

pub use llm::{llm_complete, parse_qa, LlmEndpoint, ParsedQa};
pub use templates::{build_prompt, few_shot_pool, template_text, FewShotExample};

/// Task prompt that marks a captioning example; also the fixed
/// instruction used when adapting the visual tower.
pub const CAPTION_TASK_PROMPT: &str = "Generate the alt-text:";

/// Prefix prepended to short-QA questions at training time.
pub const SHORT_QA_TASK_PROMPT: &str = "Answer in en: ";

/// The three question categories with dedicated prompt templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QaKind {
    Temporal,
    Causal,
    ShortQa,
}

impl QaKind {
    pub const ALL: [QaKind; 3] = [QaKind::Temporal, QaKind::Causal, QaKind::ShortQa];

    pub fn name(self) -> &'static str {
        match self {
            QaKind::Temporal => "temporal",
            QaKind::Causal => "causal",
            QaKind::ShortQa => "short-qa",
        }
    }

    pub(crate) fn index(self) -> usize {
        match self {
            QaKind::Temporal => 0,
            QaKind::Causal => 1,
            QaKind::ShortQa => 2,
        }
    }
}

/// One generated question/answer with its provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionPair {
    pub question: String,
    pub answer: String,
    pub kind: QaKind,
    pub clip_id: String,
}

impl InstructionPair {
    /// Validate category rules; short-QA answers must fit three
    /// whitespace-separated words.
    pub fn new(question: String, answer: String, kind: QaKind, clip_id: String) -> Result<Self> {
        if kind == QaKind::ShortQa && answer.split_whitespace().count() > 3 {
            return Err(Error::InvalidArgument(format!(
                "short-qa answer must be at most 3 words, got {answer:?}"
            )));
        }
        Ok(InstructionPair { question, answer, kind, clip_id })
    }
}

/// What goes into a generated corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusPreset {
    /// Temporal + causal reasoning QA only.
    ReasoningOnly,
    /// Reasoning QA plus ground-truth captioning examples.
    WithCaptions,
    /// Everything: reasoning QA, captions, and short QA.
    Full,
}

impl CorpusPreset {
    pub const ALL: [CorpusPreset; 3] = [
        CorpusPreset::ReasoningOnly,
        CorpusPreset::WithCaptions,
        CorpusPreset::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorpusPreset::ReasoningOnly => "reasoning-only",
            CorpusPreset::WithCaptions => "with-captions",
            CorpusPreset::Full => "full",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        CorpusPreset::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown corpus preset {name:?}; expected one of reasoning-only, \
                     with-captions, full"
                ))
            })
    }

    fn qa_kinds(self) -> &'static [QaKind] {
        match self {
            CorpusPreset::ReasoningOnly | CorpusPreset::WithCaptions => {
                &[QaKind::Temporal, QaKind::Causal]
            }
            CorpusPreset::Full => &[QaKind::Temporal, QaKind::Causal, QaKind::ShortQa],
        }
    }

    fn includes_captions(self) -> bool {
        matches!(self, CorpusPreset::WithCaptions | CorpusPreset::Full)
    }
}

/// Category of a stored corpus record: a QA kind or a captioning example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordKind {
    Temporal,
    Causal,
    ShortQa,
    Caption,
}

impl From<QaKind> for RecordKind {
    fn from(kind: QaKind) -> Self {
        match kind {
            QaKind::Temporal => RecordKind::Temporal,
            QaKind::Causal => RecordKind::Causal,
            QaKind::ShortQa => RecordKind::ShortQa,
        }
    }
}

impl RecordKind {
    pub fn as_qa(self) -> Option<QaKind> {
        match self {
            RecordKind::Temporal => Some(QaKind::Temporal),
            RecordKind::Causal => Some(QaKind::Causal),
            RecordKind::ShortQa => Some(QaKind::ShortQa),
            RecordKind::Caption => None,
        }
    }
}

/// One line of an instruction corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub clip_id: String,
    pub kind: RecordKind,
    pub question: String,
    pub answer: String,
}

/// A clip the generator could not produce a record for, and why.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedRecord {
    pub clip_id: String,
    pub kind: QaKind,
    pub reason: String,
}

/// Corpus generation output: usable records plus skip diagnostics.
#[derive(Debug, Clone, Default)]
pub struct CorpusBuild {
    pub records: Vec<CorpusRecord>,
    pub skipped: Vec<SkippedRecord>,
}

/// Generate an instruction corpus from `(clip_id, caption)` pairs.
///
/// For every clip and every QA kind the preset includes, a prompt is
/// built with a seed derived from `(seed, kind, clip_id)` and sent to the
/// endpoint; unsuitable captions are recorded in `skipped` rather than
/// failing the build. Caption presets additionally emit one captioning
/// record per clip with the fixed task prompt.
pub fn generate_corpus(
    captions: &[(String, String)],
    preset: CorpusPreset,
    endpoint: &LlmEndpoint,
    seed: u64,
    max_tokens: usize,
) -> Result<CorpusBuild> {
    let mut build = CorpusBuild::default();
    for (clip_id, caption) in captions {
        for &kind in preset.qa_kinds() {
            let label = format!("instruct/{}", kind.name());
            let call_seed = derive_seed_str(seed, &label, clip_id);
            let prompt = build_prompt(kind, caption, call_seed)?;
            let completion = match llm_complete(endpoint, &prompt, max_tokens, call_seed) {
                Ok(text) => text,
                Err(Error::UnsuitableCaption { reason, .. }) => {
                    build.skipped.push(SkippedRecord {
                        clip_id: clip_id.clone(),
                        kind,
                        reason,
                    });
                    continue;
                }
                Err(other) => return Err(other),
            };
            for qa in parse_qa(&completion)? {
                let pair =
                    InstructionPair::new(qa.question, qa.answer, kind, clip_id.clone())?;
                build.records.push(CorpusRecord {
                    clip_id: pair.clip_id,
                    kind: kind.into(),
                    question: pair.question,
                    answer: pair.answer,
                });
            }
        }
        if preset.includes_captions() {
            build.records.push(CorpusRecord {
                clip_id: clip_id.clone(),
                kind: RecordKind::Caption,
                question: CAPTION_TASK_PROMPT.to_string(),
                answer: caption.clone(),
            });
        }
    }
    Ok(build)
}

/// Tokenize a corpus record into an `(instruction, output)` pair.
///
/// Short-QA questions get the task prefix; reasoning questions and
/// captioning prompts are tokenized verbatim. The output sequence frames
/// the answer with `<s> … </s>`.
pub fn to_training_example(
    record: &CorpusRecord,
    vocab: &Vocabulary,
    max_instruction_len: usize,
    max_output_len: usize,
) -> Result<(TokenSequence, TokenSequence)> {
    let question = match record.kind {
        RecordKind::ShortQa => format!("{SHORT_QA_TASK_PROMPT}{}", record.question),
        _ => record.question.clone(),
    };
    let y = vocab.encode(&question, max_instruction_len, TokenRole::Instruction)?;
    let z = vocab.encode(&record.answer, max_output_len, TokenRole::Output)?;
    Ok((y, z))
}

/// Write a corpus as JSONL, one record per line, in input order.
pub fn write_corpus(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read a corpus written by [`write_corpus`].
pub fn read_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(line)
            .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?;
        records.push(record);
    }
    Ok(records)
}
