//! The one-call LLM interface behind QA generation, with two backends:
//! a deterministic mock that answers from the caption grammar, and an
//! HTTP endpoint speaking `POST {endpoint}/complete`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::rng_from;
use crate::world::{cause_phrase, parse_caption};
use rand::Rng;

use super::QaKind;

/// Where completions come from. The config value `"mock"` selects the
/// internal grammar-based generator; anything else is treated as a base
/// URL.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LlmEndpoint {
    Mock,
    Http(String),
}

impl LlmEndpoint {
    /// Interpret a config string: `"mock"` or a base URL.
    pub fn from_config(value: &str) -> LlmEndpoint {
        if value == "mock" {
            LlmEndpoint::Mock
        } else {
            LlmEndpoint::Http(value.trim_end_matches('/').to_string())
        }
    }
}

/// One question/answer pair extracted from a completion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedQa {
    pub question: String,
    pub answer: String,
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    prompt: &'a str,
    max_tokens: usize,
    seed: u64,
}

#[derive(Deserialize)]
struct CompletionResponse {
    text: String,
}

/// Request a completion for `prompt`.
///
/// The mock backend reads the final captions block out of the prompt,
/// recovers the scene script through the caption grammar, and emits one
/// templated QA pair; its answers are correct by construction. Captions
/// the grammar cannot parse, or that lack the second action a reasoning
/// question needs, yield [`Error::UnsuitableCaption`] so callers can skip
/// the record instead of aborting.
pub fn llm_complete(
    endpoint: &LlmEndpoint,
    prompt: &str,
    max_tokens: usize,
    seed: u64,
) -> Result<String> {
    if max_tokens == 0 {
        return Err(Error::InvalidArgument(
            "llm_complete requires max_tokens >= 1".into(),
        ));
    }
    match endpoint {
        LlmEndpoint::Mock => mock_complete(prompt, seed),
        LlmEndpoint::Http(base) => http_complete(base, prompt, max_tokens, seed),
    }
}

/// Extract every `Question:`/`Answer:` pair, in document order. Labels
/// must start a line; fields run until the next label and are trimmed.
/// Pairs with an empty field are dropped; zero usable pairs is a parse
/// error carrying the raw completion.
pub fn parse_qa(completion: &str) -> Result<Vec<ParsedQa>> {
    #[derive(PartialEq)]
    enum State {
        Outside,
        InQuestion,
        InAnswer,
    }
    let mut pairs = Vec::new();
    let mut question = String::new();
    let mut answer = String::new();
    let mut state = State::Outside;

    let flush = |question: &mut String, answer: &mut String, pairs: &mut Vec<ParsedQa>| {
        let q = question.trim().to_string();
        let a = answer.trim().to_string();
        question.clear();
        answer.clear();
        if !q.is_empty() && !a.is_empty() {
            pairs.push(ParsedQa { question: q, answer: a });
        }
    };

    for line in completion.lines() {
        if let Some(rest) = line.strip_prefix("Question:") {
            if state == State::InAnswer {
                flush(&mut question, &mut answer, &mut pairs);
            }
            question = rest.to_string();
            state = State::InQuestion;
        } else if let Some(rest) = line.strip_prefix("Answer:") {
            if state == State::InQuestion {
                answer = rest.to_string();
                state = State::InAnswer;
            }
        } else {
            match state {
                State::InQuestion => {
                    question.push('\n');
                    question.push_str(line);
                }
                State::InAnswer => {
                    answer.push('\n');
                    answer.push_str(line);
                }
                State::Outside => {}
            }
        }
    }
    if state == State::InAnswer {
        flush(&mut question, &mut answer, &mut pairs);
    }

    if pairs.is_empty() {
        return Err(Error::Parse(format!(
            "no Question/Answer pairs in completion: {completion:?}"
        )));
    }
    Ok(pairs)
}

/// Pull the target captions out of a built prompt: the text between the
/// last `Captions:` cue and the final `Generated QA:` cue.
fn target_captions(prompt: &str) -> Result<&str> {
    let start = prompt
        .rfind("Captions:\n")
        .ok_or_else(|| Error::Parse("prompt has no Captions: cue".into()))?
        + "Captions:\n".len();
    let rest = &prompt[start..];
    let end = rest
        .find("\nGenerated QA:")
        .ok_or_else(|| Error::Parse("prompt has no trailing Generated QA: cue".into()))?;
    Ok(&rest[..end])
}

fn detect_kind(prompt: &str) -> Result<QaKind> {
    if prompt.contains("provide a short answer with less than three words") {
        Ok(QaKind::ShortQa)
    } else if prompt.contains("temporal relationships between actions") {
        Ok(QaKind::Temporal)
    } else if prompt.contains("uncovering the intentions") {
        Ok(QaKind::Causal)
    } else {
        Err(Error::Parse(
            "prompt matches no known template header".into(),
        ))
    }
}

fn mock_complete(prompt: &str, seed: u64) -> Result<String> {
    let kind = detect_kind(prompt)?;
    let captions = target_captions(prompt)?;
    let script = parse_caption(captions.trim()).map_err(|e| Error::UnsuitableCaption {
        kind: kind.name().to_string(),
        reason: format!("caption does not follow the grammar: {e}"),
    })?;
    let object = script.objects[0];
    let color = object.color.word();
    let shape = object.shape.word();

    let (question, answer) = match kind {
        QaKind::Temporal | QaKind::Causal => {
            let [first, second] = script.actions.as_slice() else {
                return Err(Error::UnsuitableCaption {
                    kind: kind.name().to_string(),
                    reason: "reasoning questions need a two-action caption".into(),
                });
            };
            if kind == QaKind::Temporal {
                (
                    format!(
                        "What did the {color} {shape} do after it {}?",
                        first.verb.phrase()
                    ),
                    format!("{} {}", second.verb.phrase(), second.speed.word()),
                )
            } else {
                let tag = script.cause_tag.expect("two-action script has a cause tag");
                (
                    format!("Why did the {color} {shape} {}?", second.verb.phrase()),
                    cause_phrase(tag).to_string(),
                )
            }
        }
        QaKind::ShortQa => {
            let mut rng = rng_from(seed);
            match rng.random_range(0..3u8) {
                0 => ("what color is the shape".to_string(), color.to_string()),
                1 => ("what shape is in the video".to_string(), shape.to_string()),
                _ => ("how many shapes are in the video".to_string(), "one".to_string()),
            }
        }
    };
    Ok(format!("Question: {question}\nAnswer: {answer}"))
}

fn http_complete(base: &str, prompt: &str, max_tokens: usize, seed: u64) -> Result<String> {
    let url = format!("{base}/complete");
    let body = CompletionRequest { prompt, max_tokens, seed };
    let response = ureq::post(&url)
        .send_json(&body)
        .map_err(|e| match &e {
            ureq::Error::StatusCode(code) => Error::Transport {
                message: format!("{url} returned status {code}"),
                retryable: *code >= 500,
            },
            _ => Error::Transport {
                message: format!("{url}: {e}"),
                retryable: true,
            },
        })?;
    let parsed: CompletionResponse =
        response
            .into_body()
            .read_json()
            .map_err(|e| Error::Transport {
                message: format!("{url} returned an unreadable body: {e}"),
                retryable: false,
            })?;
    if parsed.text.trim().is_empty() {
        return Err(Error::Transport {
            message: format!("{url} returned an empty completion"),
            retryable: false,
        });
    }
    Ok(parsed.text)
}
