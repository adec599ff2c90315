//! The caption grammar and its exact inverse, plus the alt-text
//! corruption model.
//!
//! Grammar: `"a {color} {shape} {verb} {speed}[, then {verb₂} {speed₂}]"`.
//! Rendering and parsing form a bijection over valid single-object
//! scripts, which is what lets the mock QA generator recover scripts from
//! caption text alone.

use rand::Rng;

use crate::error::{Error, Result};
use crate::seeding::rng_from;
use crate::world::{ActionSpec, CauseTag, Color, SceneScript, Shape, Speed, Verb};

/// Cause rule: what naturally stops the first action.
pub fn cause_tag_for(first_verb: Verb) -> CauseTag {
    match first_verb {
        v if v.is_movement() => CauseTag::ReachedWall,
        Verb::Spins => CauseTag::GotDizzy,
        _ => CauseTag::GotBored,
    }
}

/// Surface form of a cause tag, used as the causal-QA answer.
pub fn cause_phrase(tag: CauseTag) -> &'static str {
    match tag {
        CauseTag::ReachedWall => "it reached the wall",
        CauseTag::GotDizzy => "it got dizzy",
        CauseTag::GotBored => "it got bored",
    }
}

/// Render the ground-truth caption for a single-object script.
pub fn render_caption(script: &SceneScript) -> Result<String> {
    script.validate()?;
    let [object] = script.objects.as_slice() else {
        return Err(Error::InvalidArgument(format!(
            "caption grammar is defined for single-object scripts, got {}",
            script.objects.len()
        )));
    };
    let mut caption = format!(
        "a {} {} {} {}",
        object.color.word(),
        object.shape.word(),
        script.actions[0].verb.phrase(),
        script.actions[0].speed.word()
    );
    if let Some(second) = script.actions.get(1) {
        caption.push_str(&format!(
            ", then {} {}",
            second.verb.phrase(),
            second.speed.word()
        ));
    }
    Ok(caption)
}

fn parse_action(text: &str) -> Result<ActionSpec> {
    for verb in Verb::ALL {
        if let Some(rest) = text.strip_prefix(verb.phrase()) {
            let speed = match rest.trim() {
                "slowly" => Speed::Slowly,
                "quickly" => Speed::Quickly,
                other => {
                    return Err(Error::Parse(format!(
                        "unknown speed {other:?} in action {text:?}"
                    )))
                }
            };
            return Ok(ActionSpec { verb, speed });
        }
    }
    Err(Error::Parse(format!("no known verb in action {text:?}")))
}

/// Exact inverse of [`render_caption`] over valid captions.
pub fn parse_caption(text: &str) -> Result<SceneScript> {
    let body = text
        .strip_prefix("a ")
        .ok_or_else(|| Error::Parse(format!("caption does not start with \"a \": {text:?}")))?;
    let (color_word, rest) = body
        .split_once(' ')
        .ok_or_else(|| Error::Parse(format!("caption too short: {text:?}")))?;
    let color = Color::ALL
        .into_iter()
        .find(|c| c.word() == color_word)
        .ok_or_else(|| Error::Parse(format!("unknown color {color_word:?}")))?;
    let (shape_word, actions_text) = rest
        .split_once(' ')
        .ok_or_else(|| Error::Parse(format!("caption missing actions: {text:?}")))?;
    let shape = Shape::ALL
        .into_iter()
        .find(|s| s.word() == shape_word)
        .ok_or_else(|| Error::Parse(format!("unknown shape {shape_word:?}")))?;

    let script = match actions_text.split_once(", then ") {
        None => {
            let action = parse_action(actions_text)?;
            SceneScript::simple(color, shape, action.verb, action.speed)
        }
        Some((first_text, second_text)) => {
            let first = parse_action(first_text)?;
            let second = parse_action(second_text)?;
            SceneScript::two_action(color, shape, first, second)
        }
    };
    script.validate()?;
    Ok(script)
}

/// Corruption model for web alt-text: with probability `drop_rate` the
/// whole verb phrase becomes the static "is in the scene"; independently
/// with probability `swap_rate` the color changes to a different one.
/// Deterministic per seed; text that doesn't follow the grammar's
/// `"a {color} {shape} …"` prefix is returned unchanged.
pub fn corrupt_alt_text(
    caption: &str,
    seed: u64,
    drop_rate: f64,
    swap_rate: f64,
) -> Result<String> {
    for (name, rate) in [("drop_rate", drop_rate), ("swap_rate", swap_rate)] {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "{name} must be in [0,1], got {rate}"
            )));
        }
    }
    let mut rng = rng_from(seed);
    let drop = rng.random::<f64>() < drop_rate;
    let swap = rng.random::<f64>() < swap_rate;

    let mut words: Vec<&str> = caption.split(' ').collect();
    let structure_ok = words.len() >= 4
        && words[0] == "a"
        && Color::ALL.iter().any(|c| c.word() == words[1])
        && Shape::ALL.iter().any(|s| s.word() == words[2]);
    if !structure_ok {
        return Ok(caption.to_string());
    }

    if swap {
        let others: Vec<Color> = Color::ALL
            .into_iter()
            .filter(|c| c.word() != words[1])
            .collect();
        words[1] = others[rng.random_range(0..others.len())].word();
    }

    if drop {
        words.truncate(3);
        words.extend(["is", "in", "the", "scene"]);
    }
    Ok(words.join(" "))
}
