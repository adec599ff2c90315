//! Procedural toy-video world: scripted shapes in motion with ground-truth
//! captions, corrupted alt-text, and rule-tagged two-action scripts.
//!
//! Every clip is a pure function of `(seed, index)`: scripts are drawn
//! uniformly, rendering is deterministic, and corruption is seeded, so
//! whole datasets are reproducible bit for bit.

mod grammar;
mod io;
mod render;

pub use grammar::{
    cause_phrase, cause_tag_for, corrupt_alt_text, parse_caption, render_caption,
};
pub use io::{gen_world, read_frames, write_frames, Manifest, WorldParams};
pub use render::{centroid, frame_len, render_clip, sample_frames, CANVAS, SOURCE_FPS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::rng_from;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    /// Rendered RGB; channels kept off-primary so every color has signal
    /// in all three channels.
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.9, 0.15, 0.15],
            Color::Green => [0.15, 0.8, 0.15],
            Color::Blue => [0.15, 0.25, 0.9],
            Color::Yellow => [0.9, 0.85, 0.15],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verb {
    MovesLeft,
    MovesRight,
    MovesUp,
    MovesDown,
    Spins,
    StaysStill,
}

impl Verb {
    pub const ALL: [Verb; 6] = [
        Verb::MovesLeft,
        Verb::MovesRight,
        Verb::MovesUp,
        Verb::MovesDown,
        Verb::Spins,
        Verb::StaysStill,
    ];

    pub fn phrase(self) -> &'static str {
        match self {
            Verb::MovesLeft => "moves left",
            Verb::MovesRight => "moves right",
            Verb::MovesUp => "moves up",
            Verb::MovesDown => "moves down",
            Verb::Spins => "spins",
            Verb::StaysStill => "stays still",
        }
    }

    pub fn is_movement(self) -> bool {
        matches!(
            self,
            Verb::MovesLeft | Verb::MovesRight | Verb::MovesUp | Verb::MovesDown
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Speed {
    Slowly,
    Quickly,
}

impl Speed {
    pub fn word(self) -> &'static str {
        match self {
            Speed::Slowly => "slowly",
            Speed::Quickly => "quickly",
        }
    }
}

/// Rule id linking the second action to the first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CauseTag {
    ReachedWall,
    GotDizzy,
    GotBored,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: Color,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub verb: Verb,
    pub speed: Speed,
}

/// Ground-truth description of one clip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneScript {
    pub objects: Vec<ObjectSpec>,
    pub actions: Vec<ActionSpec>,
    pub cause_tag: Option<CauseTag>,
}

impl SceneScript {
    /// Single-object, single-action script with no cause tag.
    pub fn simple(color: Color, shape: Shape, verb: Verb, speed: Speed) -> Self {
        SceneScript {
            objects: vec![ObjectSpec { shape, color }],
            actions: vec![ActionSpec { verb, speed }],
            cause_tag: None,
        }
    }

    /// Two-action script; the cause tag follows from the first verb.
    pub fn two_action(
        color: Color,
        shape: Shape,
        first: ActionSpec,
        second: ActionSpec,
    ) -> Self {
        SceneScript {
            objects: vec![ObjectSpec { shape, color }],
            actions: vec![first, second],
            cause_tag: Some(cause_tag_for(first.verb)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() || self.objects.len() > 2 {
            return Err(Error::InvalidArgument(format!(
                "script must have 1–2 objects, has {}",
                self.objects.len()
            )));
        }
        match self.actions.as_slice() {
            [_] => {
                if self.cause_tag.is_some() {
                    return Err(Error::InvalidArgument(
                        "single-action script must not carry a cause tag".into(),
                    ));
                }
            }
            [a, b] => {
                if a.verb == b.verb {
                    return Err(Error::InvalidArgument(
                        "two-action script must use two different verbs".into(),
                    ));
                }
                if self.cause_tag.is_none() {
                    return Err(Error::InvalidArgument(
                        "two-action script must carry a cause tag".into(),
                    ));
                }
            }
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "script must have 1–2 actions, has {}",
                    self.actions.len()
                )))
            }
        }
        Ok(())
    }
}

/// Uniformly drawn script: shape, color, action count, verbs (second verb
/// always different), and speeds.
pub fn sample_script(seed: u64) -> SceneScript {
    let mut rng = rng_from(seed);
    let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
    let color = Color::ALL[rng.random_range(0..Color::ALL.len())];
    let first = ActionSpec {
        verb: Verb::ALL[rng.random_range(0..Verb::ALL.len())],
        speed: if rng.random_range(0..2) == 0 {
            Speed::Slowly
        } else {
            Speed::Quickly
        },
    };
    if rng.random_range(0..2) == 0 {
        SceneScript::simple(color, shape, first.verb, first.speed)
    } else {
        let others: Vec<Verb> = Verb::ALL
            .into_iter()
            .filter(|&v| v != first.verb)
            .collect();
        let second = ActionSpec {
            verb: others[rng.random_range(0..others.len())],
            speed: if rng.random_range(0..2) == 0 {
                Speed::Slowly
            } else {
                Speed::Quickly
            },
        };
        SceneScript::two_action(color, shape, first, second)
    }
}

/// One frame: channels-first `3×16×16` values in `[0,1]`.
pub type Frame = Vec<f64>;

/// A rendered clip with uniform timestamps at the source rate.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub id: String,
    pub script: SceneScript,
    pub frames: Vec<Frame>,
    /// Seconds; `frames.len() == timestamps.len()`.
    pub timestamps: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaptionSource {
    GroundTruth,
    AltText,
    Pseudo,
}

/// One caption attached to a clip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    /// Filled from the owning manifest entry; not serialized inline.
    #[serde(skip)]
    pub clip_id: String,
    pub text: String,
    pub source: CaptionSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_index: Option<u32>,
}
