//! Dataset generation and on-disk formats: raw frame files and the
//! JSONL manifest tying clips, scripts, and captions together.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::derive_seed;
use crate::world::render::{frame_len, render_clip, CANVAS, SOURCE_FPS};
use crate::world::{
    corrupt_alt_text, render_caption, sample_script, CaptionRecord, CaptionSource, Frame,
    SceneScript, VideoClip,
};

/// Magic bytes heading every frames file.
const FRAMES_MAGIC: &[u8; 4] = b"VDCL";

/// Knobs for dataset generation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct WorldParams {
    /// Attach a corrupted alt-text caption to every clip.
    pub include_alt_text: bool,
    /// Probability the alt-text loses its verb phrase ("is in the scene").
    pub alt_drop_rate: f64,
    /// Probability the alt-text color is swapped for a different one.
    pub alt_swap_rate: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        WorldParams {
            include_alt_text: true,
            alt_drop_rate: 0.5,
            alt_swap_rate: 0.3,
        }
    }
}

/// One manifest line: a clip with its script, captions, and frame file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub script: SceneScript,
    pub captions: Vec<CaptionRecord>,
    /// Relative to the manifest's directory, so runs are relocatable.
    pub frames_path: String,
}

impl ManifestEntry {
    /// The entry's ground-truth caption text.
    pub fn ground_truth(&self) -> Result<&str> {
        self.captions
            .iter()
            .find(|c| c.source == CaptionSource::GroundTruth)
            .map(|c| c.text.as_str())
            .ok_or_else(|| {
                Error::InvalidArgument(format!("clip {} has no ground-truth caption", self.id))
            })
    }
}

/// An ordered clip collection rooted at a directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory that `frames_path` values are relative to.
    pub base_dir: PathBuf,
}

impl Manifest {
    /// Write one JSON object per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for entry in &self.entries {
            out.push_str(&serde_json::to_string(entry)?);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut entry: ManifestEntry = serde_json::from_str(line).map_err(|e| {
                Error::Parse(format!(
                    "manifest {} line {}: {e}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            for caption in &mut entry.captions {
                caption.clip_id = entry.id.clone();
            }
            entries.push(entry);
        }
        let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok(Manifest { entries, base_dir })
    }

    /// Load the frames of one entry from disk into a [`VideoClip`].
    pub fn load_clip(&self, index: usize) -> Result<VideoClip> {
        let entry = self.entries.get(index).ok_or(Error::IndexOutOfRange {
            what: "manifest entry",
            index,
            size: self.entries.len(),
        })?;
        let path = self.base_dir.join(&entry.frames_path);
        let (frames, fps) = read_frames(&path)?;
        let timestamps = (0..frames.len()).map(|j| j as f64 / fps).collect();
        Ok(VideoClip {
            id: entry.id.clone(),
            script: entry.script.clone(),
            frames,
            timestamps,
        })
    }

    /// Borrow a sub-range as a new manifest sharing the same base dir.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Manifest {
        Manifest {
            entries: self.entries[range].to_vec(),
            base_dir: self.base_dir.clone(),
        }
    }
}

/// Serialize frames as `"VDCL"` + u32 counts (frames, channels, height,
/// width) + f32 fps + little-endian f32 pixels, frame-major.
pub fn write_frames(path: &Path, clip: &VideoClip) -> Result<()> {
    let mut buf: Vec<u8> =
        Vec::with_capacity(4 + 4 * 4 + 4 + clip.frames.len() * frame_len() * 4);
    buf.extend_from_slice(FRAMES_MAGIC);
    for dim in [clip.frames.len() as u32, 3, CANVAS as u32, CANVAS as u32] {
        buf.extend_from_slice(&dim.to_le_bytes());
    }
    buf.extend_from_slice(&(SOURCE_FPS as f32).to_le_bytes());
    for frame in &clip.frames {
        if frame.len() != frame_len() {
            return Err(Error::InvalidArgument(format!(
                "frame has {} values, expected {}",
                frame.len(),
                frame_len()
            )));
        }
        for &v in frame {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Inverse of [`write_frames`]; returns the frames and the stored fps.
pub fn read_frames(path: &Path) -> Result<(Vec<Frame>, f64)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let fail = |why: &str| Error::Parse(format!("frames file {}: {why}", path.display()));
    if bytes.len() < 24 || &bytes[..4] != FRAMES_MAGIC {
        return Err(fail("missing VDCL header"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let (n_frames, channels, height, width) =
        (u32_at(4) as usize, u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
    let fps = f32::from_le_bytes(bytes[20..24].try_into().unwrap()) as f64;
    if channels != 3 || height != CANVAS || width != CANVAS {
        return Err(fail("unexpected dimensions"));
    }
    if fps <= 0.0 {
        return Err(fail("non-positive fps"));
    }
    let per_frame = channels * height * width;
    let expected = 24 + n_frames * per_frame * 4;
    if bytes.len() != expected {
        return Err(fail(&format!(
            "payload is {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let mut frames = Vec::with_capacity(n_frames);
    let mut off = 24;
    for _ in 0..n_frames {
        let mut frame = Vec::with_capacity(per_frame);
        for _ in 0..per_frame {
            frame.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
            off += 4;
        }
        frames.push(frame);
    }
    Ok((frames, fps))
}

/// Generate `n_clips` seeded clips under `out_dir`: frame files in
/// `frames/`, and `manifest.jsonl` listing scripts and captions
/// (ground truth, plus corrupted alt-text when configured).
///
/// Fully deterministic per seed; clips render in parallel with per-clip
/// derived seeds.
pub fn gen_world(
    seed: u64,
    n_clips: usize,
    params: &WorldParams,
    out_dir: &Path,
) -> Result<Manifest> {
    if n_clips == 0 {
        return Err(Error::InvalidArgument("n_clips must be ≥ 1".into()));
    }
    let frames_dir = out_dir.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;

    let entries: Vec<ManifestEntry> = (0..n_clips)
        .into_par_iter()
        .map(|i| -> Result<ManifestEntry> {
            let id = format!("clip-{i:06}");
            let script = sample_script(derive_seed(seed, "world/script", i as u64));
            let clip = render_clip(&script, derive_seed(seed, "world/render", i as u64))?;
            let rel_path = format!("frames/{id}.vdcl");
            write_frames(&out_dir.join(&rel_path), &clip)?;

            let truth = render_caption(&script)?;
            let mut captions = vec![CaptionRecord {
                clip_id: id.clone(),
                text: truth.clone(),
                source: CaptionSource::GroundTruth,
                sample_index: None,
            }];
            if params.include_alt_text {
                captions.push(CaptionRecord {
                    clip_id: id.clone(),
                    text: corrupt_alt_text(
                        &truth,
                        derive_seed(seed, "world/alt", i as u64),
                        params.alt_drop_rate,
                        params.alt_swap_rate,
                    )?,
                    source: CaptionSource::AltText,
                    sample_index: None,
                });
            }
            Ok(ManifestEntry {
                id,
                script,
                captions,
                frames_path: rel_path,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = Manifest {
        entries,
        base_dir: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
