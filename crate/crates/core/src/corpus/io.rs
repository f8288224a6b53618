use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_lexicon, ClipRecord, Corpus, CorpusManifest, PromptRecord, Split};
use crate::error::{Error, Result};
use crate::face_model::{MotionFrame, MotionSequence, PoseAngles};

pub const FRAME_MAGIC: &[u8; 4] = b"O3FV";
pub const FRAME_FORMAT_VERSION: u32 = 1;
pub const FRAME_HEADER_BYTES: usize = 16;

pub fn frame_file_len(frames: usize, expr_dim: usize) -> usize {
    FRAME_HEADER_BYTES + frames * (expr_dim + 3) * 4
}

pub fn encode_frames(seq: &MotionSequence) -> Vec<u8> {
    let e = seq.expr_dim();
    let mut buf = Vec::with_capacity(frame_file_len(seq.len(), e));
    buf.extend_from_slice(FRAME_MAGIC);
    buf.extend_from_slice(&FRAME_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(seq.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(e as u32).to_le_bytes());
    for f in seq.frames() {
        for v in f.expr.iter().chain(&f.pose.as_array()) {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    buf
}

pub fn write_frames(path: &Path, seq: &MotionSequence) -> Result<()> {
    fs::write(path, encode_frames(seq)).map_err(|e| Error::io(path, e))
}

/// Reads one frame file; `clip_id` only labels errors.
pub fn read_frames(path: &Path, clip_id: &str) -> Result<MotionSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < FRAME_HEADER_BYTES || &bytes[..4] != FRAME_MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4-byte slice"));
    let version = word(1);
    if version != FRAME_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion { path: path.to_path_buf(), found: version, expected: FRAME_FORMAT_VERSION });
    }
    let (frames, e) = (word(2) as usize, word(3) as usize);
    let want = frame_file_len(frames, e);
    if bytes.len() != want {
        return Err(Error::LengthMismatch {
            clip_id: clip_id.to_string(),
            detail: format!("header promises {frames} frames ({want} bytes) but file has {} bytes", bytes.len()),
        });
    }
    let floats: Vec<f64> = bytes[FRAME_HEADER_BYTES..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
        .collect();
    let out = floats
        .chunks_exact(e + 3)
        .map(|row| MotionFrame { expr: row[..e].to_vec(), pose: PoseAngles::new(row[e], row[e + 1], row[e + 2]) })
        .collect();
    MotionSequence::new(out)
}

#[derive(Serialize, Deserialize)]
struct PromptLine {
    #[serde(flatten)]
    prompt: PromptRecord,
    split: Split,
}

/// Writes manifest.json, prompts.jsonl and frames/<clip_id>.bin.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    for (clip, entry) in corpus.clips.iter().zip(&corpus.manifest.files) {
        write_frames(&dir.join(&entry.path), &clip.motion)?;
    }
    let prompts_path = dir.join("prompts.jsonl");
    let file = fs::File::create(&prompts_path).map_err(|e| Error::io(&prompts_path, e))?;
    let mut w = BufWriter::new(file);
    for clip in &corpus.clips {
        let line = serde_json::to_string(&PromptLine { prompt: clip.prompt.clone(), split: clip.split })?;
        writeln!(w, "{line}").map_err(|e| Error::io(&prompts_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&prompts_path, e))?;
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&corpus.manifest)?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))
}

pub fn load_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads a persisted corpus, keeping only `split` when given.
pub fn load_corpus(dir: &Path, split: Option<Split>) -> Result<Corpus> {
    let manifest = load_manifest(dir)?;
    if manifest.format_version != FRAME_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: dir.join("manifest.json"),
            found: manifest.format_version,
            expected: FRAME_FORMAT_VERSION,
        });
    }
    let lexicon = build_lexicon(manifest.face_model.expr_dim)?;
    if lexicon.hash() != manifest.lexicon_hash {
        return Err(Error::Corrupt {
            what: "corpus manifest".into(),
            detail: "lexicon hash does not match this build's lexicon".into(),
        });
    }
    let prompts_path = dir.join("prompts.jsonl");
    let file = fs::File::open(&prompts_path).map_err(|e| Error::io(&prompts_path, e))?;
    let mut clips = Vec::new();
    let mut seen = 0;
    for (line, entry) in BufReader::new(file).lines().zip(&manifest.files) {
        let line = line.map_err(|e| Error::io(&prompts_path, e))?;
        let rec: PromptLine = serde_json::from_str(&line)?;
        seen += 1;
        if rec.prompt.clip_id != entry.clip_id {
            return Err(Error::Corrupt {
                what: "prompts.jsonl".into(),
                detail: format!("expected {} but found {}", entry.clip_id, rec.prompt.clip_id),
            });
        }
        if split.is_some_and(|s| s != rec.split) {
            continue;
        }
        let motion = read_frames(&dir.join(&entry.path), &entry.clip_id)?;
        if motion.len() != entry.frame_count {
            return Err(Error::LengthMismatch {
                clip_id: entry.clip_id.clone(),
                detail: format!("manifest lists {} frames, file has {}", entry.frame_count, motion.len()),
            });
        }
        clips.push(ClipRecord { prompt: rec.prompt, motion, split: rec.split });
    }
    if seen != manifest.files.len() {
        return Err(Error::Corrupt {
            what: "prompts.jsonl".into(),
            detail: format!("{seen} records for {} manifest entries", manifest.files.len()),
        });
    }
    Ok(Corpus { lexicon, manifest, clips })
}
