//! Procedural prompt-motion corpus: a label registry, a trajectory
//! synthesizer with known ground truth, templated prompts, and the on-disk
//! layout (`manifest.json`, `prompts.jsonl`, `frames/<clip_id>.bin`).

pub mod io;
pub mod lexicon;
pub mod prompt;
pub mod synth;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::face_model::{FaceModel, MotionSequence};
pub use io::{load_corpus, load_manifest, read_frames, write_corpus, write_frames};
pub use lexicon::{build_lexicon, EmotionArchetype, HeadMotionPattern, Intensity, Lexicon, MicroExpression, PoseAxis};
pub use prompt::render_prompt;
pub use synth::{synth_trajectory, SynthNoise};

pub const MIN_CLIP_FRAMES: usize = 100;
pub const MAX_CLIP_FRAMES: usize = 150;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClipLabels {
    pub emotion: String,
    pub intensity: Intensity,
    pub motion: String,
    pub micro: Vec<String>,
    pub subject: String,
}

impl ClipLabels {
    /// Key of the (emotion, intensity, motion) cell.
    pub fn cell_key(&self) -> String {
        format!("{}/{}/{}", self.emotion, self.intensity.name(), self.motion)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub clip_id: String,
    pub text: String,
    pub paraphrases: Vec<String>,
    pub labels: ClipLabels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub prompt: PromptRecord,
    pub motion: MotionSequence,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_clips: usize,
    pub seed: u64,
    /// Train/val/test fractions.
    pub splits: [f64; 3],
    #[serde(default)]
    pub noise: SynthNoise,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { n_clips: 2880, seed: 11, splits: [0.8, 0.1, 0.1], noise: SynthNoise::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaceModelRef {
    pub seed: u64,
    pub vertex_count: usize,
    pub expr_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub clip_id: String,
    pub path: String,
    /// Byte offset of the first float after the header.
    pub data_offset: u64,
    pub frame_count: usize,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub seed: u64,
    pub n_clips: usize,
    pub lexicon_version: u32,
    pub lexicon_hash: String,
    pub face_model: FaceModelRef,
    pub noise: SynthNoise,
    pub cell_counts: BTreeMap<String, usize>,
    pub emotion_counts: BTreeMap<String, usize>,
    pub splits: BTreeMap<String, Split>,
    pub files: Vec<FileEntry>,
}

/// A generated corpus held in memory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub lexicon: Lexicon,
    pub manifest: CorpusManifest,
    pub clips: Vec<ClipRecord>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&ClipRecord> {
        self.clips.iter().filter(|c| c.split == split).collect()
    }
}

/// Stratified round-robin over (emotion, intensity, motion) cells. Each round
/// visits every cell once; within a round emotions are interleaved so any
/// prefix keeps per-emotion counts within one of each other.
#[derive(Debug, Clone)]
pub struct LabelSampler {
    queue: Vec<(usize, usize, usize)>,
    pos: usize,
    n_emotion: usize,
    n_motion: usize,
}

impl LabelSampler {
    pub fn new(lex: &Lexicon) -> Self {
        LabelSampler { queue: Vec::new(), pos: 0, n_emotion: lex.archetypes.len(), n_motion: lex.motions.len() }
    }

    fn refill<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let per_emotion = Intensity::ALL.len() * self.n_motion;
        let cells: Vec<Vec<(usize, usize)>> = (0..self.n_emotion)
            .map(|_| {
                let mut c: Vec<(usize, usize)> =
                    (0..Intensity::ALL.len()).flat_map(|i| (0..self.n_motion).map(move |m| (i, m))).collect();
                c.shuffle(rng);
                c
            })
            .collect();
        self.queue.clear();
        for j in 0..per_emotion {
            let mut emotions: Vec<usize> = (0..self.n_emotion).collect();
            emotions.shuffle(rng);
            for e in emotions {
                let (i, m) = cells[e][j];
                self.queue.push((e, i, m));
            }
        }
        self.pos = 0;
    }

    pub fn next<R: Rng + ?Sized>(&mut self, lex: &Lexicon, rng: &mut R) -> ClipLabels {
        if self.pos >= self.queue.len() {
            self.refill(rng);
        }
        let (e, i, m) = self.queue[self.pos];
        self.pos += 1;
        let micro = lex.micros.iter().filter(|_| rng.random_bool(0.5)).map(|m| m.name.clone()).collect();
        let subject = lex.subjects[rng.random_range(0..lex.subjects.len())].clone();
        ClipLabels {
            emotion: lex.archetypes[e].name.clone(),
            intensity: Intensity::ALL[i],
            motion: lex.motions[m].name.clone(),
            micro,
            subject,
        }
    }
}

pub fn clip_id(index: usize) -> String {
    format!("clip_{index:05}")
}

/// Generates the corpus in memory. The result is a pure function of the
/// config and the face model.
pub fn generate_clips(config: &CorpusConfig, model: &FaceModel) -> Result<Corpus> {
    if config.n_clips == 0 {
        return Err(Error::InvalidArgument("n_clips must be positive".into()));
    }
    let fr = config.splits;
    if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("split fractions {fr:?} must be in [0,1] and sum to 1")));
    }
    let lex = build_lexicon(model.expr_dim())?;
    if config.n_clips % lex.cell_count() != 0 {
        log::warn!(
            "n_clips={} is not a multiple of {}; cell counts will differ by one",
            config.n_clips,
            lex.cell_count()
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sampler = LabelSampler::new(&lex);
    let mut items = Vec::with_capacity(config.n_clips);
    for i in 0..config.n_clips {
        let labels = sampler.next(&lex, &mut rng);
        let len = rng.random_range(MIN_CLIP_FRAMES..=MAX_CLIP_FRAMES);
        let motion = synth_trajectory(&lex, &labels, len, config.noise, &mut rng)?;
        let prompt = render_prompt(&lex, &labels, &clip_id(i), &mut rng)?;
        items.push((prompt, motion));
    }

    let mut split_of = vec![Split::Train; items.len()];
    for arch in &lex.archetypes {
        let mut idx: Vec<usize> = (0..items.len()).filter(|&i| items[i].0.labels.emotion == arch.name).collect();
        idx.shuffle(&mut rng);
        // Held-out splits with a positive fraction keep at least one clip per
        // emotion once there are enough clips to go around.
        let n = idx.len();
        let held = |f: f64| {
            let k = (f * n as f64).round() as usize;
            if f > 0.0 && n >= 3 { k.max(1) } else { k }
        };
        let n_test = held(fr[2]).min(n);
        let n_val = held(fr[1]).min(n - n_test);
        let n_train = n - n_val - n_test;
        for (k, &i) in idx.iter().enumerate() {
            split_of[i] = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }

    let mut cell_counts = BTreeMap::new();
    let mut emotion_counts = BTreeMap::new();
    let mut splits = BTreeMap::new();
    let mut files = Vec::with_capacity(items.len());
    for ((p, m), s) in items.iter().zip(&split_of) {
        *cell_counts.entry(p.labels.cell_key()).or_insert(0) += 1;
        *emotion_counts.entry(p.labels.emotion.clone()).or_insert(0) += 1;
        splits.insert(p.clip_id.clone(), *s);
        files.push(FileEntry {
            clip_id: p.clip_id.clone(),
            path: format!("frames/{}.bin", p.clip_id),
            data_offset: io::FRAME_HEADER_BYTES as u64,
            frame_count: m.len(),
            bytes: io::frame_file_len(m.len(), m.expr_dim()) as u64,
        });
    }
    let manifest = CorpusManifest {
        format_version: io::FRAME_FORMAT_VERSION,
        seed: config.seed,
        n_clips: config.n_clips,
        lexicon_version: lex.version,
        lexicon_hash: lex.hash(),
        face_model: FaceModelRef { seed: model.seed(), vertex_count: model.vertex_count(), expr_dim: model.expr_dim() },
        noise: config.noise,
        cell_counts,
        emotion_counts,
        splits,
        files,
    };
    let clips = items
        .into_iter()
        .zip(split_of)
        .map(|((prompt, motion), split)| ClipRecord { prompt, motion, split })
        .collect();
    Ok(Corpus { lexicon: lex, manifest, clips })
}

/// Generates the corpus and persists it under `out_dir`.
pub fn generate_corpus(config: &CorpusConfig, model: &FaceModel, out_dir: &Path) -> Result<Corpus> {
    let corpus = generate_clips(config, model)?;
    write_corpus(&corpus, out_dir)?;
    Ok(corpus)
}
