use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const LEXICON_VERSION: u32 = 1;
const ROTATION_SEED: u64 = 0x5eed_1e81;

/// Intensity scale applied to an archetype's base amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intensity {
    Low,
    Medium,
    High,
}

impl Intensity {
    pub const ALL: [Intensity; 3] = [Intensity::Low, Intensity::Medium, Intensity::High];

    pub fn scale(self) -> f64 {
        match self {
            Intensity::Low => 0.5,
            Intensity::Medium => 1.0,
            Intensity::High => 1.8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Intensity::Low => "low",
            Intensity::Medium => "medium",
            Intensity::High => "high",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Intensity::ALL.into_iter().find(|i| i.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseAxis {
    Yaw,
    Pitch,
    Roll,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmotionArchetype {
    pub name: String,
    /// Unit vector in expression space.
    pub direction: Vec<f64>,
    pub base_amplitude: f64,
    /// Surface words mapping to this archetype; the first is used in prompts.
    pub surfaces: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadMotionPattern {
    pub name: String,
    pub axis: PoseAxis,
    /// Signed peak angle in radians; the sign separates left from right turns.
    pub amplitude: f64,
    pub frequency: f64,
    pub phrase: String,
    pub surfaces: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MicroExpression {
    pub name: String,
    pub component_index: usize,
    pub pulse_width: usize,
    /// Events per second.
    pub rate: f64,
    pub amplitude: f64,
    pub phrase: String,
}

/// Registry of everything the generator can express, plus the surface forms
/// the text side uses for it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Lexicon {
    pub version: u32,
    pub expr_dim: usize,
    pub archetypes: Vec<EmotionArchetype>,
    pub motions: Vec<HeadMotionPattern>,
    pub micros: Vec<MicroExpression>,
    pub intensity_surfaces: Vec<(Intensity, Vec<String>)>,
    pub templates: Vec<String>,
    pub subjects: Vec<String>,
}

const ARCHETYPES: [(&str, f64, &[&str]); 16] = [
    ("happy", 1.8, &["happy", "smiling", "smiles", "smile"]),
    ("sad", 1.5, &["sad"]),
    ("angry", 1.8, &["angry"]),
    ("surprised", 2.0, &["surprised"]),
    ("fearful", 1.6, &["fearful", "afraid", "scared"]),
    ("disgusted", 1.6, &["disgusted"]),
    ("contemptuous", 1.4, &["contemptuous"]),
    ("neutral", 0.8, &["neutral"]),
    ("pout", 1.5, &["pouting", "pout", "pouts"]),
    ("smirk", 1.4, &["smirking", "smirk", "smirks"]),
    ("grin", 1.9, &["grinning", "grin", "grins"]),
    ("frown", 1.5, &["frowning", "frown", "frowns"]),
    ("squint", 1.4, &["squinting", "squint", "squints"]),
    ("skeptical", 1.4, &["skeptical"]),
    ("worried", 1.5, &["worried"]),
    ("focused", 1.4, &["focused"]),
];

/// (name, axis, amplitude, frequency Hz, phrase, surfaces)
const MOTIONS: [(&str, PoseAxis, f64, f64, &str, &[&str]); 6] = [
    ("still", PoseAxis::Yaw, 0.0, 0.5, "holding the head still", &["still", "motionless"]),
    ("nod", PoseAxis::Pitch, 0.3, 1.0, "nodding", &["nodding", "nod", "nods"]),
    ("shake", PoseAxis::Yaw, 0.3, 1.0, "shaking the head", &["shaking", "shake", "shakes"]),
    ("tilt", PoseAxis::Roll, 0.25, 0.5, "tilting the head", &["tilting", "tilt", "tilts"]),
    ("turn_left", PoseAxis::Yaw, 0.4, 0.2, "turning the head to the left", &["left", "leftward"]),
    ("turn_right", PoseAxis::Yaw, -0.4, 0.2, "turning the head to the right", &["right", "rightward"]),
];

const TEMPLATES: [&str; 6] = [
    "{Subject} looks {intensity} {emotion} while {motion}{micro}.",
    "{Subject} is {intensity} {emotion} and keeps {motion}{micro}.",
    "A close-up of {subject}, {intensity} {emotion}, {motion}{micro}.",
    "{Subject} appears {intensity} {emotion} while {motion}{micro}; the frame remains steady.",
    "The camera holds on {subject}, who is {motion} and looking {intensity} {emotion}{micro}.",
    "Facing the camera, {subject} seems {intensity} {emotion}, {motion}{micro}.",
];

const SUBJECTS: [&str; 8] = [
    "a young woman",
    "an older man",
    "a teenage boy",
    "a middle-aged woman",
    "a man with glasses",
    "a girl with curly hair",
    "an elderly woman",
    "a bearded man",
];

/// Builds the fixed registry for an expression space of `expr_dim`
/// coefficients. Archetype directions are the first sixteen canonical axes
/// under a fixed seeded rotation, so they are mutually orthogonal and dense.
pub fn build_lexicon(expr_dim: usize) -> Result<Lexicon> {
    if expr_dim < ARCHETYPES.len() {
        return Err(Error::InvalidArgument(format!(
            "lexicon needs expr_dim >= {} for distinct archetype directions, got {expr_dim}",
            ARCHETYPES.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(ROTATION_SEED);
    let draws = DMatrix::from_fn(expr_dim, expr_dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = draws.qr();
    let (q, r) = (qr.q(), qr.r());
    let archetypes = ARCHETYPES
        .iter()
        .enumerate()
        .map(|(i, &(name, amp, surfaces))| {
            let sign = if r[(i, i)] < 0.0 { -1.0 } else { 1.0 };
            EmotionArchetype {
                name: name.to_string(),
                direction: (0..expr_dim).map(|k| q[(k, i)] * sign).collect(),
                base_amplitude: amp,
                surfaces: surfaces.iter().map(|s| s.to_string()).collect(),
            }
        })
        .collect();
    let motions = MOTIONS
        .iter()
        .map(|&(name, axis, amplitude, frequency, phrase, surfaces)| HeadMotionPattern {
            name: name.to_string(),
            axis,
            amplitude,
            frequency,
            phrase: phrase.to_string(),
            surfaces: surfaces.iter().map(|s| s.to_string()).collect(),
        })
        .collect();
    let micros = vec![
        MicroExpression { name: "blink".into(), component_index: expr_dim - 1, pulse_width: 3, rate: 0.4, amplitude: 1.2, phrase: "blinking".into() },
        MicroExpression { name: "brow_raise".into(), component_index: expr_dim - 2, pulse_width: 5, rate: 0.3, amplitude: 1.0, phrase: "brow raises".into() },
        MicroExpression { name: "lip_twitch".into(), component_index: expr_dim - 3, pulse_width: 4, rate: 0.3, amplitude: 0.8, phrase: "lip twitches".into() },
    ];
    let intensity_surfaces = vec![
        (Intensity::Low, vec!["slightly".into(), "mildly".into(), "subtly".into()]),
        (Intensity::Medium, vec!["moderately".into()]),
        (Intensity::High, vec!["intensely".into(), "strongly".into()]),
    ];
    Ok(Lexicon {
        version: LEXICON_VERSION,
        expr_dim,
        archetypes,
        motions,
        micros,
        intensity_surfaces,
        templates: TEMPLATES.iter().map(|s| s.to_string()).collect(),
        subjects: SUBJECTS.iter().map(|s| s.to_string()).collect(),
    })
}

impl Lexicon {
    pub fn archetype(&self, name: &str) -> Option<&EmotionArchetype> {
        self.archetypes.iter().find(|a| a.name == name)
    }

    pub fn motion(&self, name: &str) -> Option<&HeadMotionPattern> {
        self.motions.iter().find(|m| m.name == name)
    }

    pub fn micro(&self, name: &str) -> Option<&MicroExpression> {
        self.micros.iter().find(|m| m.name == name)
    }

    pub fn intensity_word(&self, i: Intensity) -> &str {
        &self.intensity_surfaces.iter().find(|(k, _)| *k == i).expect("every intensity has surfaces").1[0]
    }

    /// Number of (emotion, intensity, motion) cells.
    pub fn cell_count(&self) -> usize {
        self.archetypes.len() * Intensity::ALL.len() * self.motions.len()
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("lexicon serializes");
        hex::encode(Sha256::digest(&json))
    }
}
