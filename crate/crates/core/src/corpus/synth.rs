use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use super::lexicon::{Lexicon, PoseAxis};
use super::ClipLabels;
use crate::error::{Error, Result};
use crate::face_model::{MotionFrame, MotionSequence, PoseAngles, EXPR_LIMIT, FPS};

/// Standard deviations of the smooth noise added on top of the clean signal.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthNoise {
    pub expr_sigma: f64,
    pub pose_sigma: f64,
}

impl Default for SynthNoise {
    fn default() -> Self {
        SynthNoise { expr_sigma: 0.05, pose_sigma: 0.01 }
    }
}

impl SynthNoise {
    pub fn none() -> Self {
        SynthNoise { expr_sigma: 0.0, pose_sigma: 0.0 }
    }
}

/// Temporal width (frames) of the Gaussian filter that smooths noise.
const NOISE_SMOOTHING: f64 = 5.0;

/// Onset/sustain/offset envelope: smoothstep up over the first 20% of the
/// clip, flat, then smoothstep down over the last 20%.
pub fn envelope(t: usize, len: usize) -> f64 {
    if len < 2 {
        return 1.0;
    }
    let u = t as f64 / (len - 1) as f64;
    let ramp = |x: f64| {
        let x = x.clamp(0.0, 1.0);
        x * x * (3.0 - 2.0 * x)
    };
    if u < 0.2 {
        ramp(u / 0.2)
    } else if u > 0.8 {
        ramp((1.0 - u) / 0.2)
    } else {
        1.0
    }
}

/// Unit-variance noise low-passed by a Gaussian filter.
pub fn smooth_noise<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    let radius = (3.0 * NOISE_SMOOTHING).ceil() as usize;
    let kernel: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-0.5 * d * d / (NOISE_SMOOTHING * NOISE_SMOOTHING)).exp()
        })
        .collect();
    let norm = kernel.iter().map(|w| w * w).sum::<f64>().sqrt();
    let white: Vec<f64> = (0..len + 2 * radius).map(|_| rng.sample(StandardNormal)).collect();
    (0..len)
        .map(|t| kernel.iter().zip(&white[t..]).map(|(w, x)| w * x).sum::<f64>() / norm)
        .collect()
}

/// Renders a clip for `labels`. Expression is the archetype direction scaled
/// by amplitude and envelope, plus micro-expression pulses and smooth noise;
/// pose follows the head-motion pattern on one axis plus smooth noise.
pub fn synth_trajectory<R: Rng + ?Sized>(
    lex: &Lexicon,
    labels: &ClipLabels,
    len: usize,
    noise: SynthNoise,
    rng: &mut R,
) -> Result<MotionSequence> {
    let arch = lex
        .archetype(&labels.emotion)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown emotion {:?}", labels.emotion)))?;
    let motion = lex
        .motion(&labels.motion)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown head motion {:?}", labels.motion)))?;
    if !(1..=crate::face_model::MAX_FRAMES).contains(&len) {
        return Err(Error::InvalidArgument(format!("clip length {len} out of range")));
    }
    let e = lex.expr_dim;
    let amp = arch.base_amplitude * labels.intensity.scale();
    let mut expr: Vec<Vec<f64>> = (0..len)
        .map(|t| {
            let a = amp * envelope(t, len);
            arch.direction.iter().map(|d| a * d).collect()
        })
        .collect();

    for name in &labels.micro {
        let m = lex.micro(name).ok_or_else(|| Error::InvalidArgument(format!("unknown micro-expression {name:?}")))?;
        let p_start = m.rate / FPS as f64;
        let mut t = 0;
        while t < len {
            if rng.random::<f64>() < p_start {
                for k in 0..m.pulse_width {
                    if t + k >= len {
                        break;
                    }
                    let phase = (k as f64 + 0.5) / m.pulse_width as f64;
                    expr[t + k][m.component_index] += m.amplitude * (PI * phase).sin().powi(2);
                }
                t += m.pulse_width;
            } else {
                t += 1;
            }
        }
    }

    if noise.expr_sigma > 0.0 {
        for k in 0..e {
            let n = smooth_noise(len, rng);
            for (row, z) in expr.iter_mut().zip(n) {
                row[k] += noise.expr_sigma * z;
            }
        }
    }

    let mut pose: Vec<[f64; 3]> = (0..len)
        .map(|t| {
            let v = motion.amplitude * (2.0 * PI * motion.frequency * t as f64 / FPS as f64).sin();
            match motion.axis {
                PoseAxis::Yaw => [v, 0.0, 0.0],
                PoseAxis::Pitch => [0.0, v, 0.0],
                PoseAxis::Roll => [0.0, 0.0, v],
            }
        })
        .collect();
    if noise.pose_sigma > 0.0 {
        for k in 0..3 {
            let n = smooth_noise(len, rng);
            for (row, z) in pose.iter_mut().zip(n) {
                row[k] += noise.pose_sigma * z;
            }
        }
    }

    let frames = expr
        .into_iter()
        .zip(pose)
        .map(|(x, p)| MotionFrame {
            expr: x.into_iter().map(|v| round_f32(v.clamp(-EXPR_LIMIT, EXPR_LIMIT))).collect(),
            pose: PoseAngles { yaw: round_f32(p[0]), pitch: round_f32(p[1]), roll: round_f32(p[2]) },
        })
        .collect();
    MotionSequence::new(frames)
}

/// Values are stored as f32 on disk, so generation rounds through f32 to make
/// a save/load cycle exact.
fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Projects the mean sustain-phase expression onto each archetype direction
/// and returns the index of the largest absolute projection.
pub fn dominant_archetype(lex: &Lexicon, seq: &MotionSequence) -> usize {
    let len = seq.len();
    let lo = (0.2 * len as f64).ceil() as usize;
    let hi = ((0.8 * len as f64).floor() as usize).max(lo + 1).min(len);
    let mut mean = vec![0.0; lex.expr_dim];
    for f in &seq.frames()[lo..hi] {
        for (m, x) in mean.iter_mut().zip(&f.expr) {
            *m += x;
        }
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, a) in lex.archetypes.iter().enumerate() {
        let p: f64 = a.direction.iter().zip(&mean).map(|(d, m)| d * m).sum::<f64>().abs();
        if p > best.1 {
            best = (i, p);
        }
    }
    best.0
}

/// Largest per-frame expression norm in a sequence.
pub fn peak_expression_norm(seq: &MotionSequence) -> f64 {
    seq.frames()
        .iter()
        .map(|f| f.expr.iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}
