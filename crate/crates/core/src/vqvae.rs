//! Mesh-supervised VQ-VAE that turns each motion frame into one geometry
//! token.
//!
//! The encoder is a per-frame MLP followed by residual temporal convolutions;
//! the decoder mirrors it. Codebook entries are re-estimated by exponential
//! moving averages of the latents assigned to them, and the encoder receives
//! gradients through a straight-through estimator.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::face_model::{FaceModel, MotionFrame, MotionSequence, PoseAngles};
use crate::nn::layers::Linear;
use crate::nn::{gemm, segments, AdamState, Graph, ParamStore, Segments, Var, View, ViewMut};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqvaeConfig {
    pub latent_dim: usize,
    pub codebook_size: usize,
    pub hidden_dim: usize,
    pub kernel_width: usize,
    pub conv_depth: usize,
    /// Commitment weight.
    pub beta: f64,
    pub pose_weight: f64,
    pub ema_decay: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Frames per training window.
    pub window: usize,
    /// Weight of the decode-then-encode consistency term.
    pub cycle_weight: f64,
    /// Random token sequences per step for the consistency term.
    pub cycle_batch: usize,
    pub seed: u64,
}

impl Default for VqvaeConfig {
    fn default() -> Self {
        VqvaeConfig {
            latent_dim: 64,
            codebook_size: 512,
            hidden_dim: 128,
            kernel_width: 5,
            conv_depth: 2,
            beta: 0.25,
            pose_weight: 1.0,
            ema_decay: 0.99,
            lr: 2e-3,
            batch_size: 32,
            window: 64,
            cycle_weight: 0.1,
            cycle_batch: 8,
            seed: 17,
        }
    }
}

impl VqvaeConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.kernel_width % 2 == 0 {
            errs.push(format!("vqvae.kernel_width must be odd, got {}", self.kernel_width));
        }
        if self.beta <= 0.0 {
            errs.push(format!("vqvae.beta must be positive, got {}", self.beta));
        }
        if self.codebook_size < 2 {
            errs.push("vqvae.codebook_size must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            errs.push(format!("vqvae.ema_decay must be in [0, 1), got {}", self.ema_decay));
        }
        if self.latent_dim == 0 || self.hidden_dim == 0 || self.batch_size == 0 {
            errs.push("vqvae dimensions and batch size must be positive".into());
        }
        if self.window < self.kernel_width {
            errs.push(format!("vqvae.window {} is shorter than the kernel", self.window));
        }
        errs
    }
}

/// EMA-maintained codebook of `k` entries of dimension `d`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub k: usize,
    pub d: usize,
    pub entries: Vec<f32>,
    pub ema_counts: Vec<f32>,
    pub ema_sums: Vec<f32>,
}

/// Small floor for EMA counts when dividing sums into entries.
pub const EMA_EPS: f32 = 1e-5;
/// Codes whose EMA count falls below this fraction of the mean are reseeded.
pub const DEAD_CODE_FRACTION: f32 = 0.01;

impl Codebook {
    pub fn new(entries: Vec<f32>, k: usize, d: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("empty codebook".into()));
        }
        if entries.len() != k * d {
            return Err(Error::shape("codebook", format!("{} values for {k}x{d}", entries.len())));
        }
        Ok(Codebook { k, d, ema_sums: entries.clone(), entries, ema_counts: vec![1.0; k] })
    }

    pub fn entry(&self, i: usize) -> &[f32] {
        &self.entries[i * self.d..(i + 1) * self.d]
    }

    pub fn sq_dist(&self, z: &[f32], i: usize) -> f64 {
        z.iter().zip(self.entry(i)).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum()
    }

    /// Index of the closest entry; the lowest index wins ties.
    pub fn nearest(&self, z: &[f32]) -> usize {
        let mut best = (0, f64::INFINITY);
        for i in 0..self.k {
            let d = self.sq_dist(z, i);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    /// Tokens, quantized latents and the commitment term `mean (z - e)^2`
    /// (averaged over every element) for row-major latents.
    ///
    /// Candidate distances come from one matrix product; every entry within
    /// a rounding margin of the best is then re-scored exactly in f64, so the
    /// result always agrees with [`Codebook::nearest`].
    pub fn quantize(&self, latents: &[f32]) -> Result<(Vec<usize>, Vec<f32>, f64)> {
        if self.d == 0 || latents.len() % self.d != 0 {
            return Err(Error::shape("quantize", format!("{} values for latent dim {}", latents.len(), self.d)));
        }
        let n = latents.len() / self.d;
        let norms: Vec<f32> = self.entries.chunks(self.d).map(|e| e.iter().map(|x| x * x).sum()).collect();
        let max_norm = norms.iter().copied().fold(0.0f32, f32::max);
        let mut dots = vec![0.0f32; n * self.k];
        gemm(
            n,
            self.d,
            self.k,
            1.0,
            View::rows(latents, self.d),
            View::rows(&self.entries, self.d).t(),
            0.0,
            ViewMut::rows(&mut dots, self.k),
        );
        let mut tokens = Vec::with_capacity(n);
        let mut q = Vec::with_capacity(latents.len());
        let mut commit = 0.0;
        for (z, row) in latents.chunks(self.d).zip(dots.chunks(self.k)) {
            let zn: f32 = z.iter().map(|x| x * x).sum();
            let approx = |i: usize| norms[i] - 2.0 * row[i];
            let best = (0..self.k).map(approx).fold(f32::INFINITY, f32::min);
            let margin = 1e-4 * (1.0 + zn + max_norm);
            let mut pick = (0, f64::INFINITY);
            for i in 0..self.k {
                if approx(i) <= best + margin {
                    let d = self.sq_dist(z, i);
                    if d < pick.1 {
                        pick = (i, d);
                    }
                }
            }
            commit += pick.1;
            tokens.push(pick.0);
            q.extend_from_slice(self.entry(pick.0));
        }
        Ok((tokens, q, commit / latents.len().max(1) as f64))
    }

    /// One EMA step from a batch of latents and their assignments.
    pub fn ema_update(&mut self, latents: &[f32], tokens: &[usize], decay: f64) {
        let g = decay as f32;
        let mut counts = vec![0.0f32; self.k];
        let mut sums = vec![0.0f32; self.k * self.d];
        for (z, &t) in latents.chunks(self.d).zip(tokens) {
            counts[t] += 1.0;
            sums[t * self.d..(t + 1) * self.d].iter_mut().zip(z).for_each(|(s, &x)| *s += x);
        }
        for i in 0..self.k {
            self.ema_counts[i] = g * self.ema_counts[i] + (1.0 - g) * counts[i];
            let c = self.ema_counts[i].max(EMA_EPS);
            for j in 0..self.d {
                let s = &mut self.ema_sums[i * self.d + j];
                *s = g * *s + (1.0 - g) * sums[i * self.d + j];
                self.entries[i * self.d + j] = *s / c;
            }
        }
    }

    /// Resets entries whose EMA count is below a small fraction of the mean
    /// to latents drawn from `pool`. Returns how many were reset.
    pub fn reseed_dead_codes<R: Rng + ?Sized>(&mut self, pool: &[f32], rng: &mut R) -> usize {
        let n_pool = pool.len() / self.d.max(1);
        if n_pool == 0 {
            return 0;
        }
        let mean = self.ema_counts.iter().sum::<f32>() / self.k as f32;
        let threshold = DEAD_CODE_FRACTION * mean;
        let mut reset = 0;
        for i in 0..self.k {
            if self.ema_counts[i] < threshold {
                let r = rng.random_range(0..n_pool);
                let z = &pool[r * self.d..(r + 1) * self.d];
                self.entries[i * self.d..(i + 1) * self.d].copy_from_slice(z);
                self.ema_counts[i] = mean;
                for j in 0..self.d {
                    self.ema_sums[i * self.d + j] = z[j] * mean;
                }
                reset += 1;
            }
        }
        reset
    }
}

/// One token per frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeometryTokenSequence {
    pub tokens: Vec<usize>,
}

impl GeometryTokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VqLosses {
    pub mesh_l1: f64,
    pub pose_l1: f64,
    pub commitment: f64,
    /// `mesh_l1 + pose_weight * pose_l1 + beta * commitment`.
    pub total: f64,
    /// Cross-entropy of re-encoding decoded random codes against their own
    /// indices; optimized alongside `total` with `cycle_weight`.
    pub cycle: f64,
}

#[derive(Debug, Clone)]
struct Layers {
    enc_fc1: Linear,
    enc_fc2: Linear,
    enc_conv: Vec<Linear>,
    dec_conv: Vec<Linear>,
    dec_fc1: Linear,
    dec_fc2: Linear,
}

/// The model: network parameters, input normalization and codebook.
#[derive(Debug, Clone)]
pub struct Vqvae {
    pub config: VqvaeConfig,
    pub expr_dim: usize,
    pub store: ParamStore<f32>,
    pub codebook: Codebook,
    /// Whether the codebook has been initialized from data latents.
    pub codebook_ready: bool,
    layers: Layers,
}

pub const INPUT_MEAN: &str = "vqvae.input.mean";
pub const INPUT_STD: &str = "vqvae.input.std";

impl Vqvae {
    /// Fresh model. `norm_source` supplies the per-channel statistics used
    /// to standardize inputs; pass the training clips.
    pub fn new(config: VqvaeConfig, expr_dim: usize, norm_source: &[&MotionSequence]) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = expr_dim + 3;
        let (h, d, w) = (config.hidden_dim, config.latent_dim, config.kernel_width);
        let mut store = ParamStore::new();
        let (mean, std) = channel_stats(norm_source, c)?;
        store.add(INPUT_MEAN, &[c], mean)?;
        store.add(INPUT_STD, &[c], std)?;
        let enc_fc1 = Linear::new(&mut store, "vqvae.encoder.fc1", c, h, &mut rng)?;
        let enc_fc2 = Linear::new(&mut store, "vqvae.encoder.fc2", h, d, &mut rng)?;
        let enc_conv = (0..config.conv_depth)
            .map(|i| Linear::new(&mut store, &format!("vqvae.encoder.conv{i}"), w * d, d, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let dec_conv = (0..config.conv_depth)
            .map(|i| Linear::new(&mut store, &format!("vqvae.decoder.conv{i}"), w * d, d, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let dec_fc1 = Linear::new(&mut store, "vqvae.decoder.fc1", d, h, &mut rng)?;
        let dec_fc2 = Linear::new(&mut store, "vqvae.decoder.fc2", h, c, &mut rng)?;
        // Fan-in scaled init keeps MLP activations near unit scale; the
        // residual convolutions keep the small default so they start close
        // to the identity.
        for lin in [&enc_fc1, &enc_fc2, &dec_fc1, &dec_fc2] {
            let fan_in = lin.in_dim as f32;
            let p = store.get_mut(lin.weight);
            p.value.iter_mut().for_each(|v| *v *= 50.0 / fan_in.sqrt());
        }
        let codebook = Codebook::new(vec![0.0; config.codebook_size * d], config.codebook_size, d)?;
        let layers = Layers { enc_fc1, enc_fc2, enc_conv, dec_conv, dec_fc1, dec_fc2 };
        Ok(Vqvae { config, expr_dim, store, codebook, codebook_ready: false, layers })
    }

    /// Rebuilds a model around a loaded parameter store and codebook.
    pub fn from_parts(config: VqvaeConfig, expr_dim: usize, store: ParamStore<f32>, codebook: Codebook) -> Result<Self> {
        let find = |name: &str| Linear::lookup(&store, name).ok_or_else(|| Error::MissingTensor(format!("{name}.weight")));
        let layers = Layers {
            enc_fc1: find("vqvae.encoder.fc1")?,
            enc_fc2: find("vqvae.encoder.fc2")?,
            enc_conv: (0..config.conv_depth).map(|i| find(&format!("vqvae.encoder.conv{i}"))).collect::<Result<_>>()?,
            dec_conv: (0..config.conv_depth).map(|i| find(&format!("vqvae.decoder.conv{i}"))).collect::<Result<_>>()?,
            dec_fc1: find("vqvae.decoder.fc1")?,
            dec_fc2: find("vqvae.decoder.fc2")?,
        };
        for name in [INPUT_MEAN, INPUT_STD] {
            store.id(name).ok_or_else(|| Error::MissingTensor(name.into()))?;
        }
        if layers.enc_fc1.in_dim != expr_dim + 3 || codebook.d != config.latent_dim || codebook.k != config.codebook_size {
            return Err(Error::shape("vqvae", "checkpoint tensors do not match the configuration"));
        }
        Ok(Vqvae { config, expr_dim, store, codebook, codebook_ready: true, layers })
    }

    pub fn k(&self) -> usize {
        self.codebook.k
    }

    fn standardized(&self, rows: &[f32]) -> Vec<f32> {
        let c = self.expr_dim + 3;
        let mean = &self.store.get(self.store.id(INPUT_MEAN).expect("mean present")).value;
        let std = &self.store.get(self.store.id(INPUT_STD).expect("std present")).value;
        rows.chunks(c).flat_map(|r| r.iter().zip(mean).zip(std).map(|((x, m), s)| (x - m) / s)).collect()
    }

    fn conv_stack(&self, g: &mut Graph<'_, f32>, mut x: Var, convs: &[Linear], segs: &Segments) -> Result<Var> {
        for conv in convs {
            let a = g.gelu(x);
            let u = g.time_unfold(a, self.config.kernel_width, segs)?;
            let y = conv.forward(g, u)?;
            x = g.add(x, y)?;
        }
        Ok(x)
    }

    fn encode_graph(&self, g: &mut Graph<'_, f32>, rows: &[f32], segs: &Segments) -> Result<Var> {
        let c = self.expr_dim + 3;
        let x = g.constant(self.standardized(rows), &[rows.len() / c, c])?;
        self.encode_standardized(g, x, segs)
    }

    fn encode_standardized(&self, g: &mut Graph<'_, f32>, x: Var, segs: &Segments) -> Result<Var> {
        let h = self.layers.enc_fc1.forward(g, x)?;
        let h = g.gelu(h);
        let z = self.layers.enc_fc2.forward(g, h)?;
        self.conv_stack(g, z, &self.layers.enc_conv, segs)
    }

    /// Returns (expression, pose) nodes.
    fn decode_graph(&self, g: &mut Graph<'_, f32>, q: Var, segs: &Segments) -> Result<(Var, Var)> {
        let y = self.conv_stack(g, q, &self.layers.dec_conv, segs)?;
        let h = self.layers.dec_fc1.forward(g, y)?;
        let h = g.gelu(h);
        let out = self.layers.dec_fc2.forward(g, h)?;
        let e = self.expr_dim;
        let expr = g.slice_cols(out, 0, e)?;
        let raw_pose = g.slice_cols(out, e, e + 3)?;
        let t = g.tanh(raw_pose);
        Ok((expr, g.scale(t, PI)))
    }

    /// Decodes random codes, re-encodes the result and scores the latents
    /// against every entry with logits `2 z·e - |e|^2` (the negative squared
    /// distance up to a per-row constant).
    fn cycle_graph(&self, g: &mut Graph<'_, f32>, tokens: &[usize], segs: &Segments) -> Result<Var> {
        let (d, k, e) = (self.config.latent_dim, self.codebook.k, self.expr_dim);
        let c = e + 3;
        let q: Vec<f32> = tokens.iter().flat_map(|&t| self.codebook.entry(t).to_vec()).collect();
        let q = g.constant(q, &[tokens.len(), d])?;
        let (expr, pose) = self.decode_graph(g, q, segs)?;
        let mean = &self.store.get(self.store.id(INPUT_MEAN).expect("mean present")).value;
        let std = &self.store.get(self.store.id(INPUT_STD).expect("std present")).value;
        let mut pe = vec![0.0; e * c];
        for i in 0..e {
            pe[i * c + i] = 1.0 / std[i];
        }
        let mut pp = vec![0.0; 3 * c];
        for j in 0..3 {
            pp[j * c + e + j] = 1.0 / std[e + j];
        }
        let shift: Vec<f32> = mean.iter().zip(std).map(|(m, s)| -m / s).collect();
        let pe = g.constant(pe, &[e, c])?;
        let pp = g.constant(pp, &[3, c])?;
        let shift = g.constant(shift, &[c])?;
        let xe = g.matmul(expr, pe)?;
        let xp = g.matmul(pose, pp)?;
        let x = g.add(xe, xp)?;
        let x = g.add_row(x, shift)?;
        let z = self.encode_standardized(g, x, segs)?;
        let entries = g.constant(self.codebook.entries.clone(), &[k, d])?;
        let dots = g.matmul_t(z, entries, false, true)?;
        let dots = g.scale(dots, 2.0);
        let neg_norms: Vec<f32> = self.codebook.entries.chunks(d).map(|r| -r.iter().map(|x| x * x).sum::<f32>()).collect();
        let neg_norms = g.constant(neg_norms, &[k])?;
        let logits = g.add_row(dots, neg_norms)?;
        g.cross_entropy(logits, tokens, &vec![true; tokens.len()])
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len < self.config.kernel_width {
            return Err(Error::TooShort { len, min: self.config.kernel_width });
        }
        Ok(())
    }

    /// Pre-quantization latents, `T × D` row-major.
    pub fn encode(&self, seq: &MotionSequence) -> Result<Vec<f32>> {
        self.check_len(seq.len())?;
        self.encode_batch(&[seq]).map(|mut v| v.remove(0))
    }

    /// Latents for several sequences in one packed pass.
    pub fn encode_batch(&self, seqs: &[&MotionSequence]) -> Result<Vec<Vec<f32>>> {
        for s in seqs {
            self.check_len(s.len())?;
        }
        let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let rows: Vec<f32> = seqs.iter().flat_map(|s| rows_f32(s)).collect();
        let segs = segments(&lens);
        let mut g = Graph::with_params(&self.store);
        let z = self.encode_graph(&mut g, &rows, &segs)?;
        let d = self.config.latent_dim;
        let zv = g.value(z);
        Ok(segs.iter().map(|&(s, l)| zv[s * d..(s + l) * d].to_vec()).collect())
    }

    pub fn quantize(&self, latents: &[f32]) -> Result<(Vec<usize>, Vec<f32>, f64)> {
        self.codebook.quantize(latents)
    }

    /// Decodes `T × D` quantized latents into a motion sequence.
    pub fn decode(&self, quantized: &[f32]) -> Result<MotionSequence> {
        let d = self.config.latent_dim;
        if quantized.is_empty() || quantized.len() % d != 0 {
            return Err(Error::shape("decode", format!("{} values for latent dim {d}", quantized.len())));
        }
        let t = quantized.len() / d;
        let segs = segments(&[t]);
        let mut g = Graph::with_params(&self.store);
        let q = g.constant(quantized.to_vec(), &[t, d])?;
        let (expr, pose) = self.decode_graph(&mut g, q, &segs)?;
        frames_from(g.value(expr), g.value(pose), self.expr_dim)
    }

    pub fn tokenize(&self, seq: &MotionSequence) -> Result<GeometryTokenSequence> {
        let z = self.encode(seq)?;
        Ok(GeometryTokenSequence { tokens: self.codebook.quantize(&z)?.0 })
    }

    pub fn tokenize_batch(&self, seqs: &[&MotionSequence]) -> Result<Vec<GeometryTokenSequence>> {
        self.encode_batch(seqs)?
            .iter()
            .map(|z| Ok(GeometryTokenSequence { tokens: self.codebook.quantize(z)?.0 }))
            .collect()
    }

    pub fn detokenize(&self, tokens: &[usize]) -> Result<MotionSequence> {
        if tokens.is_empty() {
            return Err(Error::TooShort { len: 0, min: 1 });
        }
        let mut q = Vec::with_capacity(tokens.len() * self.codebook.d);
        for &t in tokens {
            if t >= self.codebook.k {
                return Err(Error::TokenOutOfRange { id: t, limit: self.codebook.k });
            }
            q.extend_from_slice(self.codebook.entry(t));
        }
        self.decode(&q)
    }

    /// Encode, quantize and decode in one pass.
    pub fn reconstruct(&self, seq: &MotionSequence) -> Result<MotionSequence> {
        let z = self.encode(seq)?;
        let (_, q, _) = self.codebook.quantize(&z)?;
        self.decode(&q)
    }
}

fn rows_f32(seq: &MotionSequence) -> Vec<f32> {
    seq.to_rows().into_iter().map(|v| v as f32).collect()
}

fn frames_from(expr: &[f32], pose: &[f32], e: usize) -> Result<MotionSequence> {
    let frames = expr
        .chunks(e)
        .zip(pose.chunks(3))
        .map(|(x, p)| MotionFrame {
            expr: x.iter().map(|&v| v as f64).collect(),
            // f32 pi rounds above f64 pi, so a saturated tanh head needs the clamp.
            pose: PoseAngles::new(wrap(p[0]), wrap(p[1]), wrap(p[2])),
        })
        .collect();
    MotionSequence::new(frames)
}

fn wrap(a: f32) -> f64 {
    (a as f64).clamp(-std::f64::consts::PI, std::f64::consts::PI)
}

fn channel_stats(seqs: &[&MotionSequence], c: usize) -> Result<(Vec<f32>, Vec<f32>)> {
    let mut sum = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    let mut n = 0usize;
    for s in seqs {
        for row in s.to_rows().chunks(c) {
            for j in 0..c {
                sum[j] += row[j];
                sq[j] += row[j] * row[j];
            }
            n += 1;
        }
    }
    if n == 0 {
        return Ok((vec![0.0; c], vec![1.0; c]));
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let std = sq.iter().zip(&mean).map(|(q, m)| ((q / n as f64 - m * m).max(0.0).sqrt().max(1e-3)) as f32).collect();
    Ok((mean.into_iter().map(|m| m as f32).collect(), std))
}

/// Optimizer state and loss constants for training a [`Vqvae`].
pub struct VqvaeTrainer {
    pub adam: AdamState<f32>,
    pub rng: ChaCha8Rng,
    pub step: usize,
    basis: Vec<f32>,
    coords: usize,
    pool: Vec<f32>,
}

impl VqvaeTrainer {
    pub fn new(model: &Vqvae, face: &FaceModel) -> Result<Self> {
        if face.expr_dim() != model.expr_dim {
            return Err(Error::shape("vqvae", format!("face model has {} coefficients, model {}", face.expr_dim(), model.expr_dim)));
        }
        Ok(VqvaeTrainer {
            adam: AdamState::new(&model.store, model.config.lr),
            rng: ChaCha8Rng::seed_from_u64(model.config.seed ^ 0x9e37_79b9),
            step: 0,
            basis: face.basis().iter().map(|&v| v as f32).collect(),
            coords: face.vertex_count() * 3,
            pool: Vec::new(),
        })
    }

    /// Random fixed-length windows from random clips.
    pub fn sample_windows<'a>(&mut self, clips: &[&'a MotionSequence], batch: usize, window: usize) -> Vec<MotionSequence> {
        (0..batch)
            .map(|_| {
                let seq = clips[self.rng.random_range(0..clips.len())];
                let w = window.min(seq.len());
                let start = self.rng.random_range(0..=seq.len() - w);
                MotionSequence::new(seq.frames()[start..start + w].to_vec()).expect("window of a valid sequence")
            })
            .collect()
    }

    /// One optimization step. Returns the losses measured before the update.
    pub fn train_step(&mut self, model: &mut Vqvae, batch: &[MotionSequence]) -> Result<VqLosses> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        for s in batch {
            model.check_len(s.len())?;
        }
        let e = model.expr_dim;
        let c = e + 3;
        let d = model.config.latent_dim;
        let lens: Vec<usize> = batch.iter().map(|s| s.len()).collect();
        let n: usize = lens.iter().sum();
        let segs = segments(&lens);
        let rows: Vec<f32> = batch.iter().flat_map(rows_f32).collect();
        let expr_gt: Vec<f32> = rows.chunks(c).flat_map(|r| r[..e].to_vec()).collect();
        let pose_gt: Vec<f32> = rows.chunks(c).flat_map(|r| r[e..].to_vec()).collect();

        let (grads, losses, latents, tokens) = {
            let mut g = Graph::with_params(&model.store);
            let z = model.encode_graph(&mut g, &rows, &segs)?;
            let zv = g.value(z).to_vec();
            if !model.codebook_ready {
                init_codebook(&mut model.codebook, &zv, d, &mut self.rng);
            }
            let (tokens, q, commitment) = model.codebook.quantize(&zv)?;
            let zq = g.straight_through(z, q.clone())?;
            let (expr, pose) = model.decode_graph(&mut g, zq, &segs)?;

            let gt = g.constant(expr_gt, &[n, e])?;
            let diff = g.sub(expr, gt)?;
            let basis = g.constant(self.basis.clone(), &[e, self.coords])?;
            let disp = g.matmul(diff, basis)?;
            let zeros = g.constant(vec![0.0; n * self.coords], &[n, self.coords])?;
            let mesh = g.l1_loss(disp, zeros)?;
            let pgt = g.constant(pose_gt, &[n, 3])?;
            let pose_l1 = g.l1_loss(pose, pgt)?;
            let qc = g.constant(q, &[n, d])?;
            let commit = g.mse_loss(z, qc)?;

            let wp = g.scale(pose_l1, model.config.pose_weight);
            let wc = g.scale(commit, model.config.beta);
            let t = g.add(mesh, wp)?;
            let total = g.add(t, wc)?;
            let mut objective = total;
            let mut cycle_value = 0.0;
            if model.config.cycle_weight > 0.0 && model.config.cycle_batch > 0 {
                let w = model.config.window;
                let random: Vec<usize> =
                    (0..model.config.cycle_batch * w).map(|_| self.rng.random_range(0..model.codebook.k)).collect();
                let csegs = segments(&vec![w; model.config.cycle_batch]);
                let cycle = model.cycle_graph(&mut g, &random, &csegs)?;
                cycle_value = g.scalar(cycle) as f64;
                let wcyc = g.scale(cycle, model.config.cycle_weight);
                objective = g.add(total, wcyc)?;
            }
            let losses = VqLosses {
                mesh_l1: g.scalar(mesh) as f64,
                pose_l1: g.scalar(pose_l1) as f64,
                commitment,
                total: g.scalar(total) as f64,
                cycle: cycle_value,
            };
            if !losses.total.is_finite() || !cycle_value.is_finite() {
                return Err(Error::NonFinite(format!("vqvae loss at step {}", self.step)));
            }
            (g.backward(objective)?, losses, zv, tokens)
        };
        model.codebook_ready = true;
        model.store.accumulate(&grads);
        self.adam.step(&mut model.store)?;
        model.store.zero_grad();
        model.codebook.ema_update(&latents, &tokens, model.config.ema_decay);
        self.pool = latents;
        self.step += 1;
        Ok(losses)
    }

    /// Resets dead codes to latents from the most recent batch.
    pub fn reseed_dead_codes(&mut self, model: &mut Vqvae) -> usize {
        model.codebook.reseed_dead_codes(&self.pool, &mut self.rng)
    }

    /// Trains for `steps` steps on windows of `clips`, reseeding dead codes
    /// once per pass over the data. `on_step` sees every loss record.
    pub fn fit(
        &mut self,
        model: &mut Vqvae,
        clips: &[&MotionSequence],
        steps: usize,
        mut on_step: impl FnMut(usize, &VqLosses),
    ) -> Result<Vec<VqLosses>> {
        if clips.is_empty() {
            return Err(Error::InvalidArgument("no training clips".into()));
        }
        let frames: usize = clips.iter().map(|c| c.len()).sum();
        let per_step = model.config.batch_size * model.config.window;
        let epoch = frames.div_ceil(per_step).max(1);
        let mut trace = Vec::with_capacity(steps);
        for i in 0..steps {
            self.adam.lr = cosine_lr(model.config.lr, i, steps);
            let batch = self.sample_windows(clips, model.config.batch_size, model.config.window);
            let l = self.train_step(model, &batch)?;
            on_step(self.step, &l);
            trace.push(l);
            if self.step % epoch == 0 {
                let n = self.reseed_dead_codes(model);
                if n > 0 {
                    log::debug!("step {}: reseeded {n} dead codes", self.step);
                }
            }
        }
        Ok(trace)
    }
}

/// Cosine decay from `base` down to a tenth of it over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    let floor = 0.1 * base;
    let frac = step as f64 / total.max(1) as f64;
    floor + 0.5 * (base - floor) * (1.0 + (PI * frac).cos())
}

fn init_codebook<R: Rng + ?Sized>(cb: &mut Codebook, latents: &[f32], d: usize, rng: &mut R) {
    let n = latents.len() / d;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    for i in 0..cb.k {
        let r = idx[i % n];
        cb.entries[i * d..(i + 1) * d].copy_from_slice(&latents[r * d..(r + 1) * d]);
    }
    cb.ema_sums = cb.entries.clone();
    cb.ema_counts = vec![1.0; cb.k];
}

/// Zero-pose mesh L1 between two sequences of equal length, matching the
/// training loss: `mean |(expr_a - expr_b) · B|` over frames and coordinates.
pub fn zero_pose_mesh_l1(face: &FaceModel, a: &MotionSequence, b: &MotionSequence) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("mesh_l1", format!("{} vs {} frames", a.len(), b.len())));
    }
    let coords = face.vertex_count() * 3;
    let mut total = 0.0;
    let mut disp = vec![0.0; coords];
    for (fa, fb) in a.frames().iter().zip(b.frames()) {
        disp.iter_mut().for_each(|v| *v = 0.0);
        for (i, (x, y)) in fa.expr.iter().zip(&fb.expr).enumerate() {
            let c = x - y;
            if c != 0.0 {
                disp.iter_mut().zip(face.basis_vector(i)).for_each(|(v, b)| *v += c * b);
            }
        }
        total += disp.iter().map(|v| v.abs()).sum::<f64>();
    }
    Ok(total / (a.len() * coords) as f64)
}

/// Mean frame over a set of sequences.
pub fn mean_frame(seqs: &[&MotionSequence]) -> Result<MotionFrame> {
    let first = seqs.first().ok_or_else(|| Error::InvalidArgument("no sequences".into()))?;
    let c = first.expr_dim() + 3;
    let mut sum = vec![0.0; c];
    let mut n = 0.0;
    for s in seqs {
        for row in s.to_rows().chunks(c) {
            sum.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            n += 1.0;
        }
    }
    let m: Vec<f64> = sum.iter().map(|v| v / n).collect();
    Ok(MotionFrame { expr: m[..c - 3].to_vec(), pose: PoseAngles::new(m[c - 3], m[c - 2], m[c - 1]) })
}
