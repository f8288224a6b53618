//! Incremental decoding with a key/value cache.
//!
//! The cached path recomputes the same arithmetic as the training graph one
//! row at a time; tests pin the two against each other.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{argmax, l2m_prefix, m2l_prefix, LmKind, MotionLm, MAX_MOTION_TOKENS};
use crate::error::{Error, Result};
use crate::face_model::MotionSequence;
use crate::nn::layers::{LayerNorm, Linear};
use crate::nn::{gelu_fwd, softmax_in_place, ParamStore, LN_EPS};
use crate::text_codec::{Vocabulary, EOS, FIRST_TEXT_ID};
use crate::vqvae::{GeometryTokenSequence, Vqvae};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    /// 0 selects greedy decoding.
    pub temperature: f64,
    /// 0 disables top-k filtering.
    pub top_k: usize,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams { temperature: 0.0, top_k: 0, max_new_tokens: MAX_MOTION_TOKENS, seed: 0 }
    }
}

impl GenerationParams {
    pub fn greedy() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature must be a finite value >= 0, got {}", self.temperature)));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidArgument("max_new_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

/// Picks the next head index from `logits`. Entries with `allowed(i) == false`
/// are never chosen. Greedy decoding takes the lowest index among maxima.
pub(crate) fn sample_index<R: Rng + ?Sized>(
    logits: &[f32],
    allowed: impl Fn(usize) -> bool,
    params: &GenerationParams,
    rng: &mut R,
) -> usize {
    let masked: Vec<f32> = logits.iter().enumerate().map(|(i, &x)| if allowed(i) { x } else { f32::NEG_INFINITY }).collect();
    if params.temperature == 0.0 {
        return argmax(&masked);
    }
    let t = params.temperature as f32;
    let mut scaled: Vec<f32> = masked.iter().map(|&x| x / t).collect();
    if params.top_k > 0 && params.top_k < scaled.len() {
        let mut order: Vec<usize> = (0..scaled.len()).collect();
        order.sort_by(|&a, &b| scaled[b].total_cmp(&scaled[a]).then(a.cmp(&b)));
        for &i in &order[params.top_k..] {
            scaled[i] = f32::NEG_INFINITY;
        }
    }
    softmax_in_place(&mut scaled);
    let u: f32 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in scaled.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Keys and values of every processed position, per layer.
#[derive(Debug, Clone)]
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn linear(store: &ParamStore<f32>, l: &Linear, x: &[f32]) -> Vec<f32> {
    let w = &store.get(l.weight).value;
    let mut y = store.get(l.bias).value.clone();
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * l.out_dim..(i + 1) * l.out_dim];
        y.iter_mut().zip(row).for_each(|(y, &w)| *y += xi * w);
    }
    y
}

fn layer_norm(store: &ParamStore<f32>, ln: &LayerNorm, x: &[f32]) -> Vec<f32> {
    let (g, b) = (&store.get(ln.gamma).value, &store.get(ln.beta).value);
    let n = x.len() as f32;
    let mu = x.iter().sum::<f32>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f32>() / n;
    let rs = 1.0 / (var + LN_EPS as f32).sqrt();
    x.iter().enumerate().map(|(c, &v)| (v - mu) * rs * g[c] + b[c]).collect()
}

impl MotionLm {
    pub fn new_cache(&self) -> KvCache {
        KvCache { keys: vec![Vec::new(); self.blocks.len()], values: vec![Vec::new(); self.blocks.len()], len: 0 }
    }

    /// Appends one token and returns the head logits at its position.
    pub fn step(&self, cache: &mut KvCache, id: usize) -> Result<Vec<f32>> {
        if id >= self.vocab_size {
            return Err(Error::TokenOutOfRange { id, limit: self.vocab_size });
        }
        let pos = cache.len;
        if pos >= self.config.context_length {
            return Err(Error::TooLong { len: pos + 1, limit: self.config.context_length });
        }
        let s = &self.store;
        let d = self.config.model_dim;
        let te = &s.get(self.tok_emb).value[id * d..(id + 1) * d];
        let pe = &s.get(self.pos_emb).value[pos * d..(pos + 1) * d];
        let mut x: Vec<f32> = te.iter().zip(pe).map(|(a, b)| a + b).collect();
        for (li, b) in self.blocks.iter().enumerate() {
            let h = layer_norm(s, &b.ln1, &x);
            let qkv = linear(s, &b.qkv, &h);
            cache.keys[li].extend_from_slice(&qkv[d..2 * d]);
            cache.values[li].extend_from_slice(&qkv[2 * d..]);
            let (keys, values) = (&cache.keys[li], &cache.values[li]);
            let dh = d / b.heads;
            let scale = 1.0 / (dh as f32).sqrt();
            let mut attn = vec![0.0f32; d];
            let mut scores = vec![0.0f32; pos + 1];
            for hd in 0..b.heads {
                let q = &qkv[hd * dh..(hd + 1) * dh];
                for (j, sc) in scores.iter_mut().enumerate() {
                    let k = &keys[j * d + hd * dh..j * d + (hd + 1) * dh];
                    *sc = scale * q.iter().zip(k).map(|(a, b)| a * b).sum::<f32>();
                }
                softmax_in_place(&mut scores);
                let out = &mut attn[hd * dh..(hd + 1) * dh];
                for (j, &p) in scores.iter().enumerate() {
                    let v = &values[j * d + hd * dh..j * d + (hd + 1) * dh];
                    out.iter_mut().zip(v).for_each(|(o, &v)| *o += p * v);
                }
            }
            let a = linear(s, &b.proj, &attn);
            x.iter_mut().zip(&a).for_each(|(x, a)| *x += a);
            let h = layer_norm(s, &b.ln2, &x);
            let h: Vec<f32> = linear(s, &b.fc, &h).into_iter().map(gelu_fwd).collect();
            let h = linear(s, &b.fc_out, &h);
            x.iter_mut().zip(&h).for_each(|(x, h)| *x += h);
        }
        cache.len += 1;
        let h = layer_norm(s, &self.ln_f, &x);
        Ok(linear(s, &self.head, &h))
    }

    /// Feeds a prefix and returns the logits after its last token.
    fn prefill(&self, cache: &mut KvCache, ids: &[usize]) -> Result<Vec<f32>> {
        let mut last = Vec::new();
        for &id in ids {
            last = self.step(cache, id)?;
        }
        Ok(last)
    }

    /// Language2Motion decoding: geometry tokens until `MOT_END`, the
    /// 150-token cap or `params.max_new_tokens`. `MOT_END` is suppressed until
    /// `min_tokens` tokens exist.
    pub fn generate_tokens(&self, vocab: &Vocabulary, prompt: &str, params: &GenerationParams, min_tokens: usize) -> Result<Vec<usize>> {
        if self.kind != LmKind::L2m {
            return Err(Error::InvalidArgument("generation needs an l2m model".into()));
        }
        params.validate()?;
        let prefix = l2m_prefix(vocab, prompt)?;
        let room = self.config.context_length.saturating_sub(prefix.len());
        let cap = params.max_new_tokens.min(MAX_MOTION_TOKENS).min(room);
        let k = vocab.k_geometry();
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut cache = self.new_cache();
        let mut logits = self.prefill(&mut cache, &prefix)?;
        let mut out = Vec::new();
        while out.len() < cap {
            let allow_end = out.len() >= min_tokens;
            let next = sample_index(&logits, |i| i < k || allow_end, params, &mut rng);
            if next == k {
                break;
            }
            out.push(next);
            if out.len() < cap {
                logits = self.step(&mut cache, vocab.geometry_id(next)?)?;
            }
        }
        Ok(out)
    }

    /// Generates geometry tokens for `prompt` and decodes them to frames.
    pub fn generate_motion(
        &self,
        vocab: &Vocabulary,
        vqvae: &Vqvae,
        prompt: &str,
        params: &GenerationParams,
    ) -> Result<(GeometryTokenSequence, MotionSequence)> {
        let tokens = self.generate_tokens(vocab, prompt, params, vqvae.config.kernel_width)?;
        let motion = vqvae.detokenize(&tokens)?;
        Ok((GeometryTokenSequence { tokens }, motion))
    }

    /// Motion2Language decoding restricted to text ids and `EOS`.
    pub fn describe(&self, vocab: &Vocabulary, tokens: &[usize], question: &str, params: &GenerationParams) -> Result<String> {
        Ok(vocab.decode_text(&self.describe_ids(vocab, tokens, question, params)?)?)
    }

    /// Like [`MotionLm::describe`] but returns the raw generated ids.
    pub fn describe_ids(&self, vocab: &Vocabulary, tokens: &[usize], question: &str, params: &GenerationParams) -> Result<Vec<usize>> {
        if self.kind != LmKind::M2l {
            return Err(Error::InvalidArgument("describe needs an m2l model".into()));
        }
        params.validate()?;
        let prefix = m2l_prefix(vocab, tokens, question)?;
        let room = self.config.context_length.saturating_sub(prefix.len());
        if room == 0 {
            return Err(Error::TooLong { len: prefix.len(), limit: self.config.context_length });
        }
        let cap = params.max_new_tokens.min(room);
        let text_end = vocab.text_size();
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut cache = self.new_cache();
        let mut logits = self.prefill(&mut cache, &prefix)?;
        let mut out = Vec::new();
        while out.len() < cap {
            let next = sample_index(&logits, |i| i == EOS || (FIRST_TEXT_ID..text_end).contains(&i), params, &mut rng);
            if next == EOS {
                break;
            }
            out.push(next);
            if out.len() < cap {
                logits = self.step(&mut cache, next)?;
            }
        }
        Ok(out)
    }
}
