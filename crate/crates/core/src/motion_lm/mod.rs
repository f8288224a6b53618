//! Decoder-only transformers over the joint text + geometry vocabulary.
//!
//! Two models share one architecture. Motion2Language reads
//! `[BOS, MOT_BEGIN, g…, MOT_END, SEP, question, SEP]` and writes a
//! description ending in `EOS`; its head spans the whole vocabulary.
//! Language2Motion reads `[BOS, prompt, SEP, MOT_BEGIN]` and writes geometry
//! tokens ending in `MOT_END` through a separate head with `K + 1` outputs,
//! so the text rows of the embedding table are never asked to predict motion.

mod infer;

use std::rc::Rc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{Block, LayerNorm, Linear, INIT_STD};
use crate::nn::{AdamState, Graph, ParamId, ParamStore, Segments, Var};
use crate::text_codec::{Vocabulary, BOS, EOS, MOT_BEGIN, MOT_END, QUESTIONS, SEP};

pub use infer::{GenerationParams, KvCache};

/// Hard cap on generated motion length, in tokens (one per frame).
pub const MAX_MOTION_TOKENS: usize = 150;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub context_length: usize,
    pub dropout: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig { layers: 4, heads: 4, model_dim: 128, context_length: 320, dropout: 0.0 }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.layers == 0 {
            errs.push("transformer.layers must be at least 1".into());
        }
        if self.heads == 0 || self.model_dim == 0 || self.model_dim % self.heads != 0 {
            errs.push(format!("transformer.model_dim {} must be a positive multiple of heads {}", self.model_dim, self.heads));
        }
        if self.context_length < MAX_MOTION_TOKENS + 8 {
            errs.push(format!("transformer.context_length {} leaves no room for a {MAX_MOTION_TOKENS}-token motion", self.context_length));
        }
        if self.dropout != 0.0 {
            errs.push("transformer.dropout is not supported; set it to 0".into());
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Final learning rate as a fraction of `lr` under cosine decay.
    pub lr_floor: f64,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig { lr: 3e-4, batch_size: 32, epochs: 20, lr_floor: 0.1, seed: 23 }
    }
}

impl LmTrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push(format!("training.lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            errs.push("training.batch_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            errs.push(format!("training.lr_floor must lie in [0, 1], got {}", self.lr_floor));
        }
        errs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LmKind {
    M2l,
    L2m,
}

impl LmKind {
    pub fn prefix(self) -> &'static str {
        match self {
            LmKind::M2l => "m2l",
            LmKind::L2m => "l2m",
        }
    }
}

/// One packed training or evaluation sequence. `targets[i]` is the head
/// index expected after reading `inputs[..=i]`; only rows with `mask[i]`
/// contribute to loss and accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Instance {
    fn from_ids(ids: &[usize], loss_from: usize, head_index: impl Fn(usize) -> usize) -> Instance {
        let n = ids.len() - 1;
        Instance {
            inputs: ids[..n].to_vec(),
            targets: ids[1..].iter().map(|&t| head_index(t)).collect(),
            mask: (0..n).map(|i| i + 1 >= loss_from).collect(),
        }
    }

    pub fn masked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn geometry_ids(vocab: &Vocabulary, tokens: &[usize]) -> Result<Vec<usize>> {
    tokens.iter().map(|&t| vocab.geometry_id(t)).collect()
}

/// `[BOS, MOT_BEGIN, g…, MOT_END, SEP, question, SEP]`
pub fn m2l_prefix(vocab: &Vocabulary, tokens: &[usize], question: &str) -> Result<Vec<usize>> {
    if tokens.len() > MAX_MOTION_TOKENS {
        return Err(Error::TooLong { len: tokens.len(), limit: MAX_MOTION_TOKENS });
    }
    let mut ids = vec![BOS, MOT_BEGIN];
    ids.extend(geometry_ids(vocab, tokens)?);
    ids.extend([MOT_END, SEP]);
    ids.extend(vocab.encode_text(question));
    ids.push(SEP);
    Ok(ids)
}

/// Motion2Language instance; loss covers the answer words and `EOS`.
pub fn m2l_instance(vocab: &Vocabulary, tokens: &[usize], question: &str, answer: &str) -> Result<Instance> {
    let mut ids = m2l_prefix(vocab, tokens, question)?;
    let answer_start = ids.len();
    let answer_ids = vocab.encode_text(answer);
    if answer_ids.is_empty() {
        return Err(Error::InvalidArgument("empty answer".into()));
    }
    ids.extend(answer_ids);
    ids.push(EOS);
    Ok(Instance::from_ids(&ids, answer_start, |t| t))
}

/// `[BOS, prompt, SEP, MOT_BEGIN]`
pub fn l2m_prefix(vocab: &Vocabulary, prompt: &str) -> Result<Vec<usize>> {
    let words = vocab.encode_text(prompt);
    if words.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    let mut ids = vec![BOS];
    ids.extend(words);
    ids.extend([SEP, MOT_BEGIN]);
    Ok(ids)
}

/// Language2Motion instance; loss covers the geometry tokens and `MOT_END`,
/// with targets expressed in head space (`k` for token `k`, `K` for MOT_END).
pub fn l2m_instance(vocab: &Vocabulary, prompt: &str, tokens: &[usize]) -> Result<Instance> {
    if tokens.len() > MAX_MOTION_TOKENS {
        return Err(Error::TooLong { len: tokens.len(), limit: MAX_MOTION_TOKENS });
    }
    let mut ids = l2m_prefix(vocab, prompt)?;
    let motion_start = ids.len();
    ids.extend(geometry_ids(vocab, tokens)?);
    ids.push(MOT_END);
    let k = vocab.k_geometry();
    Ok(Instance::from_ids(&ids, motion_start, |t| vocab.as_geometry(t).unwrap_or(if t == MOT_END { k } else { t })))
}

/// A clip's geometry tokens with every phrasing of its description.
/// `label` is only used for diagnostics (retrieval warns on single-label
/// batches).
#[derive(Debug, Clone, PartialEq)]
pub struct TextMotionPair {
    pub tokens: Vec<usize>,
    pub texts: Vec<String>,
    pub label: String,
}

/// Decoder-only transformer with learned absolute positions.
#[derive(Debug, Clone)]
pub struct MotionLm {
    pub kind: LmKind,
    pub config: TransformerConfig,
    pub vocab_size: usize,
    pub head_size: usize,
    pub store: ParamStore<f32>,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

impl MotionLm {
    pub fn new(kind: LmKind, config: TransformerConfig, vocab: &Vocabulary, seed: u64) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let p = kind.prefix();
        let d = config.model_dim;
        let vocab_size = vocab.size();
        let head_size = match kind {
            LmKind::M2l => vocab_size,
            LmKind::L2m => vocab.k_geometry() + 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let tok_emb = store.add_normal(format!("{p}.tok_emb"), &[vocab_size, d], INIT_STD, &mut rng)?;
        let pos_emb = store.add_normal(format!("{p}.pos_emb"), &[config.context_length, d], INIT_STD, &mut rng)?;
        let blocks = (0..config.layers)
            .map(|i| Block::new(&mut store, &format!("{p}.block{i}"), d, config.heads, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(&mut store, &format!("{p}.ln_f"), d)?;
        let head = Linear::new(&mut store, &format!("{p}.head"), d, head_size, &mut rng)?;
        Ok(MotionLm { kind, config, vocab_size, head_size, store, tok_emb, pos_emb, blocks, ln_f, head })
    }

    /// Rebuilds a model around loaded tensors. Every expected tensor must be
    /// present with its expected shape; extra tensors are ignored.
    pub fn from_store(kind: LmKind, config: TransformerConfig, vocab: &Vocabulary, loaded: &ParamStore<f32>) -> Result<Self> {
        let mut model = MotionLm::new(kind, config, vocab, 0)?;
        let names: Vec<(String, Vec<usize>)> = model.store.iter().map(|p| (p.name.clone(), p.shape.clone())).collect();
        for (name, shape) in names {
            let id = loaded.id(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            let src = loaded.get(id);
            model.store.set(&name, &src.shape, src.value.clone()).map_err(|_| {
                Error::shape("checkpoint", format!("{name}: expected {shape:?}, found {:?}", src.shape))
            })?;
        }
        Ok(model)
    }

    pub fn max_len(&self) -> usize {
        self.config.context_length
    }

    /// Hidden states after the final layer norm for a packed batch.
    fn hidden(&self, g: &mut Graph<'_, f32>, inputs: &[usize], segs: &Segments) -> Result<Var> {
        let mut positions = Vec::with_capacity(inputs.len());
        for &(_, len) in segs.iter() {
            if len > self.config.context_length {
                return Err(Error::TooLong { len, limit: self.config.context_length });
            }
            positions.extend(0..len);
        }
        let tok = g.param(self.tok_emb);
        let pos = g.param(self.pos_emb);
        let te = g.embedding(tok, inputs)?;
        let pe = g.embedding(pos, &positions)?;
        let mut x = g.add(te, pe)?;
        for b in &self.blocks {
            x = b.forward(g, x, segs)?;
        }
        self.ln_f.forward(g, x)
    }

    /// Head logits for the masked rows of a batch, in batch order.
    fn masked_logits(&self, g: &mut Graph<'_, f32>, batch: &[&Instance]) -> Result<(Var, Vec<usize>)> {
        let lens: Vec<usize> = batch.iter().map(|i| i.inputs.len()).collect();
        let segs = crate::nn::segments(&lens);
        let inputs: Vec<usize> = batch.iter().flat_map(|i| i.inputs.iter().copied()).collect();
        let h = self.hidden(g, &inputs, &segs)?;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut off = 0;
        for inst in batch {
            for (i, (&m, &t)) in inst.mask.iter().zip(&inst.targets).enumerate() {
                if m {
                    rows.push(off + i);
                    targets.push(t);
                }
            }
            off += inst.inputs.len();
        }
        let picked = g.gather_rows(h, &rows)?;
        Ok((self.head.forward(g, picked)?, targets))
    }

    /// Full logits `[rows, head_size]` for every position of one sequence.
    pub fn logits(&self, inputs: &[usize]) -> Result<Vec<f32>> {
        let mut g = Graph::with_params(&self.store);
        let segs: Segments = Rc::from(vec![(0, inputs.len())]);
        let h = self.hidden(&mut g, inputs, &segs)?;
        let out = self.head.forward(&mut g, h)?;
        Ok(g.value(out).to_vec())
    }

    /// Mean masked cross entropy over a batch, without updating anything.
    pub fn loss(&self, batch: &[&Instance]) -> Result<f64> {
        let mut g = Graph::with_params(&self.store);
        let (logits, targets) = self.masked_logits(&mut g, batch)?;
        let all = vec![true; targets.len()];
        let l = g.cross_entropy(logits, &targets, &all)?;
        Ok(g.scalar(l) as f64)
    }

    /// Fraction of masked positions whose argmax logit equals the target.
    pub fn teacher_forced_accuracy(&self, instances: &[Instance]) -> Result<f64> {
        let (mut hit, mut total) = (0usize, 0usize);
        for chunk in instances.chunks(16) {
            let batch: Vec<&Instance> = chunk.iter().collect();
            let mut g = Graph::with_params(&self.store);
            let (logits, targets) = self.masked_logits(&mut g, &batch)?;
            for (row, &t) in g.value(logits).chunks(self.head_size).zip(&targets) {
                hit += (argmax(row) == t) as usize;
                total += 1;
            }
        }
        Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
    }
}

/// Lowest index among the maxima.
pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Adam state plus the shuffling stream for one training run.
pub struct LmTrainer {
    pub config: LmTrainConfig,
    pub adam: AdamState<f32>,
    pub rng: ChaCha8Rng,
    pub step: usize,
    pub skipped: usize,
}

impl LmTrainer {
    pub fn new(model: &MotionLm, config: LmTrainConfig) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        Ok(LmTrainer {
            adam: AdamState::new(&model.store, config.lr),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            step: 0,
            skipped: 0,
        })
    }

    /// One optimizer step on `batch`; returns the loss before the update.
    pub fn train_step(&mut self, model: &mut MotionLm, batch: &[&Instance]) -> Result<f64> {
        let (grads, loss) = {
            let mut g = Graph::with_params(&model.store);
            let (logits, targets) = model.masked_logits(&mut g, batch)?;
            let all = vec![true; targets.len()];
            let l = g.cross_entropy(logits, &targets, &all)?;
            let loss = g.scalar(l) as f64;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("{} loss at step {}", model.kind.prefix(), self.step)));
            }
            (g.backward(l)?, loss)
        };
        model.store.accumulate(&grads);
        self.adam.step(&mut model.store)?;
        model.store.zero_grad();
        self.step += 1;
        Ok(loss)
    }

    fn keep(&mut self, model: &MotionLm, inst: Result<Instance>) -> Result<Option<Instance>> {
        match inst {
            Ok(i) if i.inputs.len() <= model.max_len() && i.masked() > 0 => Ok(Some(i)),
            Ok(_) | Err(Error::TooLong { .. }) => {
                self.skipped += 1;
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    /// Runs `epochs` passes. `build` turns one pair into an instance and is
    /// called afresh every epoch so phrasings can be re-drawn.
    fn run(
        &mut self,
        model: &mut MotionLm,
        pairs: &[TextMotionPair],
        mut build: impl FnMut(&TextMotionPair, &mut ChaCha8Rng) -> Result<Instance>,
        on_step: &mut dyn FnMut(&MotionLm, usize, f64),
    ) -> Result<Vec<f64>> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("no training pairs".into()));
        }
        let epochs = self.config.epochs;
        let bs = self.config.batch_size;
        let total = epochs * pairs.len().div_ceil(bs);
        let mut trace = Vec::with_capacity(total);
        for _ in 0..epochs {
            let mut epoch = Vec::with_capacity(pairs.len());
            for p in pairs {
                let inst = build(p, &mut self.rng);
                if let Some(i) = self.keep(model, inst)? {
                    epoch.push(i);
                }
            }
            epoch.shuffle(&mut self.rng);
            for chunk in epoch.chunks(bs) {
                self.adam.lr = cosine_lr(self.config.lr, self.config.lr_floor, trace.len(), total);
                let batch: Vec<&Instance> = chunk.iter().collect();
                let loss = self.train_step(model, &batch)?;
                on_step(model, self.step, loss);
                trace.push(loss);
            }
        }
        if self.skipped > 0 {
            log::warn!("{}: skipped {} instances that overflow the context", model.kind.prefix(), self.skipped);
        }
        Ok(trace)
    }
}

fn cosine_lr(base: f64, floor_frac: f64, step: usize, total: usize) -> f64 {
    let floor = floor_frac * base;
    let frac = step as f64 / total.max(1) as f64;
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * frac).cos())
}

fn pick<'a, R: Rng + ?Sized>(texts: &'a [String], rng: &mut R) -> Result<&'a str> {
    texts.choose(rng).map(String::as_str).ok_or_else(|| Error::InvalidArgument("pair without any text".into()))
}

/// Trains Motion2Language. Each epoch pairs every clip with a uniformly drawn
/// question and a uniformly drawn phrasing of its description. `on_step`
/// sees the updated model, the step count and the pre-update loss.
pub fn train_m2l(
    model: &mut MotionLm,
    trainer: &mut LmTrainer,
    vocab: &Vocabulary,
    pairs: &[TextMotionPair],
    mut on_step: impl FnMut(&MotionLm, usize, f64),
) -> Result<Vec<f64>> {
    if model.kind != LmKind::M2l {
        return Err(Error::InvalidArgument("train_m2l needs an m2l model".into()));
    }
    trainer.run(
        model,
        pairs,
        |p, rng| {
            let q = QUESTIONS[rng.random_range(0..QUESTIONS.len())];
            let a = pick(&p.texts, rng)?;
            m2l_instance(vocab, &p.tokens, q, a)
        },
        &mut on_step,
    )
}

/// Trains Language2Motion. Each epoch conditions every clip on a uniformly
/// drawn phrasing of its prompt.
pub fn train_l2m(
    model: &mut MotionLm,
    trainer: &mut LmTrainer,
    vocab: &Vocabulary,
    pairs: &[TextMotionPair],
    mut on_step: impl FnMut(&MotionLm, usize, f64),
) -> Result<Vec<f64>> {
    if model.kind != LmKind::L2m {
        return Err(Error::InvalidArgument("train_l2m needs an l2m model".into()));
    }
    trainer.run(model, pairs, |p, rng| l2m_instance(vocab, pick(&p.texts, rng)?, &p.tokens), &mut on_step)
}

/// Greedy free-running accuracy: the fraction of ground-truth positions
/// matched by the generated sequence at the same index.
pub fn free_running_accuracy(model: &MotionLm, vocab: &Vocabulary, prompts: &[(&str, &[usize])]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    let params = GenerationParams::greedy();
    for (prompt, gt) in prompts {
        let out = model.generate_tokens(vocab, prompt, &params, 1)?;
        hit += gt.iter().zip(&out).filter(|(a, b)| a == b).count();
        total += gt.len();
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

#[cfg(test)]
mod tests;
