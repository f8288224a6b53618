//! Contrastive dual encoder over (prompt, geometry tokens) pairs.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion_lm::TextMotionPair;
use crate::nn::layers::{Linear, INIT_STD};
use crate::nn::{segments, AdamState, Graph, ParamId, ParamStore, Var};
use crate::text_codec::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub temperature: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig { hidden_dim: 512, embed_dim: 64, temperature: 0.07, lr: 1e-3, batch_size: 64, epochs: 40, seed: 29 }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.hidden_dim == 0 || self.embed_dim == 0 {
            errs.push("retrieval dims must be positive".into());
        }
        if !(self.temperature > 0.0) {
            errs.push(format!("retrieval.temperature must be positive, got {}", self.temperature));
        }
        if !(self.lr > 0.0) {
            errs.push(format!("retrieval.lr must be positive, got {}", self.lr));
        }
        if self.batch_size < 2 {
            errs.push("retrieval.batch_size must be at least 2".into());
        }
        errs
    }
}

#[derive(Debug, Clone, Copy)]
struct Tower {
    table: ParamId,
    fc1: Linear,
    fc2: Linear,
}

impl Tower {
    fn new(store: &mut ParamStore<f32>, name: &str, vocab: usize, c: &RetrievalConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let table = store.add_normal(format!("{name}.emb"), &[vocab, c.hidden_dim], 1.0, rng)?;
        let fc1 = Linear::new(store, &format!("{name}.fc1"), c.hidden_dim, c.hidden_dim, rng)?;
        let fc2 = Linear::new(store, &format!("{name}.fc2"), c.hidden_dim, c.embed_dim, rng)?;
        for l in [fc1, fc2] {
            let w = &mut store.get_mut(l.weight).value;
            let s = (1.0 / (l.in_dim as f64).sqrt() / INIT_STD) as f32;
            w.iter_mut().for_each(|v| *v *= s);
        }
        Ok(Tower { table, fc1, fc2 })
    }

    /// Unit-norm embeddings, one row per id list.
    fn forward(&self, g: &mut Graph<'_, f32>, items: &[&[usize]]) -> Result<Var> {
        if let Some(i) = items.iter().position(|ids| ids.is_empty()) {
            return Err(Error::InvalidArgument(format!("retrieval item {i} has no tokens")));
        }
        let lens: Vec<usize> = items.iter().map(|ids| ids.len()).collect();
        let flat: Vec<usize> = items.iter().flat_map(|ids| ids.iter().copied()).collect();
        let t = g.param(self.table);
        let e = g.embedding(t, &flat)?;
        let pooled = g.mean_rows(e, &segments(&lens))?;
        let h = self.fc1.forward(g, pooled)?;
        let h = g.gelu(h);
        let out = self.fc2.forward(g, h)?;
        Ok(g.normalize_rows(out))
    }
}

/// Text tower over word ids, motion tower over geometry tokens.
#[derive(Debug, Clone)]
pub struct RetrievalModel {
    pub config: RetrievalConfig,
    pub store: ParamStore<f32>,
    text: Tower,
    motion: Tower,
    text_vocab: usize,
}

impl RetrievalModel {
    pub fn new(config: RetrievalConfig, vocab: &Vocabulary) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let text = Tower::new(&mut store, "retrieval.text", vocab.text_size(), &config, &mut rng)?;
        let motion = Tower::new(&mut store, "retrieval.motion", vocab.k_geometry(), &config, &mut rng)?;
        Ok(RetrievalModel { config, store, text, motion, text_vocab: vocab.text_size() })
    }

    /// Rebuilds the model around loaded tensors.
    pub fn from_store(config: RetrievalConfig, vocab: &Vocabulary, loaded: &ParamStore<f32>) -> Result<Self> {
        let mut model = RetrievalModel::new(config, vocab)?;
        let names: Vec<String> = model.store.iter().map(|p| p.name.clone()).collect();
        for name in names {
            let id = loaded.id(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            let src = loaded.get(id);
            model.store.set(&name, &src.shape, src.value.clone())?;
        }
        Ok(model)
    }

    fn text_ids(&self, vocab: &Vocabulary, text: &str) -> Vec<usize> {
        vocab.encode_text(text).into_iter().filter(|&i| i < self.text_vocab).collect()
    }

    pub fn embed_texts(&self, vocab: &Vocabulary, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let ids: Vec<Vec<usize>> = texts.iter().map(|t| self.text_ids(vocab, t)).collect();
        self.embed(&self.text, &ids)
    }

    pub fn embed_motions(&self, tokens: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        let ids: Vec<Vec<usize>> = tokens.iter().map(|t| t.to_vec()).collect();
        self.embed(&self.motion, &ids)
    }

    fn embed(&self, tower: &Tower, ids: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(ids.len());
        for chunk in ids.chunks(64) {
            let items: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
            let mut g = Graph::with_params(&self.store);
            let e = tower.forward(&mut g, &items)?;
            out.extend(g.value(e).chunks(self.config.embed_dim).map(|r| r.iter().map(|&v| v as f64).collect()));
        }
        Ok(out)
    }
}

/// Retrieval quality averaged over both directions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    #[serde(rename = "R@1")]
    pub r1: f64,
    #[serde(rename = "R@5")]
    pub r5: f64,
    #[serde(rename = "R@10")]
    pub r10: f64,
    pub median_rank: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Ranks every motion among all texts and every text among all motions by
/// dot product, so inputs are expected unit-norm. Pair `i` is the match.
/// Ties count against the true match.
pub fn rank_metrics(texts: &[Vec<f64>], motions: &[Vec<f64>]) -> Result<RetrievalMetrics> {
    let n = texts.len();
    if n == 0 || motions.len() != n {
        return Err(Error::shape("retrieval", format!("{n} texts for {} motions", motions.len())));
    }
    let sim: Vec<Vec<f64>> = texts.iter().map(|t| motions.iter().map(|m| dot(t, m)).collect()).collect();
    let mut ranks = Vec::with_capacity(2 * n);
    for i in 0..n {
        let own = sim[i][i];
        ranks.push(1 + (0..n).filter(|&j| j != i && sim[i][j] >= own).count());
        ranks.push(1 + (0..n).filter(|&j| j != i && sim[j][i] >= own).count());
    }
    let frac = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64;
    let (r1, r5, r10) = (frac(1), frac(5), frac(10));
    ranks.sort_unstable();
    let m = ranks.len();
    let median = if m % 2 == 1 { ranks[m / 2] as f64 } else { (ranks[m / 2 - 1] + ranks[m / 2]) as f64 / 2.0 };
    Ok(RetrievalMetrics { r1, r5, r10, median_rank: median })
}

pub struct RetrievalTrainer {
    adam: AdamState<f32>,
    rng: ChaCha8Rng,
    pub step: usize,
}

impl RetrievalTrainer {
    pub fn new(model: &RetrievalModel) -> Self {
        RetrievalTrainer {
            adam: AdamState::new(&model.store, model.config.lr),
            rng: ChaCha8Rng::seed_from_u64(model.config.seed ^ 0x5151),
            step: 0,
        }
    }

    /// Symmetric InfoNCE over one batch of aligned (text, motion) pairs.
    pub fn train_step(&mut self, model: &mut RetrievalModel, texts: &[Vec<usize>], motions: &[&[usize]]) -> Result<f64> {
        let n = texts.len();
        if n < 2 || motions.len() != n {
            return Err(Error::InvalidArgument(format!("contrastive batch needs >= 2 aligned pairs, got {n}/{}", motions.len())));
        }
        let inv_t = 1.0 / model.config.temperature;
        let (grads, loss) = {
            let mut g = Graph::with_params(&model.store);
            let items: Vec<&[usize]> = texts.iter().map(Vec::as_slice).collect();
            let t = model.text.forward(&mut g, &items)?;
            let m = model.motion.forward(&mut g, motions)?;
            let diag: Vec<usize> = (0..n).collect();
            let all = vec![true; n];
            let st = g.matmul_t(t, m, false, true)?;
            let st = g.scale(st, inv_t);
            let lt = g.cross_entropy(st, &diag, &all)?;
            let sm = g.matmul_t(m, t, false, true)?;
            let sm = g.scale(sm, inv_t);
            let lm = g.cross_entropy(sm, &diag, &all)?;
            let sum = g.add(lt, lm)?;
            let loss = g.scale(sum, 0.5);
            let v = g.scalar(loss) as f64;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("retrieval loss at step {}", self.step)));
            }
            (g.backward(loss)?, v)
        };
        model.store.accumulate(&grads);
        self.adam.step(&mut model.store)?;
        model.store.zero_grad();
        self.step += 1;
        Ok(loss)
    }

    /// Trains for `model.config.epochs` passes, drawing one phrasing per pair
    /// per epoch. Returns the per-step loss trace.
    pub fn fit(&mut self, model: &mut RetrievalModel, vocab: &Vocabulary, pairs: &[TextMotionPair]) -> Result<Vec<f64>> {
        if pairs.len() < 2 {
            return Err(Error::InvalidArgument("retrieval training needs at least two pairs".into()));
        }
        let mut trace = Vec::new();
        let bs = model.config.batch_size;
        for _ in 0..model.config.epochs {
            let mut order: Vec<usize> = (0..pairs.len()).collect();
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(bs).filter(|c| c.len() >= 2) {
                let labels = chunk.iter().map(|&i| &pairs[i].label);
                if chunk.len() > 1 && labels.clone().all(|l| l == &pairs[chunk[0]].label) {
                    log::warn!("retrieval batch at step {} holds a single label", self.step);
                }
                let texts: Vec<Vec<usize>> = chunk
                    .iter()
                    .map(|&i| {
                        let t = pairs[i].texts.choose(&mut self.rng).map(String::as_str).unwrap_or("");
                        model.text_ids(vocab, t)
                    })
                    .collect();
                let motions: Vec<&[usize]> = chunk.iter().map(|&i| pairs[i].tokens.as_slice()).collect();
                trace.push(self.train_step(model, &texts, &motions)?);
            }
        }
        Ok(trace)
    }
}
