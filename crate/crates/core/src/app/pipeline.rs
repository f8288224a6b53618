//! Stage drivers shared by the CLI, the service and the acceptance suite.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{self, face_model_hash, vqvae_from_checkpoint, vqvae_store, CheckpointMeta, Stage, CHECKPOINT_VERSION};
use super::config::RunConfig;
use crate::corpus::synth::peak_expression_norm;
use crate::corpus::{self, build_lexicon, Corpus, Lexicon, Split};
use crate::error::{Error, Result};
use crate::eval_suite::{
    clip_features, export_embeddings, frechet_distance, keyword_correctness, l2_metric, rank_metrics, silhouette, EmbeddingRow,
    EvalCounts, EvalReport, KeywordAccuracy, RetrievalModel, RetrievalTrainer,
};
use crate::face_model::{mesh_l1, FaceModel, MotionSequence};
use crate::motion_lm::{
    free_running_accuracy, l2m_instance, train_l2m, train_m2l, GenerationParams, Instance, LmKind, LmTrainer, MotionLm, TextMotionPair,
    TransformerConfig,
};
use crate::text_codec::{Field, KeywordMap, Keywords, Vocabulary, QUESTIONS};
use crate::vqvae::{mean_frame, Vqvae, VqvaeTrainer};

/// Token cache written next to the VQ-VAE checkpoint.
pub const TOKENS_FILE: &str = "tokens.json";

/// Random sequences used by the detokenize/tokenize fixpoint check.
const FIXPOINT_SEQUENCES: usize = 100;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// Reconstruction quality of a trained VQ-VAE on held-out clips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqQuality {
    /// Mean per-frame mesh L1 with the full pose applied.
    pub mesh_l1: f64,
    /// Same measure for the constant mean training frame.
    pub baseline_mesh_l1: f64,
    pub ratio: f64,
    pub codebook_usage: f64,
    /// Fraction of latents whose token is the exhaustive nearest code.
    pub nn_optimal: f64,
    /// Token agreement of tokenize(detokenize(t)) with t.
    pub fixpoint: f64,
    pub clips: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalControls {
    /// FD of frame-shuffled held-out clips against the held-out set.
    pub fd_shuffled: f64,
    pub silhouette_shuffled: f64,
    /// Fraction of prompt pairs whose "intensely" variant peaks higher than
    /// the "slightly" variant.
    pub intensity_monotonic: f64,
    /// Keyword accuracy when describing ground-truth tokens.
    pub describe_real: KeywordAccuracy,
    pub chance_tok: f64,
    pub chance_r1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub controls: EvalControls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub model_dim: usize,
    pub step: usize,
    pub accuracy: f64,
}

/// Frozen models for generation and description.
#[derive(Debug, Clone)]
pub struct InferenceModels {
    pub face: FaceModel,
    pub lexicon: Lexicon,
    pub keywords: KeywordMap,
    pub vocab: Vocabulary,
    pub vqvae: Vqvae,
    pub l2m: MotionLm,
    pub m2l: MotionLm,
}

impl InferenceModels {
    pub fn generate(&self, prompt: &str, params: &GenerationParams) -> Result<(Vec<usize>, MotionSequence)> {
        let (tokens, motion) = self.l2m.generate_motion(&self.vocab, &self.vqvae, prompt, params)?;
        Ok((tokens.tokens, motion))
    }

    pub fn describe_tokens(&self, tokens: &[usize], question: Option<&str>, params: &GenerationParams) -> Result<(String, Keywords)> {
        let text = self.m2l.describe(&self.vocab, tokens, question.unwrap_or(QUESTIONS[0]), params)?;
        let kw = self.keywords.extract_keywords(&text);
        Ok((text, kw))
    }

    pub fn describe_motion(&self, motion: &MotionSequence, question: Option<&str>, params: &GenerationParams) -> Result<(String, Keywords)> {
        let tokens = self.vqvae.tokenize(motion)?.tokens;
        self.describe_tokens(&tokens, question, params)
    }

    /// Flattened V×3 vertices per frame, narrowed to f32.
    pub fn vertices(&self, motion: &MotionSequence) -> Result<Vec<Vec<f32>>> {
        motion
            .frames()
            .iter()
            .map(|f| Ok(self.face.decode_mesh(f)?.vertices.iter().flat_map(|v| v.iter().map(|&x| x as f32)).collect()))
            .collect()
    }
}

/// Run configuration plus the derived face model and lexicon.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub cfg: RunConfig,
    pub face: FaceModel,
    pub lexicon: Lexicon,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let face = cfg.face_model.build()?;
        let lexicon = build_lexicon(cfg.face_model.expr_dim)?;
        Ok(Pipeline { cfg, face, lexicon })
    }

    pub fn out_dir(&self, command: &str) -> PathBuf {
        self.cfg.paths.out.join(command)
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::build(&self.lexicon, self.cfg.vqvae.model.codebook_size)
    }

    fn meta(&self, stage: Stage) -> CheckpointMeta {
        CheckpointMeta {
            version: CHECKPOINT_VERSION,
            stage,
            run_config: self.cfg.clone(),
            lexicon_hash: self.lexicon.hash(),
            face_model_hash: face_model_hash(&self.face),
        }
    }

    fn check_meta(&self, meta: &CheckpointMeta) -> Result<()> {
        let mismatch = |what: &str| Error::Corrupt {
            what: "checkpoint".into(),
            detail: format!("{} checkpoint was built with a different {what}", meta.stage.name()),
        };
        if meta.lexicon_hash != self.lexicon.hash() {
            return Err(mismatch("lexicon"));
        }
        if meta.face_model_hash != face_model_hash(&self.face) {
            return Err(mismatch("face model"));
        }
        Ok(())
    }

    pub fn generate_corpus(&self) -> Result<Corpus> {
        corpus::generate_corpus(&self.cfg.corpus, &self.face, &self.cfg.paths.corpus)
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        let dir = &self.cfg.paths.corpus;
        if !dir.join("manifest.json").is_file() {
            return Err(Error::MissingStage(format!("corpus not found at {}; run `corpus-gen` first", dir.display())));
        }
        let corpus = corpus::load_corpus(dir, None)?;
        let m = &corpus.manifest;
        let f = &self.cfg.face_model;
        if (m.face_model.seed, m.face_model.vertex_count, m.face_model.expr_dim) != (f.seed, f.vertex_count, f.expr_dim) {
            return Err(Error::Corrupt {
                what: "corpus".into(),
                detail: "corpus was generated with a different face model; rerun `corpus-gen`".into(),
            });
        }
        Ok(corpus)
    }

    /// Trains the VQ-VAE on the train split, saves it, and caches the token
    /// sequence of every clip.
    pub fn train_vqvae(&self, corpus: &Corpus, mut on_step: impl FnMut(usize, f64)) -> Result<Vqvae> {
        let train: Vec<&MotionSequence> = corpus.split(Split::Train).iter().map(|c| &c.motion).collect();
        let mut model = Vqvae::new(self.cfg.vqvae.model.clone(), self.cfg.face_model.expr_dim, &train)?;
        let mut trainer = VqvaeTrainer::new(&model, &self.face)?;
        trainer.fit(&mut model, &train, self.cfg.vqvae.steps, |s, l| on_step(s, l.total))?;
        let dir = Stage::Vqvae.dir(&self.cfg);
        checkpoint::save(&dir, &self.meta(Stage::Vqvae), &self.vocab(), &vqvae_store(&model)?)?;
        let all: Vec<&MotionSequence> = corpus.clips.iter().map(|c| &c.motion).collect();
        let tokens: BTreeMap<String, Vec<usize>> = corpus
            .clips
            .iter()
            .zip(model.tokenize_batch(&all)?)
            .map(|(c, t)| (c.prompt.clip_id.clone(), t.tokens))
            .collect();
        write_json(&dir.join(TOKENS_FILE), &tokens)?;
        Ok(model)
    }

    pub fn load_vqvae(&self) -> Result<Vqvae> {
        let ck = checkpoint::load(&Stage::Vqvae.dir(&self.cfg), Stage::Vqvae)?;
        self.check_meta(&ck.meta)?;
        vqvae_from_checkpoint(&ck)
    }

    pub fn load_tokens(&self) -> Result<BTreeMap<String, Vec<usize>>> {
        let path = Stage::Vqvae.dir(&self.cfg).join(TOKENS_FILE);
        if !path.is_file() {
            return Err(Error::MissingStage(format!("token cache {} not found; run `train-vqvae` first", path.display())));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// (tokens, prompt phrasings, emotion) for every clip of `split`.
    pub fn pairs(&self, corpus: &Corpus, tokens: &BTreeMap<String, Vec<usize>>, split: Split) -> Result<Vec<TextMotionPair>> {
        corpus
            .split(split)
            .into_iter()
            .map(|c| {
                let id = &c.prompt.clip_id;
                let t = tokens.get(id).ok_or_else(|| Error::Corrupt {
                    what: TOKENS_FILE.into(),
                    detail: format!("no tokens for clip {id}; rerun `train-vqvae`"),
                })?;
                let texts = std::iter::once(c.prompt.text.clone()).chain(c.prompt.paraphrases.iter().cloned()).collect();
                Ok(TextMotionPair { tokens: t.clone(), texts, label: c.prompt.labels.emotion.clone() })
            })
            .collect()
    }

    fn lm_stage(kind: LmKind) -> Stage {
        match kind {
            LmKind::M2l => Stage::M2l,
            LmKind::L2m => Stage::L2m,
        }
    }

    /// Trains Motion2Language or Language2Motion on the train split and saves
    /// it. Zero epochs saves the initialization.
    pub fn train_lm(&self, kind: LmKind, corpus: &Corpus, mut on_step: impl FnMut(usize, f64)) -> Result<(MotionLm, Vec<f64>)> {
        let stage_cfg = match kind {
            LmKind::M2l => &self.cfg.m2l,
            LmKind::L2m => &self.cfg.l2m,
        };
        // Fail on a missing tokenizer before spending time on anything else.
        self.load_vqvae()?;
        let tokens = self.load_tokens()?;
        let vocab = self.vocab();
        let pairs = self.pairs(corpus, &tokens, Split::Train)?;
        let mut model = MotionLm::new(kind, stage_cfg.transformer.clone(), &vocab, stage_cfg.training.seed)?;
        let mut trainer = LmTrainer::new(&model, stage_cfg.training.clone())?;
        let trace = match kind {
            LmKind::M2l => train_m2l(&mut model, &mut trainer, &vocab, &pairs, |_, s, l| on_step(s, l))?,
            LmKind::L2m => train_l2m(&mut model, &mut trainer, &vocab, &pairs, |_, s, l| on_step(s, l))?,
        };
        if trainer.skipped > 0 {
            log::warn!("{} training skipped {} over-long instances", kind.prefix(), trainer.skipped);
        }
        let stage = Self::lm_stage(kind);
        checkpoint::save(&stage.dir(&self.cfg), &self.meta(stage), &vocab, &model.store)?;
        Ok((model, trace))
    }

    /// Loads a language model using the architecture recorded in its own
    /// checkpoint.
    pub fn load_lm(&self, kind: LmKind) -> Result<(MotionLm, Vocabulary)> {
        let stage = Self::lm_stage(kind);
        let ck = checkpoint::load(&stage.dir(&self.cfg), stage)?;
        self.check_meta(&ck.meta)?;
        let arch = match kind {
            LmKind::M2l => ck.meta.run_config.m2l.transformer.clone(),
            LmKind::L2m => ck.meta.run_config.l2m.transformer.clone(),
        };
        let model = MotionLm::from_store(kind, arch, &ck.vocab, &ck.store)?;
        Ok((model, ck.vocab))
    }

    pub fn load_inference(&self) -> Result<InferenceModels> {
        let vqvae = self.load_vqvae()?;
        let (l2m, vocab) = self.load_lm(LmKind::L2m)?;
        let (m2l, m2l_vocab) = self.load_lm(LmKind::M2l)?;
        if m2l_vocab != vocab {
            return Err(Error::Corrupt { what: "checkpoint".into(), detail: "m2l and l2m vocabularies differ".into() });
        }
        if vocab.k_geometry() != vqvae.k() {
            return Err(Error::Corrupt {
                what: "checkpoint".into(),
                detail: format!("vocabulary has {} geometry tokens, codebook has {}", vocab.k_geometry(), vqvae.k()),
            });
        }
        Ok(InferenceModels {
            face: self.face.clone(),
            keywords: KeywordMap::from_lexicon(&self.lexicon)?,
            lexicon: self.lexicon.clone(),
            vocab,
            vqvae,
            l2m,
            m2l,
        })
    }

    /// Loads the retrieval model, training and saving it first when absent.
    pub fn retrieval_model(&self, corpus: &Corpus, tokens: &BTreeMap<String, Vec<usize>>) -> Result<RetrievalModel> {
        let dir = Stage::Retrieval.dir(&self.cfg);
        let vocab = self.vocab();
        if checkpoint::exists(&dir) {
            let ck = checkpoint::load(&dir, Stage::Retrieval)?;
            self.check_meta(&ck.meta)?;
            return RetrievalModel::from_store(ck.meta.run_config.retrieval.clone(), &ck.vocab, &ck.store);
        }
        let pairs = self.pairs(corpus, tokens, Split::Train)?;
        let mut model = RetrievalModel::new(self.cfg.retrieval.clone(), &vocab)?;
        let trace = RetrievalTrainer::new(&model).fit(&mut model, &vocab, &pairs)?;
        log::info!("retrieval: {} steps, final loss {:?}", trace.len(), trace.last());
        checkpoint::save(&dir, &self.meta(Stage::Retrieval), &vocab, &model.store)?;
        Ok(model)
    }

    pub fn vq_quality(&self, vqvae: &Vqvae, corpus: &Corpus) -> Result<VqQuality> {
        vq_quality(&self.face, vqvae, corpus, self.cfg.eval.seed)
    }

    /// Full evaluation on the test split.
    pub fn evaluate(&self, corpus: &Corpus) -> Result<EvalOutcome> {
        let models = self.load_inference()?;
        let tokens = self.load_tokens()?;
        let ev = &self.cfg.eval;
        let test = corpus.split(Split::Test);
        if test.is_empty() {
            return Err(Error::InvalidArgument("test split is empty".into()));
        }
        let test_pairs = self.pairs(corpus, &tokens, Split::Test)?;
        let vocab = &models.vocab;

        let instances: Vec<Instance> = test.iter().zip(&test_pairs).map(|(c, p)| l2m_instance(vocab, &c.prompt.text, &p.tokens)).collect::<Result<_>>()?;
        let tok_teacher_forced = models.l2m.teacher_forced_accuracy(&instances)?;
        let fr: Vec<(&str, &[usize])> = test
            .iter()
            .zip(&test_pairs)
            .take(ev.free_running_clips)
            .map(|(c, p)| (c.prompt.text.as_str(), p.tokens.as_slice()))
            .collect();
        let tok_free_running = free_running_accuracy(&models.l2m, vocab, &fr)?;
        log::info!("eval: teacher-forced {tok_teacher_forced:.4}, free-running {tok_free_running:.4}");

        let n_gen = ev.round_trip_prompts.min(test.len());
        let gen_params = |i: usize| GenerationParams { temperature: ev.temperature, top_k: ev.top_k, seed: ev.seed.wrapping_add(i as u64), ..GenerationParams::default() };
        let describe_params = GenerationParams::greedy();
        let mut generated = Vec::with_capacity(n_gen);
        let mut described = Vec::with_capacity(n_gen);
        let (mut expr_l2, mut pose_l2) = (0.0, 0.0);
        for (i, clip) in test.iter().take(n_gen).enumerate() {
            let (toks, motion) = models.generate(&clip.prompt.text, &gen_params(i))?;
            let (e, p) = l2_metric(&motion, &clip.motion)?;
            expr_l2 += e / n_gen as f64;
            pose_l2 += p / n_gen as f64;
            described.push(models.describe_tokens(&toks, None, &describe_params)?.1);
            generated.push(motion);
        }
        let truth: Vec<_> = test.iter().take(n_gen).map(|c| c.prompt.labels.clone()).collect();
        let keyword_acc = keyword_correctness(&described, &truth)?;
        let real_described: Vec<Keywords> =
            test_pairs.iter().take(n_gen).map(|p| Ok(models.describe_tokens(&p.tokens, None, &describe_params)?.1)).collect::<Result<_>>()?;
        let describe_real = keyword_correctness(&real_described, &truth)?;
        log::info!("eval: round trip {keyword_acc:?}, describe real {describe_real:?}");

        let real: Vec<&MotionSequence> = test.iter().map(|c| &c.motion).collect();
        let gen_refs: Vec<&MotionSequence> = generated.iter().collect();
        let real_feats = clip_features(&models.vqvae, &real)?;
        let fd = frechet_distance(&clip_features(&models.vqvae, &gen_refs)?, &real_feats)?;
        let mut rng = ChaCha8Rng::seed_from_u64(ev.seed ^ 0xf0f0);
        let shuffled = frame_shuffled(&real[..n_gen], &mut rng)?;
        let shuffled_refs: Vec<&MotionSequence> = shuffled.iter().collect();
        let fd_shuffled = frechet_distance(&clip_features(&models.vqvae, &shuffled_refs)?, &real_feats)?;
        log::info!("eval: fd {fd:.4} vs shuffled control {fd_shuffled:.4}");

        let pairs = intensity_pairs(&models.keywords, test.iter().map(|c| c.prompt.text.as_str()), ev.intensity_pairs);
        let mut monotone = 0usize;
        // Both prompts of a pair share a seed, so only the intensity word differs.
        for (i, (low, high)) in pairs.iter().enumerate() {
            let params = gen_params(n_gen + i);
            let (_, a) = models.generate(low, &params)?;
            let (_, b) = models.generate(high, &params)?;
            if peak_expression_norm(&b) > peak_expression_norm(&a) {
                monotone += 1;
            }
        }
        let intensity_monotonic = if pairs.is_empty() { 0.0 } else { monotone as f64 / pairs.len() as f64 };

        let retrieval_model = self.retrieval_model(corpus, &tokens)?;
        let n_ret = ev.retrieval_pairs.min(test.len());
        let texts: Vec<&str> = test.iter().take(n_ret).map(|c| c.prompt.text.as_str()).collect();
        let motions: Vec<&[usize]> = test_pairs.iter().take(n_ret).map(|p| p.tokens.as_slice()).collect();
        let retrieval = rank_metrics(&retrieval_model.embed_texts(vocab, &texts)?, &retrieval_model.embed_motions(&motions)?)?;
        let all_motions: Vec<&[usize]> = test_pairs.iter().map(|p| p.tokens.as_slice()).collect();
        let emb = retrieval_model.embed_motions(&all_motions)?;
        let labels: Vec<&str> = test_pairs.iter().map(|p| p.label.as_str()).collect();
        let sil = silhouette(&emb, &labels)?;
        let mut shuffled_labels = labels.clone();
        shuffled_labels.shuffle(&mut rng);
        let silhouette_shuffled = silhouette(&emb, &shuffled_labels)?;

        let report = EvalReport {
            expr_l2,
            pose_l2,
            fd,
            tok_teacher_forced,
            tok_free_running,
            keyword_acc,
            retrieval,
            silhouette: sil,
            counts: EvalCounts {
                clips: test.len(),
                generated: n_gen,
                described: described.len(),
                retrieval_pairs: n_ret,
                intensity_pairs: pairs.len(),
            },
        };
        report.check()?;
        Ok(EvalOutcome {
            report,
            controls: EvalControls {
                fd_shuffled,
                silhouette_shuffled,
                intensity_monotonic,
                describe_real,
                chance_tok: 1.0 / (vocab.k_geometry() + 1) as f64,
                chance_r1: 1.0 / n_ret as f64,
            },
        })
    }

    /// Language2Motion accuracy curves for each model width in the sweep.
    /// Writes `sweep.csv` into `out` and returns the points.
    pub fn sweep(&self, corpus: &Corpus, out: &Path, mut progress: impl FnMut(&SweepPoint)) -> Result<Vec<SweepPoint>> {
        self.load_vqvae()?;
        let tokens = self.load_tokens()?;
        let vocab = self.vocab();
        let train = self.pairs(corpus, &tokens, Split::Train)?;
        let val = self.pairs(corpus, &tokens, Split::Val)?;
        let held: Vec<Instance> = val
            .iter()
            .take(self.cfg.sweep.eval_clips)
            .map(|p| l2m_instance(&vocab, &p.texts[0], &p.tokens))
            .collect::<Result<_>>()?;
        let sw = &self.cfg.sweep;
        let mut points = Vec::new();
        for &dim in &sw.model_dims {
            let arch = TransformerConfig { layers: sw.layers, model_dim: dim, ..self.cfg.l2m.transformer.clone() };
            let train_cfg = crate::motion_lm::LmTrainConfig { epochs: sw.epochs, ..self.cfg.l2m.training.clone() };
            let mut model = MotionLm::new(LmKind::L2m, arch, &vocab, train_cfg.seed)?;
            let first = SweepPoint { model_dim: dim, step: 0, accuracy: model.teacher_forced_accuracy(&held)? };
            progress(&first);
            points.push(first);
            let mut trainer = LmTrainer::new(&model, train_cfg)?;
            let mut failure = None;
            train_l2m(&mut model, &mut trainer, &vocab, &train, |m, step, _| {
                if step % sw.eval_every == 0 && failure.is_none() {
                    match m.teacher_forced_accuracy(&held) {
                        Ok(accuracy) => {
                            let p = SweepPoint { model_dim: dim, step, accuracy };
                            progress(&p);
                            points.push(p);
                        }
                        Err(e) => failure = Some(e),
                    }
                }
            })?;
            if let Some(e) = failure {
                return Err(e);
            }
            if points.last().is_some_and(|p| p.model_dim == dim && p.step != trainer.step) {
                let p = SweepPoint { model_dim: dim, step: trainer.step, accuracy: model.teacher_forced_accuracy(&held)? };
                progress(&p);
                points.push(p);
            }
        }
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let mut csv = String::from("model_dim,step,accuracy\n");
        for p in &points {
            csv.push_str(&format!("{},{},{}\n", p.model_dim, p.step, p.accuracy));
        }
        let path = out.join("sweep.csv");
        fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        Ok(points)
    }

    /// Motion-tower embeddings of every clip in `split`, written as CSV.
    pub fn export_embeddings(&self, corpus: &Corpus, split: Split, path: &Path) -> Result<Vec<EmbeddingRow>> {
        let tokens = self.load_tokens()?;
        let model = self.retrieval_model(corpus, &tokens)?;
        let pairs = self.pairs(corpus, &tokens, split)?;
        let motions: Vec<&[usize]> = pairs.iter().map(|p| p.tokens.as_slice()).collect();
        let emb = model.embed_motions(&motions)?;
        let rows: Vec<EmbeddingRow> = corpus
            .split(split)
            .iter()
            .zip(emb)
            .map(|(c, values)| EmbeddingRow { clip_id: c.prompt.clip_id.clone(), label: c.prompt.labels.emotion.clone(), values })
            .collect();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        export_embeddings(&rows, path)?;
        Ok(rows)
    }
}

/// Held-out reconstruction, codebook usage, nearest-neighbour optimality and
/// the detokenize/tokenize fixpoint rate.
pub fn vq_quality(face: &FaceModel, vqvae: &Vqvae, corpus: &Corpus, seed: u64) -> Result<VqQuality> {
    let train: Vec<&MotionSequence> = corpus.split(Split::Train).iter().map(|c| &c.motion).collect();
    let val: Vec<&MotionSequence> = corpus.split(Split::Val).iter().map(|c| &c.motion).collect();
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument("vq quality needs train and val clips".into()));
    }
    let mean = mean_frame(&train)?;
    let mean_mesh = face.decode_mesh(&mean)?;
    let k = vqvae.k();
    let mut used = vec![false; k];
    let (mut rec, mut base) = (0.0, 0.0);
    let (mut optimal, mut latents_seen) = (0usize, 0usize);
    for clip in &val {
        let latents = vqvae.encode(clip)?;
        let (tokens, quantized, _) = vqvae.quantize(&latents)?;
        let d = vqvae.codebook.d;
        for (z, &t) in latents.chunks(d).zip(&tokens) {
            let best = (0..k).map(|i| vqvae.codebook.sq_dist(z, i)).fold(f64::INFINITY, f64::min);
            if vqvae.codebook.sq_dist(z, t) <= best {
                optimal += 1;
            }
            latents_seen += 1;
            used[t] = true;
        }
        let recon = vqvae.decode(&quantized)?;
        let (mut r, mut b) = (0.0, 0.0);
        for (orig, dec) in clip.frames().iter().zip(recon.frames()) {
            let m = face.decode_mesh(orig)?;
            r += mesh_l1(&m, &face.decode_mesh(dec)?)?;
            b += mesh_l1(&m, &mean_mesh)?;
        }
        rec += r / clip.len() as f64;
        base += b / clip.len() as f64;
    }
    rec /= val.len() as f64;
    base /= val.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut agree, mut total) = (0usize, 0usize);
    for _ in 0..FIXPOINT_SEQUENCES {
        let len = rng.random_range(corpus::MIN_CLIP_FRAMES..=corpus::MAX_CLIP_FRAMES);
        let toks: Vec<usize> = (0..len).map(|_| rng.random_range(0..k)).collect();
        let back = vqvae.tokenize(&vqvae.detokenize(&toks)?)?.tokens;
        agree += toks.iter().zip(&back).filter(|(a, b)| a == b).count();
        total += len;
    }
    Ok(VqQuality {
        mesh_l1: rec,
        baseline_mesh_l1: base,
        ratio: rec / base,
        codebook_usage: used.iter().filter(|&&u| u).count() as f64 / k as f64,
        nn_optimal: optimal as f64 / latents_seen as f64,
        fixpoint: agree as f64 / total as f64,
        clips: val.len(),
    })
}

/// Pools all frames of `clips`, permutes them, and cuts the pool back into
/// sequences of the original lengths.
pub fn frame_shuffled<R: Rng + ?Sized>(clips: &[&MotionSequence], rng: &mut R) -> Result<Vec<MotionSequence>> {
    let mut pool: Vec<_> = clips.iter().flat_map(|c| c.frames().iter().cloned()).collect();
    pool.shuffle(rng);
    let mut out = Vec::with_capacity(clips.len());
    let mut rest = pool.as_slice();
    for c in clips {
        let (head, tail) = rest.split_at(c.len());
        out.push(MotionSequence::new(head.to_vec())?);
        rest = tail;
    }
    Ok(out)
}

/// Prompt pairs differing only in the intensity word: the first carries
/// "slightly", the second "intensely". Prompts without an intensity word are
/// skipped.
pub fn intensity_pairs<'a>(keywords: &KeywordMap, prompts: impl Iterator<Item = &'a str>, limit: usize) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for prompt in prompts {
        if out.len() == limit {
            break;
        }
        let words: Vec<&str> = prompt.split_whitespace().collect();
        let bare = |w: &str| w.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_lowercase();
        let Some(pos) = words.iter().position(|w| matches!(keywords.get(&bare(w)), Some((Field::Intensity, _)))) else {
            continue;
        };
        let swap = |word: &str| {
            let mut w: Vec<String> = words.iter().map(|s| s.to_string()).collect();
            w[pos] = w[pos].to_lowercase().replace(&bare(words[pos]), word);
            w.join(" ")
        };
        out.push((swap("slightly"), swap("intensely")));
    }
    out
}
