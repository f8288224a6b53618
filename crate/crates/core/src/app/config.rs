use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::eval_suite::RetrievalConfig;
use crate::face_model::FaceModel;
use crate::motion_lm::{LmTrainConfig, TransformerConfig};
use crate::vqvae::VqvaeConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaceModelConfig {
    pub seed: u64,
    pub vertex_count: usize,
    pub expr_dim: usize,
}

impl Default for FaceModelConfig {
    fn default() -> Self {
        FaceModelConfig { seed: 3, vertex_count: 512, expr_dim: 16 }
    }
}

impl FaceModelConfig {
    pub fn build(&self) -> Result<FaceModel> {
        FaceModel::synthetic(self.seed, self.vertex_count, self.expr_dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqvaeStage {
    #[serde(flatten)]
    pub model: VqvaeConfig,
    pub steps: usize,
}

impl Default for VqvaeStage {
    fn default() -> Self {
        VqvaeStage { model: VqvaeConfig::default(), steps: 3000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmStage {
    pub transformer: TransformerConfig,
    pub training: LmTrainConfig,
}

impl Default for LmStage {
    fn default() -> Self {
        LmStage { transformer: TransformerConfig::default(), training: LmTrainConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub round_trip_prompts: usize,
    pub intensity_pairs: usize,
    pub retrieval_pairs: usize,
    pub free_running_clips: usize,
    /// Sampling for generated clips. Greedy decoding almost never emits
    /// `MOT_END` before the length cap, so evaluation samples by default.
    pub temperature: f64,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            round_trip_prompts: 200,
            intensity_pairs: 100,
            retrieval_pairs: 128,
            free_running_clips: 50,
            temperature: 0.8,
            top_k: 20,
            seed: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub model_dims: Vec<usize>,
    pub layers: usize,
    pub epochs: usize,
    pub eval_every: usize,
    pub eval_clips: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { model_dims: vec![64, 128, 256], layers: 2, epochs: 2, eval_every: 24, eval_clips: 48 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub checkpoints: PathBuf,
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { corpus: "work/corpus".into(), checkpoints: "work/checkpoints".into(), out: "work/out".into() }
    }
}

/// Everything a run needs. Relative paths resolve against the working
/// directory of the process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub face_model: FaceModelConfig,
    pub vqvae: VqvaeStage,
    pub m2l: LmStage,
    pub l2m: LmStage,
    pub retrieval: RetrievalConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: CorpusConfig::default(),
            face_model: FaceModelConfig::default(),
            vqvae: VqvaeStage::default(),
            m2l: LmStage {
                transformer: TransformerConfig::default(),
                training: LmTrainConfig { epochs: 12, ..LmTrainConfig::default() },
            },
            l2m: LmStage {
                transformer: TransformerConfig::default(),
                training: LmTrainConfig { epochs: 24, lr: 1e-3, ..LmTrainConfig::default() },
            },
            retrieval: RetrievalConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    /// A seconds-scale configuration rooted at `root`, for smoke runs and
    /// tests. Every stage runs but nothing learns much.
    pub fn smoke(root: &Path) -> Self {
        let lm = |epochs| LmStage {
            transformer: TransformerConfig { layers: 1, heads: 2, model_dim: 32, ..TransformerConfig::default() },
            training: LmTrainConfig { epochs, batch_size: 16, lr: 1e-3, ..LmTrainConfig::default() },
        };
        RunConfig {
            corpus: CorpusConfig { n_clips: 96, ..CorpusConfig::default() },
            face_model: FaceModelConfig { vertex_count: 64, ..FaceModelConfig::default() },
            vqvae: VqvaeStage {
                model: VqvaeConfig {
                    latent_dim: 16,
                    codebook_size: 32,
                    hidden_dim: 32,
                    batch_size: 4,
                    window: 32,
                    cycle_batch: 2,
                    ..VqvaeConfig::default()
                },
                steps: 20,
            },
            m2l: lm(1),
            l2m: lm(1),
            retrieval: RetrievalConfig { hidden_dim: 32, embed_dim: 16, batch_size: 16, epochs: 1, ..RetrievalConfig::default() },
            eval: EvalConfig { round_trip_prompts: 6, intensity_pairs: 4, retrieval_pairs: 8, free_running_clips: 3, ..EvalConfig::default() },
            sweep: SweepConfig { model_dims: vec![16, 32], layers: 1, epochs: 1, eval_every: 2, eval_clips: 4 },
            paths: PathsConfig { corpus: root.join("corpus"), checkpoints: root.join("checkpoints"), out: root.join("out") },
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// Collects every violation instead of stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.corpus.n_clips == 0 {
            errs.push("corpus.n_clips must be positive".into());
        }
        let s = self.corpus.splits;
        if s.iter().any(|f| !(0.0..=1.0).contains(f)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            errs.push(format!("corpus.splits {s:?} must lie in [0, 1] and sum to 1"));
        }
        if self.face_model.expr_dim < 16 {
            errs.push(format!("face_model.expr_dim must be at least 16, got {}", self.face_model.expr_dim));
        }
        if self.face_model.vertex_count == 0 {
            errs.push("face_model.vertex_count must be positive".into());
        }
        errs.extend(self.vqvae.model.validate().into_iter().map(|e| format!("vqvae: {e}")));
        if self.vqvae.steps == 0 {
            errs.push("vqvae.steps must be positive".into());
        }
        for (name, stage) in [("m2l", &self.m2l), ("l2m", &self.l2m)] {
            errs.extend(stage.transformer.validate().into_iter().map(|e| format!("{name}: {e}")));
            errs.extend(stage.training.validate().into_iter().map(|e| format!("{name}: {e}")));
        }
        errs.extend(self.retrieval.validate());
        if !(self.eval.temperature >= 0.0 && self.eval.temperature.is_finite()) {
            errs.push(format!("eval.temperature must be >= 0, got {}", self.eval.temperature));
        }
        if self.eval.retrieval_pairs < 2 {
            errs.push("eval.retrieval_pairs must be at least 2".into());
        }
        if self.sweep.model_dims.is_empty() || self.sweep.eval_every == 0 {
            errs.push("sweep needs at least one model dim and eval_every > 0".into());
        }
        for d in &self.sweep.model_dims {
            if *d == 0 || d % self.l2m.transformer.heads != 0 {
                errs.push(format!("sweep.model_dims entry {d} is not a positive multiple of l2m heads"));
            }
        }
        for (name, p) in [("corpus", &self.paths.corpus), ("checkpoints", &self.paths.checkpoints), ("out", &self.paths.out)] {
            if p.as_os_str().is_empty() {
                errs.push(format!("paths.{name} is empty"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}
