//! Checkpoint directories.
//!
//! ```text
//! <dir>/config.json    CheckpointMeta (version, stage, run config, hashes)
//! <dir>/vocab.json     VocabFile
//! <dir>/tensors.bin    tensor records
//! <dir>/manifest.json  per-tensor shape and sha256 of the encoded record
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::face_model::FaceModel;
use crate::nn::io::{read_records, TensorRecord};
use crate::nn::ParamStore;
use crate::text_codec::{VocabFile, Vocabulary};
use crate::vqvae::{Codebook, Vqvae};

pub const CHECKPOINT_VERSION: u32 = 1;

pub const CODEBOOK_ENTRIES: &str = "codebook.entries";
pub const CODEBOOK_EMA_COUNTS: &str = "codebook.ema_counts";
pub const CODEBOOK_EMA_SUMS: &str = "codebook.ema_sums";

/// Pipeline stages that own a checkpoint, in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Vqvae,
    M2l,
    L2m,
    Retrieval,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Vqvae, Stage::M2l, Stage::L2m, Stage::Retrieval];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Vqvae => "vqvae",
            Stage::M2l => "m2l",
            Stage::L2m => "l2m",
            Stage::Retrieval => "retrieval",
        }
    }

    /// CLI command that produces this stage.
    pub fn command(self) -> &'static str {
        match self {
            Stage::Vqvae => "train-vqvae",
            Stage::M2l => "train-m2l",
            Stage::L2m => "train-l2m",
            Stage::Retrieval => "eval",
        }
    }

    pub fn dir(self, cfg: &RunConfig) -> PathBuf {
        cfg.paths.checkpoints.join(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub stage: Stage,
    pub run_config: RunConfig,
    pub lexicon_hash: String,
    /// sha256 over the face model template and basis.
    pub face_model_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorManifest {
    pub version: u32,
    pub tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub vocab: Vocabulary,
    pub store: ParamStore<f32>,
}

pub fn face_model_hash(face: &FaceModel) -> String {
    let mut h = Sha256::new();
    for v in face.template().iter().chain(face.basis()) {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes a checkpoint directory, replacing any previous contents of the
/// four checkpoint files.
pub fn save(dir: &Path, meta: &CheckpointMeta, vocab: &Vocabulary, store: &ParamStore<f32>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for rec in store.to_records() {
        let bytes = rec.encode();
        tensors.push(ManifestEntry { name: rec.name, shape: rec.shape, sha256: hex::encode(Sha256::digest(&bytes)) });
        blob.extend_from_slice(&bytes);
    }
    let bin = dir.join("tensors.bin");
    fs::write(&bin, &blob).map_err(|e| Error::io(&bin, e))?;
    write_json(&dir.join("manifest.json"), &TensorManifest { version: CHECKPOINT_VERSION, tensors })?;
    write_json(&dir.join("vocab.json"), &vocab.to_file())?;
    write_json(&dir.join("config.json"), meta)
}

pub fn exists(dir: &Path) -> bool {
    ["config.json", "vocab.json", "tensors.bin", "manifest.json"].iter().all(|f| dir.join(f).is_file())
}

/// Loads and verifies a checkpoint. A missing directory is reported as a
/// missing stage so the caller learns which command to run.
pub fn load(dir: &Path, stage: Stage) -> Result<Checkpoint> {
    if !exists(dir) {
        return Err(Error::MissingStage(format!(
            "{} checkpoint not found at {}; run `{}` first",
            stage.name(),
            dir.display(),
            stage.command()
        )));
    }
    let meta: CheckpointMeta = read_json(&dir.join("config.json"))?;
    let cfg_path = dir.join("config.json");
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion { path: cfg_path, found: meta.version, expected: CHECKPOINT_VERSION });
    }
    if meta.stage != stage {
        return Err(Error::Corrupt {
            what: "checkpoint".into(),
            detail: format!("{} holds stage {}, expected {}", dir.display(), meta.stage.name(), stage.name()),
        });
    }
    let manifest: TensorManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion { path: dir.join("manifest.json"), found: manifest.version, expected: CHECKPOINT_VERSION });
    }
    let vocab = Vocabulary::from_file(read_json::<VocabFile>(&dir.join("vocab.json"))?)?;
    let bin = dir.join("tensors.bin");
    let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let records = read_records(&blob)?;
    verify(&manifest, &records)?;
    Ok(Checkpoint { meta, vocab, store: ParamStore::from_records(records)? })
}

fn verify(manifest: &TensorManifest, records: &[TensorRecord]) -> Result<()> {
    if manifest.tensors.len() != records.len() {
        return Err(Error::Corrupt {
            what: "checkpoint".into(),
            detail: format!("manifest lists {} tensors, blob holds {}", manifest.tensors.len(), records.len()),
        });
    }
    for (entry, rec) in manifest.tensors.iter().zip(records) {
        if entry.name != rec.name || entry.shape != rec.shape {
            return Err(Error::Corrupt {
                what: "checkpoint".into(),
                detail: format!("manifest entry {} {:?} does not match record {} {:?}", entry.name, entry.shape, rec.name, rec.shape),
            });
        }
        if hex::encode(Sha256::digest(rec.encode())) != entry.sha256 {
            return Err(Error::Checksum(rec.name.clone()));
        }
    }
    Ok(())
}

/// Network weights plus the codebook and its EMA statistics.
pub fn vqvae_store(model: &Vqvae) -> Result<ParamStore<f32>> {
    let mut store = model.store.clone();
    let cb = &model.codebook;
    store.add(CODEBOOK_ENTRIES, &[cb.k, cb.d], cb.entries.clone())?;
    store.add(CODEBOOK_EMA_COUNTS, &[cb.k], cb.ema_counts.clone())?;
    store.add(CODEBOOK_EMA_SUMS, &[cb.k, cb.d], cb.ema_sums.clone())?;
    Ok(store)
}

pub fn vqvae_from_checkpoint(ckpt: &Checkpoint) -> Result<Vqvae> {
    let take = |name: &str| {
        let id = ckpt.store.id(name).ok_or_else(|| Error::MissingTensor(name.into()))?;
        Ok::<_, Error>(ckpt.store.get(id))
    };
    let entries = take(CODEBOOK_ENTRIES)?;
    let (k, d) = match entries.shape[..] {
        [k, d] => (k, d),
        _ => return Err(Error::shape("checkpoint", format!("{CODEBOOK_ENTRIES} has shape {:?}", entries.shape))),
    };
    let mut codebook = Codebook::new(entries.value.clone(), k, d)?;
    codebook.ema_counts = take(CODEBOOK_EMA_COUNTS)?.value.clone();
    codebook.ema_sums = take(CODEBOOK_EMA_SUMS)?.value.clone();
    if codebook.ema_counts.len() != k || codebook.ema_sums.len() != k * d {
        return Err(Error::shape("checkpoint", "codebook EMA statistics do not match the codebook"));
    }
    let records: Vec<TensorRecord> = ckpt
        .store
        .to_records()
        .into_iter()
        .filter(|r| !r.name.starts_with("codebook."))
        .collect();
    let cfg = &ckpt.meta.run_config;
    Vqvae::from_parts(cfg.vqvae.model.clone(), cfg.face_model.expr_dim, ParamStore::from_records(records)?, codebook)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_lexicon;

    fn tiny_store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("m2l.a", &[2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-8, f32::MAX]).unwrap();
        s.add("m2l.b", &[1], vec![0.25]).unwrap();
        s
    }

    fn meta(stage: Stage) -> CheckpointMeta {
        CheckpointMeta {
            version: CHECKPOINT_VERSION,
            stage,
            run_config: RunConfig::default(),
            lexicon_hash: "abc".into(),
            face_model_hash: "def".into(),
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::build(&build_lexicon(16).unwrap(), 8)
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let store = tiny_store();
        save(dir.path(), &meta(Stage::M2l), &vocab(), &store).unwrap();
        let ck = load(dir.path(), Stage::M2l).unwrap();
        assert_eq!(ck.meta, meta(Stage::M2l));
        assert_eq!(ck.vocab.to_file().words, vocab().to_file().words);
        let a: Vec<_> = store.to_records();
        assert_eq!(ck.store.to_records(), a);
    }

    #[test]
    fn missing_dir_names_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let err = load(&dir.path().join("nope"), Stage::Vqvae).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::MissingStage(_)));
        assert!(msg.contains("vqvae") && msg.contains("train-vqvae"), "{msg}");
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &meta(Stage::L2m), &vocab(), &tiny_store()).unwrap();
        let bin = dir.path().join("tensors.bin");
        let mut bytes = fs::read(&bin).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        fs::write(&bin, bytes).unwrap();
        assert!(matches!(load(dir.path(), Stage::L2m), Err(Error::Checksum(n)) if n == "m2l.b"));
    }

    #[test]
    fn truncated_blob_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &meta(Stage::L2m), &vocab(), &tiny_store()).unwrap();
        let bin = dir.path().join("tensors.bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load(dir.path(), Stage::L2m), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn version_and_stage_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = meta(Stage::M2l);
        save(dir.path(), &m, &vocab(), &tiny_store()).unwrap();
        assert!(matches!(load(dir.path(), Stage::L2m), Err(Error::Corrupt { .. })));
        m.version = 2;
        save(dir.path(), &m, &vocab(), &tiny_store()).unwrap();
        assert!(matches!(load(dir.path(), Stage::M2l), Err(Error::UnsupportedVersion { found: 2, expected: 1, .. })));
    }

    #[test]
    fn face_hash_tracks_the_seed() {
        let a = FaceModel::synthetic(1, 16, 16).unwrap();
        let b = FaceModel::synthetic(1, 16, 16).unwrap();
        let c = FaceModel::synthetic(2, 16, 16).unwrap();
        assert_eq!(face_model_hash(&a), face_model_hash(&b));
        assert_ne!(face_model_hash(&a), face_model_hash(&c));
    }
}
