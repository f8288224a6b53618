//! Quantitative evaluation: per-frame L2, Gaussian Fréchet distance,
//! keyword recovery, text-motion retrieval and cluster separation.

mod retrieval;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::corpus::ClipLabels;
use crate::error::{Error, Result};
use crate::face_model::MotionSequence;
use crate::text_codec::Keywords;
use crate::vqvae::Vqvae;

pub use retrieval::{rank_metrics, RetrievalConfig, RetrievalMetrics, RetrievalModel, RetrievalTrainer};

/// Mean over frames of the Euclidean norm of the per-frame difference,
/// separately for expression and pose. Sequences of unequal length are
/// compared over the shorter one.
pub fn l2_metric(pred: &MotionSequence, gt: &MotionSequence) -> Result<(f64, f64)> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::InvalidArgument("l2_metric on an empty sequence".into()));
    }
    if pred.len() != gt.len() {
        log::warn!("l2_metric: comparing {} against {} frames over the shorter", pred.len(), gt.len());
    }
    if pred.expr_dim() != gt.expr_dim() {
        return Err(Error::shape("l2_metric", format!("expr dims {} vs {}", pred.expr_dim(), gt.expr_dim())));
    }
    let n = pred.len().min(gt.len());
    let (mut e, mut p) = (0.0, 0.0);
    for (a, b) in pred.frames()[..n].iter().zip(&gt.frames()[..n]) {
        e += a.expr.iter().zip(&b.expr).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let (pa, pb) = (a.pose.as_array(), b.pose.as_array());
        p += pa.iter().zip(&pb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    }
    Ok((e / n as f64, p / n as f64))
}

/// Below this an eigenvalue of the square-root argument is a genuine error
/// rather than rounding.
const NEG_EIGEN_TOLERANCE: f64 = -1e-8;
const COV_RIDGE: f64 = 1e-6;

fn mean_and_cov(feats: &[Vec<f64>], dim: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = feats.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples for a covariance, got {n}")));
    }
    if let Some(bad) = feats.iter().find(|f| f.len() != dim) {
        return Err(Error::shape("frechet_distance", format!("feature of length {} in a {dim}-d set", bad.len())));
    }
    let x = DMatrix::from_fn(n, dim, |i, j| feats[i][j]);
    let mu = DVector::from_fn(dim, |j, _| x.column(j).mean());
    let centered = DMatrix::from_fn(n, dim, |i, j| x[(i, j)] - mu[j]);
    let mut cov = centered.transpose() * &centered / (n - 1) as f64;
    if n < dim + 1 {
        log::warn!("frechet_distance: {n} samples for {dim} dims; adding {COV_RIDGE} to the diagonal");
        for i in 0..dim {
            cov[(i, i)] += COV_RIDGE;
        }
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariance".into()));
    }
    Ok((mu, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&l| l < NEG_EIGEN_TOLERANCE) {
        return Err(Error::InvalidArgument(format!("matrix square root of a matrix with eigenvalue {bad}")));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Fréchet distance between Gaussian fits of two feature sets, using the
/// unbiased (N-1) covariance estimate:
/// `‖μa−μb‖² + tr Σa + tr Σb − 2 tr (Σa^½ Σb Σa^½)^½`.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let dim = a.first().map(Vec::len).ok_or_else(|| Error::InvalidArgument("empty feature set".into()))?;
    let (mu_a, cov_a) = mean_and_cov(a, dim)?;
    let (mu_b, cov_b) = mean_and_cov(b, dim)?;
    let root_a = psd_sqrt(&cov_a)?;
    let inner = &root_a * &cov_b * &root_a;
    let sym = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&l| l < NEG_EIGEN_TOLERANCE) {
        return Err(Error::InvalidArgument(format!("covariance product has eigenvalue {bad}")));
    }
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let d = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    if !d.is_finite() {
        return Err(Error::NonFinite("frechet distance".into()));
    }
    Ok(d.max(0.0))
}

/// Per-clip FD features: encoder latents before quantization, mean-pooled
/// over time.
pub fn clip_features(vqvae: &Vqvae, clips: &[&MotionSequence]) -> Result<Vec<Vec<f64>>> {
    let d = vqvae.config.latent_dim;
    let mut out = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(32) {
        for z in vqvae.encode_batch(chunk)? {
            let n = (z.len() / d) as f64;
            let mut m = vec![0.0; d];
            for row in z.chunks(d) {
                m.iter_mut().zip(row).for_each(|(m, &v)| *m += v as f64);
            }
            out.push(m.into_iter().map(|v| v / n).collect());
        }
    }
    Ok(out)
}

/// Per-field keyword accuracy. A field that was not extracted counts as wrong.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KeywordAccuracy {
    pub emotion: f64,
    pub intensity: f64,
    pub motion: f64,
}

pub fn keyword_correctness(outputs: &[Keywords], truth: &[ClipLabels]) -> Result<KeywordAccuracy> {
    if outputs.len() != truth.len() {
        return Err(Error::shape("keyword_correctness", format!("{} outputs for {} labels", outputs.len(), truth.len())));
    }
    if outputs.is_empty() {
        return Ok(KeywordAccuracy::default());
    }
    let n = outputs.len() as f64;
    let frac = |f: &dyn Fn(&Keywords, &ClipLabels) -> bool| outputs.iter().zip(truth).filter(|(k, l)| f(k, l)).count() as f64 / n;
    Ok(KeywordAccuracy {
        emotion: frac(&|k, l| k.emotion.as_deref() == Some(l.emotion.as_str())),
        intensity: frac(&|k, l| k.intensity == Some(l.intensity)),
        motion: frac(&|k, l| k.motion.as_deref() == Some(l.motion.as_str())),
    })
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette coefficient with Euclidean distance. Members of singleton
/// clusters score 0.
pub fn silhouette<L: Ord>(points: &[Vec<f64>], labels: &[L]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::shape("silhouette", format!("{} points for {} labels", points.len(), labels.len())));
    }
    let mut ids: BTreeMap<&L, usize> = BTreeMap::new();
    for l in labels {
        let next = ids.len();
        ids.entry(l).or_insert(next);
    }
    if ids.len() < 2 {
        return Err(Error::InvalidArgument("silhouette needs at least two labels".into()));
    }
    let cluster: Vec<usize> = labels.iter().map(|l| ids[l]).collect();
    let mut sizes = vec![0usize; ids.len()];
    cluster.iter().for_each(|&c| sizes[c] += 1);
    let mut total = 0.0;
    let mut sums = vec![0.0; ids.len()];
    for (i, p) in points.iter().enumerate() {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for (j, q) in points.iter().enumerate() {
            if i != j {
                sums[cluster[j]] += euclid(p, q);
            }
        }
        let own = cluster[i];
        if sizes[own] < 2 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..ids.len()).filter(|&c| c != own && sizes[c] > 0).map(|c| sums[c] / sizes[c] as f64).fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / points.len() as f64)
}

/// One embedding row for CSV export.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub clip_id: String,
    pub label: String,
    pub values: Vec<f64>,
}

/// Writes `clip_id,label,e1..eN` with a header row.
pub fn export_embeddings(rows: &[EmbeddingRow], path: &Path) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.values.len());
    if let Some(bad) = rows.iter().find(|r| r.values.len() != dim) {
        return Err(Error::shape("export_embeddings", format!("{} has {} values, expected {dim}", bad.clip_id, bad.values.len())));
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header: Vec<String> = ["clip_id".to_string(), "label".to_string()].into_iter().chain((1..=dim).map(|i| format!("e{i}"))).collect();
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for r in rows {
        let vals: Vec<String> = r.values.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{},{},{}", r.clip_id, r.label, vals.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub clips: usize,
    pub generated: usize,
    pub described: usize,
    pub retrieval_pairs: usize,
    pub intensity_pairs: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub expr_l2: f64,
    pub pose_l2: f64,
    pub fd: f64,
    pub tok_teacher_forced: f64,
    pub tok_free_running: f64,
    pub keyword_acc: KeywordAccuracy,
    pub retrieval: RetrievalMetrics,
    pub silhouette: f64,
    pub counts: EvalCounts,
}

impl EvalReport {
    /// Every metric must be finite and every accuracy must lie in [0, 1].
    pub fn check(&self) -> Result<()> {
        let k = &self.keyword_acc;
        let r = &self.retrieval;
        let finite = [self.expr_l2, self.pose_l2, self.fd, self.silhouette, r.median_rank];
        let unit = [self.tok_teacher_forced, self.tok_free_running, k.emotion, k.intensity, k.motion, r.r1, r.r5, r.r10];
        if finite.iter().chain(&unit).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("eval report".into()));
        }
        if unit.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("accuracy outside [0, 1]".into()));
        }
        Ok(())
    }
}
