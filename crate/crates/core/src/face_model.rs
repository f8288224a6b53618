//! Linear blendshape face model: a neutral template plus orthonormal
//! expression displacement fields, rigidly rotated by head pose.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frame rate of every motion sequence.
pub const FPS: usize = 25;
/// Longest allowed motion sequence.
pub const MAX_FRAMES: usize = 1024;
/// Expression coefficients are clamped to this magnitude at generation time.
pub const EXPR_LIMIT: f64 = 4.0;

/// Head rotation in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseAngles {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl PoseAngles {
    pub fn new(yaw: f64, pitch: f64, roll: f64) -> Self {
        PoseAngles { yaw, pitch, roll }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.yaw, self.pitch, self.roll]
    }
}

/// One frame of motion: expression coefficients and head pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionFrame {
    pub expr: Vec<f64>,
    #[serde(flatten)]
    pub pose: PoseAngles,
}

/// A 25 fps sequence of frames.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    frames: Vec<MotionFrame>,
}

impl MotionSequence {
    pub fn new(frames: Vec<MotionFrame>) -> Result<Self> {
        if frames.is_empty() || frames.len() > MAX_FRAMES {
            return Err(Error::InvalidArgument(format!("motion length {} outside 1..={MAX_FRAMES}", frames.len())));
        }
        let dim = frames[0].expr.len();
        for (t, f) in frames.iter().enumerate() {
            if f.expr.len() != dim {
                return Err(Error::shape("motion", format!("frame {t} has {} coefficients, expected {dim}", f.expr.len())));
            }
            if f.expr.iter().chain(f.pose.as_array().iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("motion frame {t}")));
            }
        }
        Ok(MotionSequence { frames })
    }

    pub fn frames(&self) -> &[MotionFrame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn fps(&self) -> usize {
        FPS
    }

    pub fn expr_dim(&self) -> usize {
        self.frames[0].expr.len()
    }

    pub fn duration_s(&self) -> f64 {
        self.frames.len() as f64 / FPS as f64
    }

    /// Flattened `[T, E+3]` rows of `expr..., yaw, pitch, roll`.
    pub fn to_rows(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.frames.len() * (self.expr_dim() + 3));
        for f in &self.frames {
            out.extend_from_slice(&f.expr);
            out.extend_from_slice(&f.pose.as_array());
        }
        out
    }

    pub fn from_rows(rows: &[f64], expr_dim: usize) -> Result<Self> {
        let w = expr_dim + 3;
        if rows.len() % w != 0 {
            return Err(Error::shape("motion", format!("{} values do not form rows of {w}", rows.len())));
        }
        let frames = rows
            .chunks(w)
            .map(|r| MotionFrame { expr: r[..expr_dim].to_vec(), pose: PoseAngles::new(r[expr_dim], r[expr_dim + 1], r[expr_dim + 2]) })
            .collect();
        MotionSequence::new(frames)
    }
}

/// Vertex positions of one decoded frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceMesh {
    pub vertices: Vec<[f64; 3]>,
}

/// Template mesh plus linear expression basis.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceModel {
    vertex_count: usize,
    expr_dim: usize,
    /// `V × 3`, row-major.
    template: Vec<f64>,
    /// `E × V × 3`, one flattened displacement field per coefficient.
    basis: Vec<f64>,
    seed: u64,
}

/// Seeded Gaussian draws that the synthetic basis is orthonormalized from.
pub fn basis_draws(seed: u64, vertex_count: usize, expr_dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..expr_dim * vertex_count * 3).map(|_| rng.sample(StandardNormal)).collect()
}

/// Fibonacci lattice on an ellipsoid with semi-axes (0.8, 1.0, 0.9), centered
/// at the origin; the longest axis spans 2.0.
fn ellipsoid_lattice(vertex_count: usize) -> Vec<f64> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut pts = Vec::with_capacity(vertex_count * 3);
    for i in 0..vertex_count {
        let y = 1.0 - 2.0 * (i as f64 + 0.5) / vertex_count as f64;
        let r = (1.0 - y * y).max(0.0).sqrt();
        let phi = golden * i as f64;
        pts.extend_from_slice(&[0.8 * r * phi.cos(), y, 0.9 * r * phi.sin()]);
    }
    for axis in 0..3 {
        let mean = pts.iter().skip(axis).step_by(3).sum::<f64>() / vertex_count as f64;
        pts.iter_mut().skip(axis).step_by(3).for_each(|p| *p -= mean);
    }
    pts
}

impl FaceModel {
    /// Deterministic synthetic model: ellipsoid lattice template and a
    /// Gram-Schmidt orthonormalized Gaussian basis.
    pub fn synthetic(seed: u64, vertex_count: usize, expr_dim: usize) -> Result<Self> {
        if expr_dim == 0 || vertex_count < expr_dim {
            return Err(Error::InvalidArgument(format!(
                "need vertex_count >= expr_dim >= 1, got V={vertex_count} E={expr_dim}"
            )));
        }
        if expr_dim > 3 * vertex_count {
            return Err(Error::InvalidArgument(format!("expr_dim {expr_dim} exceeds 3·V; basis cannot be orthonormal")));
        }
        let n = vertex_count * 3;
        let mut basis = basis_draws(seed, vertex_count, expr_dim);
        // Modified Gram-Schmidt, row by row.
        for i in 0..expr_dim {
            for j in 0..i {
                let (done, rest) = basis.split_at_mut(i * n);
                let bj = &done[j * n..(j + 1) * n];
                let bi = &mut rest[..n];
                let dot: f64 = bi.iter().zip(bj).map(|(a, b)| a * b).sum();
                bi.iter_mut().zip(bj).for_each(|(a, b)| *a -= dot * b);
            }
            let bi = &mut basis[i * n..(i + 1) * n];
            let norm = bi.iter().map(|a| a * a).sum::<f64>().sqrt();
            bi.iter_mut().for_each(|a| *a /= norm);
        }
        Ok(FaceModel { vertex_count, expr_dim, template: ellipsoid_lattice(vertex_count), basis, seed })
    }

    /// Model from explicit arrays, e.g. a converted FLAME template and
    /// expression basis.
    pub fn from_arrays(template: Vec<f64>, basis: Vec<f64>, vertex_count: usize, expr_dim: usize, seed: u64) -> Result<Self> {
        if template.len() != vertex_count * 3 || basis.len() != expr_dim * vertex_count * 3 || expr_dim == 0 {
            return Err(Error::shape(
                "face_model",
                format!("template {} / basis {} values for V={vertex_count} E={expr_dim}", template.len(), basis.len()),
            ));
        }
        if template.iter().chain(&basis).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("face model arrays".into()));
        }
        Ok(FaceModel { vertex_count, expr_dim, template, basis, seed })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn expr_dim(&self) -> usize {
        self.expr_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn template(&self) -> &[f64] {
        &self.template
    }

    pub fn basis(&self) -> &[f64] {
        &self.basis
    }

    /// Displacement field of coefficient `i`, flattened `V × 3`.
    pub fn basis_vector(&self, i: usize) -> &[f64] {
        let n = self.vertex_count * 3;
        &self.basis[i * n..(i + 1) * n]
    }

    /// Unrotated vertices `template + Σ expr_i · B_i`, flattened.
    pub fn shape_vertices(&self, expr: &[f64]) -> Result<Vec<f64>> {
        if expr.len() != self.expr_dim {
            return Err(Error::shape("decode_mesh", format!("{} coefficients for expr_dim {}", expr.len(), self.expr_dim)));
        }
        let mut v = self.template.clone();
        for (i, &c) in expr.iter().enumerate() {
            if c != 0.0 {
                v.iter_mut().zip(self.basis_vector(i)).for_each(|(a, b)| *a += c * b);
            }
        }
        Ok(v)
    }

    pub fn decode_mesh(&self, frame: &MotionFrame) -> Result<FaceMesh> {
        let v = self.shape_vertices(&frame.expr)?;
        let r = rotation_matrix(&frame.pose);
        let vertices = v
            .chunks(3)
            .map(|p| {
                let mut out = [0.0; 3];
                for (i, o) in out.iter_mut().enumerate() {
                    *o = r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2];
                }
                out
            })
            .collect();
        Ok(FaceMesh { vertices })
    }
}

type Mat3 = [[f64; 3]; 3];

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

/// `R = R_z(roll) · R_x(pitch) · R_y(yaw)`, right-handed.
pub fn rotation_matrix(pose: &PoseAngles) -> Mat3 {
    let (sy, cy) = pose.yaw.sin_cos();
    let (sp, cp) = pose.pitch.sin_cos();
    let (sr, cr) = pose.roll.sin_cos();
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
    let rz = [[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]];
    mat_mul(&rz, &mat_mul(&rx, &ry))
}

/// Mean absolute coordinate difference of two meshes of equal shape.
pub fn mesh_l1(a: &FaceMesh, b: &FaceMesh) -> Result<f64> {
    if a.vertices.len() != b.vertices.len() || a.vertices.is_empty() {
        return Err(Error::shape("mesh_l1", format!("{} vs {} vertices", a.vertices.len(), b.vertices.len())));
    }
    let total: f64 = a.vertices.iter().zip(&b.vertices).flat_map(|(p, q)| (0..3).map(move |i| (p[i] - q[i]).abs())).sum();
    Ok(total / (3 * a.vertices.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::FRAC_PI_2;

    fn frame(expr: Vec<f64>, yaw: f64, pitch: f64, roll: f64) -> MotionFrame {
        MotionFrame { expr, pose: PoseAngles::new(yaw, pitch, roll) }
    }

    #[test]
    fn synthetic_model_is_deterministic() {
        let a = FaceModel::synthetic(7, 512, 16).unwrap();
        let b = FaceModel::synthetic(7, 512, 16).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, FaceModel::synthetic(8, 512, 16).unwrap());
    }

    #[test]
    fn basis_is_orthonormal() {
        let m = FaceModel::synthetic(7, 512, 16).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                let dot: f64 = m.basis_vector(i).iter().zip(m.basis_vector(j)).map(|(a, b)| a * b).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-6, "<B{i},B{j}> = {dot}");
            }
        }
    }

    #[test]
    fn basis_matches_householder_qr_oracle() {
        let m = FaceModel::synthetic(1, 12, 2).unwrap();
        let draws = basis_draws(1, 12, 2);
        // Columns of the oracle matrix are the draws; QR with a positive
        // diagonal in R reproduces Gram-Schmidt.
        let a = DMatrix::from_fn(36, 2, |r, c| draws[c * 36 + r]);
        let qr = a.qr();
        let (q, r) = (qr.q(), qr.r());
        for c in 0..2 {
            let sign = r[(c, c)].signum();
            for row in 0..36 {
                let want = q[(row, c)] * sign;
                assert!((m.basis_vector(c)[row] - want).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn template_is_centered_ellipsoid() {
        let m = FaceModel::synthetic(3, 512, 16).unwrap();
        for axis in 0..3 {
            let mean: f64 = m.template().iter().skip(axis).step_by(3).sum::<f64>() / 512.0;
            assert!(mean.abs() < 1e-12);
        }
        let ys: Vec<f64> = m.template().iter().skip(1).step_by(3).copied().collect();
        let span = ys.iter().cloned().fold(f64::MIN, f64::max) - ys.iter().cloned().fold(f64::MAX, f64::min);
        assert!(span <= 2.0 && span > 1.98, "{span}");
    }

    #[test]
    fn rejects_oversized_expression_space() {
        assert!(FaceModel::synthetic(1, 4, 13).is_err());
        assert!(FaceModel::synthetic(1, 4, 0).is_err());
        assert!(FaceModel::synthetic(1, 4, 5).is_err());
    }

    #[test]
    fn zero_pose_is_identity() {
        let r = rotation_matrix(&PoseAngles::default());
        assert_eq!(r, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    }

    #[test]
    fn quarter_yaw_maps_x_to_minus_z() {
        let r = rotation_matrix(&PoseAngles::new(FRAC_PI_2, 0.0, 0.0));
        let v = [r[0][0], r[1][0], r[2][0]];
        assert!((v[0]).abs() < 1e-9 && v[1].abs() < 1e-9 && (v[2] + 1.0).abs() < 1e-9, "{v:?}");
    }

    #[test]
    fn decode_zero_frame_is_template() {
        let m = FaceModel::synthetic(2, 40, 4).unwrap();
        let mesh = m.decode_mesh(&frame(vec![0.0; 4], 0.0, 0.0, 0.0)).unwrap();
        let flat: Vec<f64> = mesh.vertices.iter().flatten().copied().collect();
        assert_eq!(flat, m.template());
    }

    #[test]
    fn decode_rejects_wrong_dimension() {
        let m = FaceModel::synthetic(2, 40, 4).unwrap();
        assert!(m.decode_mesh(&frame(vec![0.0; 3], 0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn decode_quarter_yaw_matches_hand_rotation() {
        let m = FaceModel::synthetic(1, 12, 2).unwrap();
        let mesh = m.decode_mesh(&frame(vec![1.0, 0.0], FRAC_PI_2, 0.0, 0.0)).unwrap();
        // R_y(π/2)·(x, y, z) = (z, y, -x)
        for (i, v) in mesh.vertices.iter().enumerate() {
            let p: Vec<f64> = (0..3).map(|k| m.template()[3 * i + k] + m.basis_vector(0)[3 * i + k]).collect();
            let want = [p[2], p[1], -p[0]];
            for k in 0..3 {
                assert!((v[k] - want[k]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn mesh_l1_cases() {
        let a = FaceMesh { vertices: vec![[0.5, -1.0, 2.0]; 3] };
        assert_eq!(mesh_l1(&a, &a).unwrap(), 0.0);
        let b = FaceMesh { vertices: a.vertices.iter().map(|v| [v[0] + 1.0, v[1] + 1.0, v[2] + 1.0]).collect() };
        assert!((mesh_l1(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        let c = FaceMesh { vertices: vec![[0.0; 3]; 2] };
        assert!(mesh_l1(&a, &c).is_err());
    }

    #[test]
    fn mesh_l1_random_pair_matches_direct_sum() {
        // Reference values computed independently (numpy mean(abs(a-b))).
        let a = FaceMesh {
            vertices: vec![[0.1, -0.4, 1.3], [2.2, 0.0, -0.7], [-1.1, 0.9, 0.25], [0.6, -2.5, 3.1]],
        };
        let b = FaceMesh {
            vertices: vec![[-0.3, 0.2, 1.0], [1.9, 0.5, -0.2], [-1.6, 1.4, 0.05], [0.2, -2.0, 2.0]],
        };
        assert!((mesh_l1(&a, &b).unwrap() - 0.4833333333333334).abs() <= 1e-12);
    }

    fn rand_expr(seed: u64, e: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..e).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    proptest! {
        #[test]
        fn rotation_is_orthonormal(yaw in -3.14f64..3.14, pitch in -3.14f64..3.14, roll in -3.14f64..3.14,
                                   v in proptest::array::uniform3(-5.0f64..5.0)) {
            let r = rotation_matrix(&PoseAngles::new(yaw, pitch, roll));
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((dot - want).abs() < 1e-9);
                }
            }
            let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
                + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
            prop_assert!((det - 1.0).abs() < 1e-9);
            let rv: Vec<f64> = (0..3).map(|i| (0..3).map(|k| r[i][k] * v[k]).sum()).collect();
            let n0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let n1 = rv.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n0 - n1).abs() < 1e-9);
        }

        #[test]
        fn decode_is_linear_at_zero_pose(s1 in 0u64..1000, s2 in 0u64..1000) {
            let m = FaceModel::synthetic(5, 64, 8).unwrap();
            let (e1, e2) = (rand_expr(s1, 8), rand_expr(s2 + 5000, 8));
            let sum: Vec<f64> = e1.iter().zip(&e2).map(|(a, b)| a + b).collect();
            let d = |e: Vec<f64>| m.decode_mesh(&frame(e, 0.0, 0.0, 0.0)).unwrap().vertices;
            let (a, b, c) = (d(e1), d(e2), d(sum));
            let t = m.template();
            for i in 0..64 {
                for k in 0..3 {
                    prop_assert!((c[i][k] - (a[i][k] + b[i][k] - t[3 * i + k])).abs() <= 1e-9);
                }
            }
        }

        #[test]
        fn rotation_preserves_pairwise_distances(seed in 0u64..1000, yaw in -3.0f64..3.0, pitch in -3.0f64..3.0, roll in -3.0f64..3.0) {
            let m = FaceModel::synthetic(9, 32, 4).unwrap();
            let e = rand_expr(seed, 4);
            let flat = m.decode_mesh(&frame(e.clone(), 0.0, 0.0, 0.0)).unwrap().vertices;
            let rot = m.decode_mesh(&frame(e, yaw, pitch, roll)).unwrap().vertices;
            let dist = |p: &[f64; 3], q: &[f64; 3]| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>().sqrt();
            for i in 0..32 {
                for j in (i + 1)..32 {
                    prop_assert!((dist(&flat[i], &flat[j]) - dist(&rot[i], &rot[j])).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn mesh_l1_is_a_metric(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut mesh = || FaceMesh { vertices: (0..5).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect() };
            let (a, b, c) = (mesh(), mesh(), mesh());
            let ab = mesh_l1(&a, &b).unwrap();
            prop_assert!((ab - mesh_l1(&b, &a).unwrap()).abs() <= 1e-12);
            prop_assert!(ab <= mesh_l1(&a, &c).unwrap() + mesh_l1(&c, &b).unwrap() + 1e-12);
        }
    }
}
