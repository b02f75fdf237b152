//! Linear 3D shape model: mean shape plus identity and expression bases,
//! posed by a similarity transform and projected with a weak-perspective
//! camera.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Half extents of the face mask in model units at unit scale. A 32 px
/// image frames the mask with a few pixels of margin.
pub const MASK_HALF_WIDTH: f64 = 10.0;
pub const MASK_HALF_HEIGHT: f64 = 12.5;
pub const MASK_DEPTH: f64 = 7.0;

/// Canonical landmark sites in normalized mask coordinates (u right, v up).
const LANDMARK_SITES: [(f64, f64); 16] = [
    (-0.55, 0.25),
    (0.55, 0.25),
    (-0.20, 0.25),
    (0.20, 0.25),
    (-0.38, 0.45),
    (0.38, 0.45),
    (0.0, -0.05),
    (0.0, 0.20),
    (-0.12, -0.15),
    (0.12, -0.15),
    (-0.30, -0.50),
    (0.30, -0.50),
    (0.0, -0.42),
    (0.0, -0.58),
    (0.0, -0.85),
    (0.0, 0.70),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub seed: u64,
    /// Approximate vertex count; the mask grid is sized to land near it.
    pub vertices: usize,
    pub id_dims: usize,
    pub exp_dims: usize,
    pub landmarks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            vertices: 1500,
            id_dims: 30,
            exp_dims: 29,
            landmarks: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MorphableModel {
    /// Interleaved `x0 y0 z0 x1 ...`, length `3 * num_vertices`.
    pub mean_shape: Vec<f64>,
    /// Row-major `3N x id_dims`; columns orthonormal.
    pub identity_basis: Vec<f64>,
    /// Row-major `3N x exp_dims`; columns orthonormal.
    pub expression_basis: Vec<f64>,
    pub landmark_indices: Vec<usize>,
    pub num_vertices: usize,
    pub id_dims: usize,
    pub exp_dims: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceParams {
    pub scale: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub roll: f64,
    pub translation: [f64; 3],
    pub alpha_id: Vec<f64>,
    pub alpha_exp: Vec<f64>,
}

impl FaceParams {
    /// Unit scale, no rotation or translation, zero coefficients.
    pub fn neutral(model: &MorphableModel) -> Self {
        Self {
            scale: 1.0,
            pitch: 0.0,
            yaw: 0.0,
            roll: 0.0,
            translation: [0.0; 3],
            alpha_id: vec![0.0; model.id_dims],
            alpha_exp: vec![0.0; model.exp_dims],
        }
    }

    /// `(s, pitch, yaw, roll, tx, ty, tz)`.
    pub fn pose_vector(&self) -> [f64; 7] {
        let [tx, ty, tz] = self.translation;
        [self.scale, self.pitch, self.yaw, self.roll, tx, ty, tz]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shape3D {
    pub points: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// Pixel coordinates `(column, row)`.
    pub points2d: Vec<[f64; 2]>,
    /// Larger is nearer the camera.
    pub depth: Vec<f64>,
}

/// `R = Rz(roll) * Ry(yaw) * Rx(pitch)`.
pub fn rotation_from_euler(pitch: f64, yaw: f64, roll: f64) -> Matrix3<f64> {
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    let (sr, cr) = roll.sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cp, -sp, 0.0, sp, cp);
    let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let rz = Matrix3::new(cr, -sr, 0.0, sr, cr, 0.0, 0.0, 0.0, 1.0);
    rz * ry * rx
}

impl MorphableModel {
    /// Procedural model: a bilaterally symmetric ellipsoidal face mask with
    /// depth relief, and orthonormalized smooth random deformation bases.
    pub fn generate(config: &ModelConfig) -> Result<Self> {
        if config.vertices < 16 {
            return Err(invalid("model needs at least 16 vertices"));
        }
        let mean = mask_vertices(config.vertices);
        let n = mean.len();
        if config.id_dims == 0 || config.id_dims > 3 * n || config.exp_dims > 3 * n {
            return Err(invalid("basis width out of range"));
        }
        if config.landmarks == 0 || config.landmarks > n {
            return Err(invalid(format!("landmark count {} out of range", config.landmarks)));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let identity_basis = smooth_orthonormal_basis(&mean, config.id_dims, &mut rng);
        let expression_basis = smooth_orthonormal_basis(&mean, config.exp_dims, &mut rng);
        let landmark_indices = pick_landmarks(&mean, config.landmarks, &mut rng);

        Ok(Self {
            mean_shape: mean.iter().flatten().copied().collect(),
            identity_basis,
            expression_basis,
            landmark_indices,
            num_vertices: n,
            id_dims: config.id_dims,
            exp_dims: config.exp_dims,
        })
    }

    /// Assemble a model from explicit parts, validating dimensions.
    pub fn from_parts(
        mean_shape: Vec<f64>,
        identity_basis: Vec<f64>,
        id_dims: usize,
        expression_basis: Vec<f64>,
        exp_dims: usize,
        landmark_indices: Vec<usize>,
    ) -> Result<Self> {
        if !mean_shape.len().is_multiple_of(3) {
            return Err(invalid("mean shape length is not a multiple of 3"));
        }
        let n = mean_shape.len() / 3;
        if identity_basis.len() != 3 * n * id_dims || expression_basis.len() != 3 * n * exp_dims {
            return Err(invalid("basis size does not match vertex count"));
        }
        let model = Self {
            mean_shape,
            identity_basis,
            expression_basis,
            landmark_indices,
            num_vertices: n,
            id_dims,
            exp_dims,
        };
        model.validate_landmarks()?;
        Ok(model)
    }

    pub fn validate_landmarks(&self) -> Result<()> {
        let mut seen = vec![false; self.num_vertices];
        for &i in &self.landmark_indices {
            if i >= self.num_vertices {
                return Err(invalid(format!("landmark index {i} out of range")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(invalid(format!("duplicate landmark index {i}")));
            }
        }
        Ok(())
    }

    pub fn num_landmarks(&self) -> usize {
        self.landmark_indices.len()
    }

    pub fn mean_vertex(&self, v: usize) -> [f64; 3] {
        [self.mean_shape[3 * v], self.mean_shape[3 * v + 1], self.mean_shape[3 * v + 2]]
    }
}

/// `S = s * R * (mean + id_basis * alpha_id + exp_basis * alpha_exp) + T`, per vertex.
pub fn instantiate_shape(model: &MorphableModel, params: &FaceParams) -> Result<Shape3D> {
    if params.alpha_id.len() != model.id_dims {
        return Err(invalid(format!(
            "alpha_id has length {}, basis width is {}",
            params.alpha_id.len(),
            model.id_dims
        )));
    }
    if params.alpha_exp.len() != model.exp_dims {
        return Err(invalid(format!(
            "alpha_exp has length {}, basis width is {}",
            params.alpha_exp.len(),
            model.exp_dims
        )));
    }
    let r = rotation_from_euler(params.pitch, params.yaw, params.roll);
    let t = Vector3::from(params.translation);
    let (di, de) = (model.id_dims, model.exp_dims);

    let points = (0..model.num_vertices)
        .map(|v| {
            let mut local = Vector3::zeros();
            for c in 0..3 {
                let row = 3 * v + c;
                let id_row = &model.identity_basis[row * di..(row + 1) * di];
                let exp_row = &model.expression_basis[row * de..(row + 1) * de];
                local[c] = model.mean_shape[row] + dot(id_row, &params.alpha_id) + dot(exp_row, &params.alpha_exp);
            }
            let p = params.scale * (r * local) + t;
            [p.x, p.y, p.z]
        })
        .collect();
    Ok(Shape3D { points })
}

/// Orthographic projection onto the image plane centred at `size / 2`,
/// with the image row axis pointing down.
pub fn project_weak_perspective(shape: &Shape3D, image_size: usize) -> Projection {
    let c = image_size as f64 / 2.0;
    let (points2d, depth) = shape.points.iter().map(|&[x, y, z]| ([c + x, c - y], z)).unzip();
    Projection { points2d, depth }
}

/// Landmark pixel positions flattened `(x1, y1, ..., xK, yK)` and mapped to
/// `[-1, 1]` by the image size.
pub fn landmarks_2d(model: &MorphableModel, params: &FaceParams, image_size: usize) -> Result<Vec<f64>> {
    let shape = instantiate_shape(model, params)?;
    let proj = project_weak_perspective(&shape, image_size);
    Ok(normalized_landmarks(model, &proj, image_size))
}

pub(crate) fn normalized_landmarks(model: &MorphableModel, proj: &Projection, image_size: usize) -> Vec<f64> {
    let half = image_size as f64 / 2.0;
    model
        .landmark_indices
        .iter()
        .flat_map(|&i| {
            let [x, y] = proj.points2d[i];
            [(x - half) / half, (y - half) / half]
        })
        .collect()
}

/// Copies of `base` with yaw stepped from `yaw_min` to `yaw_max` inclusive.
pub fn pose_sweep(base: &FaceParams, yaw_min: f64, yaw_max: f64, step: f64) -> Result<Vec<FaceParams>> {
    if !(step > 0.0) || !(yaw_min <= yaw_max) {
        return Err(invalid("pose sweep needs step > 0 and yaw_min <= yaw_max"));
    }
    let count = ((yaw_max - yaw_min) / step + 1e-9).floor() as usize + 1;
    Ok((0..count)
        .map(|k| FaceParams {
            yaw: yaw_min + k as f64 * step,
            ..base.clone()
        })
        .collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Grid side length (odd) whose inscribed disc holds roughly `target` points.
fn grid_side(target: usize) -> usize {
    let side = (4.0 * target as f64 / std::f64::consts::PI).sqrt().round() as usize;
    (side | 1).max(5)
}

fn mask_vertices(target: usize) -> Vec<[f64; 3]> {
    let side = grid_side(target);
    let half = (side / 2) as i64;
    let step = 1.0 / half as f64;
    let mut out = Vec::new();
    // Top row first; offsets from the centre keep mirrored coordinates exact negations.
    for j in (-half..=half).rev() {
        let v = j as f64 * step;
        for i in -half..=half {
            let u = i as f64 * step;
            let r2 = u * u + v * v;
            if r2 > 1.0 + 1e-12 {
                continue;
            }
            let z = MASK_DEPTH * (1.0 - r2).max(0.0).sqrt() + relief(u, v);
            out.push([MASK_HALF_WIDTH * u, MASK_HALF_HEIGHT * v, z]);
        }
    }
    out
}

fn gauss(du: f64, dv: f64, su: f64, sv: f64) -> f64 {
    (-(du * du / su + dv * dv / sv)).exp()
}

/// Facial relief; depends on `|u|` so the mask stays mirror symmetric.
fn relief(u: f64, v: f64) -> f64 {
    let a = u.abs();
    let nose = 2.8 * gauss(a, v + 0.02, 0.010, 0.06);
    let tip = 1.2 * gauss(a, v + 0.08, 0.012, 0.008);
    let sockets = -1.6 * gauss(a - 0.38, v - 0.25, 0.012, 0.008);
    let brows = 0.9 * gauss(a - 0.36, v - 0.44, 0.05, 0.004);
    let cheeks = 0.7 * gauss(a - 0.45, v + 0.18, 0.03, 0.03);
    let mouth = -0.7 * gauss(a, v + 0.50, 0.06, 0.003);
    let chin = 0.6 * gauss(a, v + 0.82, 0.04, 0.01);
    nose + tip + sockets + brows + cheeks + mouth + chin
}

/// Smooth random displacement fields (low-frequency cosine mixtures of the
/// mask coordinates), orthonormalized with a QR factorization. Row-major.
fn smooth_orthonormal_basis(mean: &[[f64; 3]], width: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = mean.len();
    if width == 0 {
        return Vec::new();
    }
    const FEATURES: usize = 6;
    let mut m = DMatrix::<f64>::zeros(3 * n, width);
    for k in 0..width {
        for c in 0..3 {
            let feats: Vec<(f64, f64, f64, f64)> = (0..FEATURES)
                .map(|_| {
                    let wu: f64 = 2.5 * rng.sample::<f64, _>(StandardNormal);
                    let wv: f64 = 2.5 * rng.sample::<f64, _>(StandardNormal);
                    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                    let amp: f64 = rng.sample(StandardNormal);
                    (wu, wv, phase, amp)
                })
                .collect();
            for (v, p) in mean.iter().enumerate() {
                let (u, w) = (p[0] / MASK_HALF_WIDTH, p[1] / MASK_HALF_HEIGHT);
                m[(3 * v + c, k)] = feats.iter().map(|&(wu, wv, ph, a)| a * (wu * u + wv * w + ph).cos()).sum();
            }
        }
    }
    let q = m.qr().q();
    let mut out = vec![0.0; 3 * n * width];
    for r in 0..3 * n {
        for k in 0..width {
            out[r * width + k] = q[(r, k)];
        }
    }
    out
}

fn pick_landmarks(mean: &[[f64; 3]], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut used = vec![false; mean.len()];
    let mut out = Vec::with_capacity(k);
    for &(u, v) in LANDMARK_SITES.iter().take(k) {
        let (x, y) = (u * MASK_HALF_WIDTH, v * MASK_HALF_HEIGHT);
        let best = (0..mean.len())
            .filter(|&i| !used[i])
            .min_by(|&a, &b| {
                let da = (mean[a][0] - x).powi(2) + (mean[a][1] - y).powi(2);
                let db = (mean[b][0] - x).powi(2) + (mean[b][1] - y).powi(2);
                da.total_cmp(&db).then(a.cmp(&b))
            })
            .expect("more vertices than landmarks");
        used[best] = true;
        out.push(best);
    }
    while out.len() < k {
        let i = rng.gen_range(0..mean.len());
        if !used[i] {
            used[i] = true;
            out.push(i);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_PI_2;

    fn small_model() -> MorphableModel {
        MorphableModel::generate(&ModelConfig {
            vertices: 300,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_angles_give_identity() {
        assert_eq!(rotation_from_euler(0.0, 0.0, 0.0), Matrix3::identity());
    }

    #[test]
    fn quarter_yaw_sends_x_to_minus_z() {
        let p = rotation_from_euler(0.0, FRAC_PI_2, 0.0) * Vector3::new(1.0, 0.0, 0.0);
        assert_abs_diff_eq!(p.x, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.y, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.z, -1.0, epsilon = 1e-15);
    }

    #[test]
    fn default_model_dimensions() {
        let m = MorphableModel::generate(&ModelConfig::default()).unwrap();
        assert!((1400..=1700).contains(&m.num_vertices), "{}", m.num_vertices);
        assert_eq!(m.id_dims, 30);
        assert_eq!(m.exp_dims, 29);
        assert_eq!(m.num_landmarks(), 16);
        m.validate_landmarks().unwrap();
    }

    #[test]
    fn bases_are_orthonormal() {
        let m = small_model();
        let n3 = 3 * m.num_vertices;
        for (basis, d) in [(&m.identity_basis, m.id_dims), (&m.expression_basis, m.exp_dims)] {
            for a in 0..d {
                for b in 0..d {
                    let g: f64 = (0..n3).map(|r| basis[r * d + a] * basis[r * d + b]).sum();
                    let want = if a == b { 1.0 } else { 0.0 };
                    assert_abs_diff_eq!(g, want, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn mean_shape_is_mirror_symmetric() {
        let m = small_model();
        let pts: Vec<[f64; 3]> = (0..m.num_vertices).map(|v| m.mean_vertex(v)).collect();
        for p in &pts {
            assert!(pts
                .iter()
                .any(|q| (q[0] + p[0]).abs() < 1e-12 && (q[1] - p[1]).abs() < 1e-12 && (q[2] - p[2]).abs() < 1e-12));
        }
    }

    #[test]
    fn neutral_params_reproduce_mean_shape() {
        let m = small_model();
        let s = instantiate_shape(&m, &FaceParams::neutral(&m)).unwrap();
        for (v, p) in s.points.iter().enumerate() {
            assert_eq!(*p, m.mean_vertex(v));
        }
    }

    #[test]
    fn scale_and_translation() {
        let m = small_model();
        let params = FaceParams {
            scale: 2.0,
            translation: [1.0, 0.0, 0.0],
            ..FaceParams::neutral(&m)
        };
        let s = instantiate_shape(&m, &params).unwrap();
        for (v, p) in s.points.iter().enumerate() {
            let q = m.mean_vertex(v);
            assert_eq!(*p, [2.0 * q[0] + 1.0, 2.0 * q[1], 2.0 * q[2]]);
        }
    }

    #[test]
    fn coefficient_length_mismatch_is_rejected() {
        let m = small_model();
        let mut p = FaceParams::neutral(&m);
        p.alpha_id.pop();
        assert!(instantiate_shape(&m, &p).is_err());
    }

    #[test]
    fn projection_centre_and_offset() {
        let s = Shape3D {
            points: vec![[0.0, 0.0, 5.0], [10.0, 0.0, 0.0]],
        };
        let p = project_weak_perspective(&s, 64);
        assert_eq!(p.points2d, vec![[32.0, 32.0], [42.0, 32.0]]);
        assert_eq!(p.depth, vec![5.0, 0.0]);
    }

    #[test]
    fn landmark_normalization() {
        // One landmark at the centroid, a second that projects to pixel (0, 0).
        let mean = vec![0.0, 0.0, 1.0, -32.0, 32.0, 0.0];
        let m = MorphableModel::from_parts(mean, vec![], 0, vec![], 0, vec![0, 1]).unwrap();
        let l = landmarks_2d(&m, &FaceParams::neutral(&m), 64).unwrap();
        assert_eq!(l, vec![0.0, 0.0, -1.0, -1.0]);
    }

    #[test]
    fn from_parts_rejects_bad_landmarks() {
        let mean = vec![0.0; 6];
        assert!(MorphableModel::from_parts(mean.clone(), vec![], 0, vec![], 0, vec![2]).is_err());
        assert!(MorphableModel::from_parts(mean, vec![], 0, vec![], 0, vec![1, 1]).is_err());
    }

    #[test]
    fn sweep_counts() {
        let m = small_model();
        let base = FaceParams::neutral(&m);
        let d = |x: f64| x.to_radians();
        assert_eq!(pose_sweep(&base, d(-90.0), d(90.0), d(5.0)).unwrap().len(), 37);
        let three = pose_sweep(&base, d(-90.0), d(90.0), d(90.0)).unwrap();
        let yaws: Vec<f64> = three.iter().map(|p| p.yaw).collect();
        assert_eq!(yaws.len(), 3);
        assert_abs_diff_eq!(yaws[0], -FRAC_PI_2, epsilon = 1e-9);
        assert_abs_diff_eq!(yaws[1], 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(yaws[2], FRAC_PI_2, epsilon = 1e-9);
        assert!(pose_sweep(&base, 1.0, 0.0, 0.1).is_err());
        assert!(pose_sweep(&base, 0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn pose_vector_order() {
        let m = small_model();
        let p = FaceParams {
            scale: 1.5,
            pitch: 0.1,
            yaw: 0.2,
            roll: 0.3,
            translation: [4.0, 5.0, 6.0],
            ..FaceParams::neutral(&m)
        };
        assert_eq!(p.pose_vector(), [1.5, 0.1, 0.2, 0.3, 4.0, 5.0, 6.0]);
    }
}
