//! Independent oracles and small fixtures shared by the integration tests.
#![allow(dead_code)]

use disent::dataset::{generate_corpus_with_model, pose_bin, Corpus, GenerationConfig, Jitter, PoseLayout};
use disent::eval::Metric;
use disent::morphable::{FaceParams, ModelConfig, MorphableModel};
use disent::nn::{ArchConfig, Mat};
use disent::render::{Image, Texture};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn gaussian_vec<R: Rng>(rng: &mut R, n: usize, sd: f64) -> Vec<f64> {
    (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// A model with unstructured Gaussian mean and bases of random size.
pub fn random_model<R: Rng>(rng: &mut R) -> MorphableModel {
    let n = rng.gen_range(4..80);
    let di = rng.gen_range(1..12);
    let de = rng.gen_range(0..10);
    let lmk = (0..rng.gen_range(1..=n.min(6))).collect();
    MorphableModel::from_parts(
        gaussian_vec(rng, 3 * n, 10.0),
        gaussian_vec(rng, 3 * n * di, 1.0),
        di,
        gaussian_vec(rng, 3 * n * de, 1.0),
        de,
        lmk,
    )
    .unwrap()
}

pub fn random_params<R: Rng>(rng: &mut R, model: &MorphableModel) -> FaceParams {
    let half_pi = std::f64::consts::FRAC_PI_2;
    FaceParams {
        scale: rng.gen_range(0.2..3.0),
        pitch: rng.gen_range(-half_pi..half_pi),
        yaw: rng.gen_range(-half_pi..half_pi),
        roll: rng.gen_range(-half_pi..half_pi),
        translation: [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)],
        alpha_id: gaussian_vec(rng, model.id_dims, 3.0),
        alpha_exp: gaussian_vec(rng, model.exp_dims, 3.0),
    }
}

/// Dense form: reshape `mean + [A_id A_exp] [a_id; a_exp]` to 3 x N, then
/// `s R X + t 1ᵀ` with R built from explicit axis rotations.
pub fn dense_shape(model: &MorphableModel, p: &FaceParams) -> DMatrix<f64> {
    let n = model.num_vertices;
    let (di, de) = (model.id_dims, model.exp_dims);
    let mut basis = DMatrix::zeros(3 * n, di + de);
    for r in 0..3 * n {
        for c in 0..di {
            basis[(r, c)] = model.identity_basis[r * di + c];
        }
        for c in 0..de {
            basis[(r, di + c)] = model.expression_basis[r * de + c];
        }
    }
    let coeff = DVector::from_iterator(di + de, p.alpha_id.iter().chain(&p.alpha_exp).copied());
    let flat = DVector::from_column_slice(&model.mean_shape) + basis * coeff;
    let x = DMatrix::from_column_slice(3, n, flat.as_slice());
    let (sp, cp) = p.pitch.sin_cos();
    let (sy, cy) = p.yaw.sin_cos();
    let (sr, cr) = p.roll.sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cp, -sp, 0.0, sp, cp);
    let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let rz = Matrix3::new(cr, -sr, 0.0, sr, cr, 0.0, 0.0, 0.0, 1.0);
    let r = DMatrix::from_column_slice(3, 3, (rz * ry * rx).as_slice());
    let t = Vector3::from(p.translation);
    let mut out = r * x * p.scale;
    for mut col in out.column_iter_mut() {
        col += DVector::from_column_slice(t.as_slice());
    }
    out
}

/// Per pixel, the deepest covering vertex (ties to the brighter texel); a
/// vertex at rounded `(c, r)` covers rows `r-1..=r` and columns `c-1..=c`.
pub fn brute_force_render(points: &[[f64; 2]], depth: &[f64], tex: &Texture, size: usize) -> Image {
    let mut img = Image::black(size);
    for row in 0..size {
        for col in 0..size {
            let mut best: Option<(f64, f64)> = None;
            for (v, &[x, y]) in points.iter().enumerate() {
                if !(x.is_finite() && y.is_finite() && depth[v].is_finite()) {
                    continue;
                }
                let (c, r) = (x.round() as i64, y.round() as i64);
                let covers = (r - 1..=r).contains(&(row as i64)) && (c - 1..=c).contains(&(col as i64));
                if !covers {
                    continue;
                }
                let cand = (depth[v], tex.intensity[v]);
                best = Some(match best {
                    Some(b) if b.0 > cand.0 || (b.0 == cand.0 && b.1 >= cand.1) => b,
                    _ => cand,
                });
            }
            if let Some((_, s)) = best {
                img.pixels[row * size + col] = s as f32;
            }
        }
    }
    img
}

fn similarity(a: &[f64], b: &[f64], metric: Metric) -> f64 {
    match metric {
        Metric::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        }
        Metric::Euclidean => -a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>(),
    }
}

/// Nearest-neighbour identification by exhaustive scan, lowest gallery
/// index on ties, accuracies per 15-degree bin.
pub fn brute_force_rank1(gallery: &Mat, g_labels: &[u32], probe: &Mat, p_labels: &[u32], yaws: &[f64], metric: Metric) -> Vec<Option<f64>> {
    let mut hit = [0usize; 6];
    let mut total = [0usize; 6];
    for i in 0..probe.rows {
        let mut best = 0;
        let mut best_s = f64::NEG_INFINITY;
        for j in 0..gallery.rows {
            let s = similarity(probe.row(i), gallery.row(j), metric);
            if s > best_s {
                best_s = s;
                best = j;
            }
        }
        let b = pose_bin(yaws[i]).unwrap().0;
        total[b] += 1;
        hit[b] += (g_labels[best] == p_labels[i]) as usize;
    }
    (0..6).map(|b| (total[b] > 0).then(|| hit[b] as f64 / total[b] as f64)).collect()
}

pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        seed: 7,
        vertices: 400,
        id_dims: 10,
        exp_dims: 6,
        landmarks: 8,
    }
}

pub fn small_generation(source: &str, identities: usize, poses: PoseLayout, image_size: usize) -> GenerationConfig {
    GenerationConfig {
        source: source.into(),
        num_identities: identities,
        poses,
        image_size,
        model: small_model_config(),
        texture_seed: 11,
        sigma_id: 6.0,
        sigma_exp: 3.0,
        jitter: Jitter::default(),
    }
}

/// Full 5-degree sweep at 16 px over `identities` identities.
pub fn sweep_corpus(identities: usize, seed: u64) -> Corpus {
    let cfg = small_generation("target", identities, PoseLayout::Sweep { step_deg: 5.0 }, 16);
    let model = MorphableModel::generate(&cfg.model).unwrap();
    generate_corpus_with_model(&cfg, &model, seed).unwrap()
}

pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        image_size: 16,
        conv_channels: vec![4, 8],
        rich_dim: 32,
        identity_dim: 16,
        nonidentity_dim: 8,
        pose_dim: 7,
        landmark_dim: 16,
        num_classes: 2,
        recon_hidden: 24,
    }
}

/// Random embeddings with `ids` identities and yaws covering every bin.
pub fn random_embeddings<R: Rng>(rng: &mut R, ids: usize, per_id: usize, dim: usize) -> (Mat, Vec<u32>, Vec<f64>) {
    let n = ids * per_id;
    let data = gaussian_vec(rng, n * dim, 1.0);
    let labels = (0..n).map(|i| (i / per_id) as u32).collect();
    let yaws = (0..n).map(|i| ((i % per_id) % 6) as f64 * 15f64.to_radians() + 0.1).collect();
    (Mat::from_vec(n, dim, data).unwrap(), labels, yaws)
}
