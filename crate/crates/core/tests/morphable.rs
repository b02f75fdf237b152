mod common;

use disent::morphable::{instantiate_shape, landmarks_2d, pose_sweep, project_weak_perspective, rotation_from_euler, FaceParams, MorphableModel};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn relative_error(model: &MorphableModel, p: &FaceParams) -> f64 {
    let got = instantiate_shape(model, p).unwrap();
    let want = common::dense_shape(model, p);
    let mut diff = 0.0;
    for (v, pt) in got.points.iter().enumerate() {
        for c in 0..3 {
            diff += (pt[c] - want[(c, v)]).powi(2);
        }
    }
    diff.sqrt() / want.norm()
}

#[test]
fn matches_dense_oracle_on_random_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..100 {
        let model = common::random_model(&mut rng);
        let p = common::random_params(&mut rng, &model);
        let e = relative_error(&model, &p);
        assert!(e < 1e-10, "relative error {e}");
    }
}

#[test]
fn generated_model_matches_dense_oracle() {
    let model = MorphableModel::generate(&common::small_model_config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let p = common::random_params(&mut rng, &model);
        assert!(relative_error(&model, &p) < 1e-10);
    }
}

fn small_model() -> MorphableModel {
    MorphableModel::generate(&common::small_model_config()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rotation_is_orthonormal(p in -3.2f64..3.2, y in -3.2f64..3.2, r in -3.2f64..3.2) {
        let m = rotation_from_euler(p, y, r);
        let err = (m.transpose() * m - nalgebra::Matrix3::identity()).abs().max();
        prop_assert!(err < 1e-12);
        prop_assert!((m.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sweep_keeps_identity_and_expression(seed in 0u64..1000, step in 1.0f64..45.0) {
        let model = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = common::random_params(&mut rng, &model);
        let views = pose_sweep(&base, -90f64.to_radians(), 90f64.to_radians(), step.to_radians()).unwrap();
        prop_assert!(!views.is_empty());
        for v in &views {
            prop_assert_eq!(&v.alpha_id, &base.alpha_id);
            prop_assert_eq!(&v.alpha_exp, &base.alpha_exp);
            prop_assert_eq!(v.translation, base.translation);
            prop_assert!(v.yaw <= 90f64.to_radians() + 1e-9);
        }
        for w in views.windows(2) {
            prop_assert!((w[1].yaw - w[0].yaw - step.to_radians()).abs() < 1e-12);
        }
    }

    #[test]
    fn rigid_motion_preserves_pairwise_distances(seed in 0u64..1000) {
        let model = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = common::random_params(&mut rng, &model);
        let canon = FaceParams { scale: 1.0, pitch: 0.0, yaw: 0.0, roll: 0.0, translation: [0.0; 3], ..p.clone() };
        let a = instantiate_shape(&model, &p).unwrap().points;
        let b = instantiate_shape(&model, &canon).unwrap().points;
        let d = |x: [f64; 3], y: [f64; 3]| ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2)).sqrt();
        for (i, j) in [(0usize, 1usize), (5, 90), (17, 200)] {
            prop_assert!((d(a[i], a[j]) - p.scale * d(b[i], b[j])).abs() < 1e-9);
        }
    }

    #[test]
    fn landmarks_follow_projected_vertices(seed in 0u64..1000, size in 8usize..64) {
        let model = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = common::random_params(&mut rng, &model);
        let lm = landmarks_2d(&model, &p, size).unwrap();
        let proj = project_weak_perspective(&instantiate_shape(&model, &p).unwrap(), size);
        let half = size as f64 / 2.0;
        for (k, &v) in model.landmark_indices.iter().enumerate() {
            prop_assert!((lm[2 * k] * half + half - proj.points2d[v][0]).abs() < 1e-9);
            prop_assert!((lm[2 * k + 1] * half + half - proj.points2d[v][1]).abs() < 1e-9);
        }
    }
}
