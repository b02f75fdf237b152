//! Central finite-difference check of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::loss::{loss_l2_pair, loss_reconstruction, multitask_gradients, L2Weights, MultitaskWeights, SiameseWeights};
use crate::error::Result;
use crate::nn::{forward_branches, forward_pair, forward_rich, init_params, ArchConfig, Gradients, Group, Mat, ModelParams};

/// Relative error denominator floor: below this both gradients count as zero
/// and the absolute difference is reported instead.
const REL_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub tensor: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare `loss_fn`'s gradient with `(L(w + eps) - L(w - eps)) / 2 eps` on up
/// to `per_tensor` sampled scalars of every trainable tensor.
pub fn gradient_check<F>(loss_fn: F, params: &ModelParams, per_tensor: usize, eps: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&ModelParams) -> Result<(f64, Gradients)>,
{
    let (_, grads) = loss_fn(params)?;
    let mut work = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = Vec::new();
    let (mut total, mut count, mut worst) = (0.0, 0usize, 0.0f64);
    for gi in 0..params.groups.len() {
        if params.groups[gi].frozen {
            continue;
        }
        for ti in 0..params.groups[gi].tensors.len() {
            let n = params.groups[gi].tensors[ti].data.len();
            let picks = sample(&mut rng, n, per_tensor.min(n)).into_vec();
            let mut errs = Vec::with_capacity(picks.len());
            for k in picks {
                let w0 = params.groups[gi].tensors[ti].data[k];
                work.groups[gi].tensors[ti].data[k] = w0 + eps;
                let up = loss_fn(&work)?.0;
                work.groups[gi].tensors[ti].data[k] = w0 - eps;
                let down = loss_fn(&work)?.0;
                work.groups[gi].tensors[ti].data[k] = w0;
                errs.push(relative_error(grads.groups[gi][ti][k], (up - down) / (2.0 * eps)));
            }
            let max = errs.iter().copied().fold(0.0, f64::max);
            let sum: f64 = errs.iter().sum();
            worst = worst.max(max);
            total += sum;
            count += errs.len();
            let g = &params.groups[gi];
            tensors.push(TensorCheck {
                tensor: format!("{}/{}", g.group.name(), g.tensors[ti].name),
                checked: errs.len(),
                max_rel_error: max,
                mean_rel_error: if errs.is_empty() { 0.0 } else { sum / errs.len() as f64 },
            });
        }
    }
    Ok(GradCheckReport {
        epsilon: eps,
        tensors,
        max_rel_error: worst,
        mean_rel_error: if count == 0 { 0.0 } else { total / count as f64 },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectiveCheck {
    pub objective: String,
    pub report: GradCheckReport,
}

/// Gradient checks of the multi-task, reconstruction and L2 pair objectives
/// on a random network of shape `arch` and a random batch. Loss weights are
/// deliberately unequal so each term is exercised with its own scale.
pub fn check_objectives(arch: &ArchConfig, batch: usize, per_tensor: usize, eps: f64, seed: u64) -> Result<Vec<ObjectiveCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = arch.image_size * arch.image_size;
    let mut uniform = |rows: usize, cols: usize, lo: f64, hi: f64| Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect());
    let x1 = uniform(batch, side, 0.0, 1.0)?;
    let x2 = uniform(batch, side, 0.0, 1.0)?;
    let pose = uniform(batch, arch.pose_dim, -1.0, 1.0)?;
    let lmk = uniform(batch, arch.landmark_dim, -1.0, 1.0)?;
    let labels: Vec<u32> = (0..batch).map(|i| (i % arch.num_classes) as u32).collect();
    let params = init_params(arch, seed)?;
    let mut out = Vec::new();

    let mt = MultitaskWeights {
        lambda_i: 1.0,
        lambda_p: 0.7,
        lambda_l: 1.3,
    };
    let loss = |p: &ModelParams| multitask_gradients(p, &x1, &labels, &pose, &lmk, &mt).map(|(t, g, _)| (t.total, g));
    out.push(ObjectiveCheck {
        objective: "multitask".into(),
        report: gradient_check(loss, &params, per_tensor, eps, seed)?,
    });

    let mut frozen = params.clone();
    for g in [Group::Backbone, Group::IdClassifier, Group::PoseHead, Group::LandmarkHead] {
        frozen.set_frozen(g, true);
    }
    let sw = SiameseWeights {
        gamma_i: 1.0,
        gamma_s: 0.6,
        gamma_c: 1.4,
    };
    let loss = |p: &ModelParams| {
        let pf = forward_pair(p, &x1, &x2)?;
        loss_reconstruction(p, &pf, &labels, &sw).map(|(t, g)| (t.total, g))
    };
    out.push(ObjectiveCheck {
        objective: "reconstruction".into(),
        report: gradient_check(loss, &frozen, per_tensor, eps, seed)?,
    });

    frozen.set_frozen(Group::Reconstructor, true);
    let lw = L2Weights { ce: 1.0, beta: 0.8 };
    let (r1, r2) = (forward_rich(&frozen, &x1)?, forward_rich(&frozen, &x2)?);
    let loss = |p: &ModelParams| {
        let (b1, b2) = (forward_branches(p, &r1)?, forward_branches(p, &r2)?);
        loss_l2_pair(p, &b1, &b2, &labels, &lw).map(|(t, g)| (t.total, g))
    };
    out.push(ObjectiveCheck {
        objective: "l2_pair".into(),
        report: gradient_check(loss, &frozen, per_tensor, eps, seed)?,
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, ArchConfig, Group};

    /// Least squares on the pose head bias: `sum (b_k - k)^2`.
    #[test]
    fn quadratic_loss_is_exact() {
        let arch = ArchConfig {
            image_size: 4,
            conv_channels: vec![1],
            rich_dim: 2,
            identity_dim: 2,
            nonidentity_dim: 2,
            pose_dim: 7,
            landmark_dim: 2,
            num_classes: 2,
            recon_hidden: 2,
        };
        let mut p = init_params(&arch, 0).unwrap();
        for g in Group::ALL {
            p.set_frozen(g, g != Group::PoseHead);
        }
        let loss = |p: &ModelParams| {
            let w = &p.group(Group::PoseHead).tensors[0].data;
            let b = &p.group(Group::PoseHead).tensors[1].data;
            let mut l = 0.0;
            let mut g = Gradients::zeros_like(p);
            for k in 0..7 {
                let r = b[k] + w[2 * k] * 0.5 - k as f64;
                l += r * r;
                g.groups[Group::PoseHead.index()][1][k] = 2.0 * r;
                g.groups[Group::PoseHead.index()][0][2 * k] = r;
            }
            Ok((l, g))
        };
        let report = gradient_check(loss, &p, 1000, 1e-5, 1).unwrap();
        assert_eq!(report.tensors.len(), 2);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let arch = ArchConfig {
            image_size: 4,
            conv_channels: vec![1],
            rich_dim: 1,
            identity_dim: 1,
            nonidentity_dim: 1,
            pose_dim: 1,
            landmark_dim: 1,
            num_classes: 1,
            recon_hidden: 1,
        };
        let mut p = init_params(&arch, 0).unwrap();
        for g in Group::ALL {
            p.set_frozen(g, g != Group::PoseHead);
        }
        let loss = |p: &ModelParams| {
            let b = p.group(Group::PoseHead).tensors[1].data[0];
            let mut g = Gradients::zeros_like(p);
            g.groups[Group::PoseHead.index()][1][0] = 3.0 * b + 1.0;
            Ok((b * b, g))
        };
        let report = gradient_check(loss, &p, 10, 1e-5, 1).unwrap();
        assert!(report.max_rel_error > 0.5);
        assert_eq!(report.tensors[1].tensor, "pose_head/pose.bias");
    }
}
