//! Training objectives. Each returns the weighted loss terms (means over the
//! batch) together with the gradients they induce.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{
    backward_branches, backward_reconstruct, backward_rich, forward_branches, forward_rich_cached, BundleGrad, EmbeddingBundle, Gradients, Group, Mat,
    ModelParams, PairForward,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultitaskWeights {
    pub lambda_i: f64,
    pub lambda_p: f64,
    pub lambda_l: f64,
}

impl Default for MultitaskWeights {
    fn default() -> Self {
        Self {
            lambda_i: 1.0,
            lambda_p: 1.0,
            lambda_l: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiameseWeights {
    pub gamma_i: f64,
    pub gamma_s: f64,
    pub gamma_c: f64,
}

impl Default for SiameseWeights {
    fn default() -> Self {
        Self {
            gamma_i: 1.0,
            gamma_s: 1.0,
            gamma_c: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct L2Weights {
    pub ce: f64,
    pub beta: f64,
}

impl Default for L2Weights {
    fn default() -> Self {
        Self { ce: 1.0, beta: 1.0 }
    }
}

/// Weighted loss components; unused components stay zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub ce: f64,
    pub pose: f64,
    pub landmark: f64,
    pub self_rec: f64,
    pub cross_rec: f64,
    pub distance: f64,
}

impl LossTerms {
    fn finish(mut self) -> Self {
        self.total = self.ce + self.pose + self.landmark + self.self_rec + self.cross_rec + self.distance;
        self
    }
}

/// Mean of `-weight * log softmax(z)[y]` and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Mat, labels: &[u32], weight: f64) -> Result<(f64, Mat)> {
    if labels.len() != logits.rows {
        return Err(invalid("label count differs from batch size"));
    }
    let b = logits.rows.max(1) as f64;
    let mut grad = Mat::zeros(logits.rows, logits.cols);
    let mut sum = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let y = y as usize;
        if y >= logits.cols {
            return Err(invalid(format!("identity label {y} out of range for {} classes", logits.cols)));
        }
        let z = logits.row(i);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        sum += lse - z[y];
        let g = grad.row_mut(i);
        for (k, gk) in g.iter_mut().enumerate() {
            let p = (z[k] - lse).exp();
            *gk = weight * (p - if k == y { 1.0 } else { 0.0 }) / b;
        }
    }
    Ok((weight * sum / b, grad))
}

/// Mean over rows of `weight * ||pred - target||²` and its gradient in `pred`.
pub fn squared_error(pred: &Mat, target: &Mat, weight: f64) -> Result<(f64, Mat)> {
    if pred.rows != target.rows || pred.cols != target.cols {
        return Err(invalid(format!(
            "regression target is {}x{}, prediction is {}x{}",
            target.rows, target.cols, pred.rows, pred.cols
        )));
    }
    let b = pred.rows.max(1) as f64;
    let mut grad = Mat::zeros(pred.rows, pred.cols);
    let mut sum = 0.0;
    for ((g, p), t) in grad.data.iter_mut().zip(&pred.data).zip(&target.data) {
        let d = p - t;
        sum += d * d;
        *g = 2.0 * weight * d / b;
    }
    Ok((weight * sum / b, grad))
}

/// Identity cross-entropy plus pose and landmark regression on one batch.
pub fn loss_multitask(bundle: &EmbeddingBundle, identity: &[u32], pose: &Mat, landmarks: &Mat, w: &MultitaskWeights) -> Result<(LossTerms, BundleGrad)> {
    let (ce, d_logits) = cross_entropy(&bundle.logits, identity, w.lambda_i)?;
    let (pose_loss, d_pose) = squared_error(&bundle.e_p, pose, w.lambda_p)?;
    let (lmk_loss, d_lmk) = squared_error(&bundle.e_l, landmarks, w.lambda_l)?;
    let terms = LossTerms {
        ce,
        pose: pose_loss,
        landmark: lmk_loss,
        ..Default::default()
    }
    .finish();
    Ok((
        terms,
        BundleGrad {
            logits: Some(d_logits),
            e_p: Some(d_pose),
            e_l: Some(d_lmk),
            ..Default::default()
        },
    ))
}

/// Full forward and backward of the multi-task objective on an image batch.
pub fn multitask_gradients(
    params: &ModelParams,
    images: &Mat,
    identity: &[u32],
    pose: &Mat,
    landmarks: &Mat,
    w: &MultitaskWeights,
) -> Result<(LossTerms, Gradients, EmbeddingBundle)> {
    let cache = forward_rich_cached(params, images)?;
    let bundle = forward_branches(params, &cache.rich)?;
    let (terms, up) = loss_multitask(&bundle, identity, pose, landmarks, w)?;
    let mut grads = Gradients::zeros_like(params);
    let backbone = !params.is_frozen(Group::Backbone);
    if let Some(d_rich) = backward_branches(params, &bundle, &up, &mut grads, backbone) {
        backward_rich(params, &cache, &d_rich, &mut grads);
    }
    Ok((terms, grads, bundle))
}

fn require_frozen_backbone(params: &ModelParams) -> Result<()> {
    if params.is_frozen(Group::Backbone) {
        Ok(())
    } else {
        Err(Error::Config("pair fine-tuning requires a frozen backbone".into()))
    }
}

/// Reference cross-entropy plus self and cross reconstruction of the
/// reference's rich embedding. The rich embedding is a fixed target.
pub fn loss_reconstruction(params: &ModelParams, pf: &PairForward, identity: &[u32], w: &SiameseWeights) -> Result<(LossTerms, Gradients)> {
    require_frozen_backbone(params)?;
    let target = &pf.first.e_r;
    let (ce, d_logits) = cross_entropy(&pf.first.logits, identity, w.gamma_i)?;
    let (self_rec, d_self) = squared_error(&pf.self_rec.output, target, w.gamma_s)?;
    let (cross_rec, d_cross) = squared_error(&pf.cross_rec.output, target, w.gamma_c)?;

    let mut grads = Gradients::zeros_like(params);
    let (d_ei1, mut d_en1) = backward_reconstruct(params, &pf.self_rec, &d_self, &mut grads);
    let (d_ei2, d_en1_cross) = backward_reconstruct(params, &pf.cross_rec, &d_cross, &mut grads);
    d_en1.data.iter_mut().zip(&d_en1_cross.data).for_each(|(a, b)| *a += b);
    let up1 = BundleGrad {
        e_i: Some(d_ei1),
        e_n: Some(d_en1),
        logits: Some(d_logits),
        ..Default::default()
    };
    backward_branches(params, &pf.first, &up1, &mut grads, false);
    let up2 = BundleGrad {
        e_i: Some(d_ei2),
        ..Default::default()
    };
    backward_branches(params, &pf.second, &up2, &mut grads, false);
    let terms = LossTerms {
        ce,
        self_rec,
        cross_rec,
        ..Default::default()
    }
    .finish();
    Ok((terms, grads))
}

/// Mean over pairs of the squared distance between corresponding rows.
pub fn pair_distance(a: &Mat, b: &Mat) -> Result<f64> {
    Ok(squared_error(a, b, 1.0)?.0)
}

/// Reference cross-entropy plus `beta * ||e_i1 - e_i2||²`.
pub fn loss_l2_pair(
    params: &ModelParams,
    first: &EmbeddingBundle,
    second: &EmbeddingBundle,
    identity: &[u32],
    w: &L2Weights,
) -> Result<(LossTerms, Gradients)> {
    require_frozen_backbone(params)?;
    let (ce, d_logits) = cross_entropy(&first.logits, identity, w.ce)?;
    let (distance, d1) = squared_error(&first.e_i, &second.e_i, w.beta)?;
    let mut d2 = d1.clone();
    d2.data.iter_mut().for_each(|v| *v = -*v);
    let mut grads = Gradients::zeros_like(params);
    let up1 = BundleGrad {
        e_i: Some(d1),
        logits: Some(d_logits),
        ..Default::default()
    };
    backward_branches(params, first, &up1, &mut grads, false);
    let up2 = BundleGrad {
        e_i: Some(d2),
        ..Default::default()
    };
    backward_branches(params, second, &up2, &mut grads, false);
    let terms = LossTerms {
        ce,
        distance,
        ..Default::default()
    }
    .finish();
    Ok((terms, grads))
}
