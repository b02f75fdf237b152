//! Multi-task pre-training and pair fine-tuning loops.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{optimizer_step, AdamConfig, OptimizerState};
use super::loss::{loss_l2_pair, loss_reconstruction, multitask_gradients, L2Weights, LossTerms, MultitaskWeights, SiameseWeights};
use crate::dataset::{Corpus, PairSampler, PoseStats};
use crate::error::{invalid, Error, Result};
use crate::eval::{csv_err, protocol_p1_on_embeddings, Metric};
use crate::nn::{embed, forward_branches, forward_pair_from_rich, forward_rich, images_to_mat, init_params, ArchConfig, Group, Mat, ModelParams};

const RICH_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub lambda_i: f64,
    pub lambda_p: f64,
    pub lambda_l: f64,
    pub lr0: f64,
    /// Multiplier applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            lambda_i: 1.0,
            lambda_p: 1.0,
            lambda_l: 1.0,
            lr0: 3e-4,
            lr_decay: 0.25,
            decay_every: 5,
            epochs: 15,
            batch_size: 8,
            seed: 1,
            adam: AdamConfig::default(),
        }
    }
}

impl Stage2Config {
    pub fn weights(&self) -> MultitaskWeights {
        MultitaskWeights {
            lambda_i: self.lambda_i,
            lambda_p: self.lambda_p,
            lambda_l: self.lambda_l,
        }
    }

    /// Learning rate for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi((epoch / self.decay_every.max(1)) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::Config("stage 2 needs lr0 > 0, batch_size > 0 and decay_every > 0".into()));
        }
        if !(self.lambda_i > 0.0) || self.lambda_p < 0.0 || self.lambda_l < 0.0 {
            return Err(Error::Config("stage 2 needs lambda_i > 0 and nonnegative lambda_p, lambda_l".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage3Config {
    pub gamma_i: f64,
    pub gamma_s: f64,
    pub gamma_c: f64,
    /// Distance weight of the L2 pair baseline.
    pub beta: f64,
    pub lr: f64,
    pub patience: usize,
    pub max_epochs: usize,
    /// Pairs drawn per epoch; defaults to the corpus size.
    pub pairs_per_epoch: Option<usize>,
    pub batch_size: usize,
    /// P1 gallery draws per validation pass.
    pub val_trials: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Start the reconstructor's output layer at zero.
    pub zero_init_output: bool,
}

impl Default for Stage3Config {
    fn default() -> Self {
        Self {
            gamma_i: 1.0,
            gamma_s: 1.0,
            gamma_c: 1.0,
            beta: 1.0,
            lr: 1e-4,
            patience: 25,
            max_epochs: 100,
            pairs_per_epoch: None,
            batch_size: 32,
            val_trials: 10,
            seed: 1,
            adam: AdamConfig::default(),
            zero_init_output: true,
        }
    }
}

impl Stage3Config {
    pub fn siamese(&self) -> SiameseWeights {
        SiameseWeights {
            gamma_i: self.gamma_i,
            gamma_s: self.gamma_s,
            gamma_c: self.gamma_c,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 || self.val_trials == 0 {
            return Err(Error::Config(
                "stage 3 needs lr > 0 and positive patience, batch_size, max_epochs, val_trials".into(),
            ));
        }
        if [self.gamma_i, self.gamma_s, self.gamma_c, self.beta].iter().any(|&g| g < 0.0) {
            return Err(Error::Config("stage 3 weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Images and labels of one or more corpora with identity labels shifted into
/// disjoint ranges and pose labels standardized over the merged pool.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub images: Mat,
    pub identity: Vec<u32>,
    pub pose: Mat,
    pub landmarks: Mat,
    pub num_classes: usize,
    /// Label offset of each source, in input order.
    pub offsets: Vec<u32>,
    pub pose_stats: PoseStats,
}

impl TrainingSet {
    pub fn merge(corpora: &[&Corpus]) -> Result<Self> {
        let first = corpora.first().ok_or_else(|| invalid("no training corpora"))?;
        if corpora.iter().any(|c| c.is_empty()) {
            return Err(invalid("training corpus is empty"));
        }
        let size = first.image_size();
        let k2 = first.landmark_dim();
        if corpora.iter().any(|c| c.image_size() != size || c.landmark_dim() != k2) {
            return Err(invalid("training corpora differ in image size or landmark count"));
        }
        let pose_stats = PoseStats::from_poses(corpora.iter().flat_map(|c| c.samples.iter().map(|s| &s.pose)));
        let mut offsets = Vec::new();
        let mut next = 0u32;
        let (mut ident, mut pose, mut lmk) = (Vec::new(), Vec::new(), Vec::new());
        for c in corpora {
            offsets.push(next);
            for s in &c.samples {
                ident.push(s.identity + next);
                pose.extend(pose_stats.standardize(&s.pose));
                lmk.extend_from_slice(&s.landmarks);
            }
            next += c.num_identities() as u32;
        }
        let n = ident.len();
        Ok(Self {
            images: images_to_mat(corpora.iter().flat_map(|c| c.samples.iter().map(|s| &s.image))),
            identity: ident,
            pose: Mat::from_vec(n, 7, pose)?,
            landmarks: Mat::from_vec(n, k2, lmk)?,
            num_classes: next as usize,
            offsets,
            pose_stats,
        })
    }

    pub fn len(&self) -> usize {
        self.identity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identity.is_empty()
    }

    pub fn image_size(&self) -> usize {
        (self.images.cols as f64).sqrt().round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// One-based.
    pub epoch: usize,
    pub lr: f64,
    pub terms: LossTerms,
    /// Running batch accuracy while training (multi-task stages).
    pub train_acc: Option<f64>,
    pub val_rank1: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogKind {
    Multitask,
    Siamese,
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub kind: LogKind,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were returned, for early-stopped runs.
    pub best_epoch: Option<usize>,
}

impl TrainingLog {
    pub fn header(&self) -> Vec<&'static str> {
        match self.kind {
            LogKind::Multitask => vec!["epoch", "lr", "loss_total", "loss_ce", "loss_pose", "loss_lmk", "train_acc"],
            LogKind::Siamese => vec!["epoch", "lr", "loss_total", "loss_ce", "loss_self", "loss_cross", "val_rank1"],
            LogKind::L2 => vec!["epoch", "lr", "loss_total", "loss_ce", "loss_dist", "val_rank1"],
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(self.header()).map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.epochs {
            let t = &e.terms;
            let mut rec = vec![e.epoch.to_string(), e.lr.to_string(), t.total.to_string(), t.ce.to_string()];
            match self.kind {
                LogKind::Multitask => rec.extend([t.pose.to_string(), t.landmark.to_string(), opt(e.train_acc)]),
                LogKind::Siamese => rec.extend([t.self_rec.to_string(), t.cross_rec.to_string(), opt(e.val_rank1)]),
                LogKind::L2 => rec.extend([t.distance.to_string(), opt(e.val_rank1)]),
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn accumulate(acc: &mut LossTerms, t: &LossTerms, n: f64) {
    acc.total += t.total * n;
    acc.ce += t.ce * n;
    acc.pose += t.pose * n;
    acc.landmark += t.landmark * n;
    acc.self_rec += t.self_rec * n;
    acc.cross_rec += t.cross_rec * n;
    acc.distance += t.distance * n;
}

fn scale(t: &mut LossTerms, s: f64) {
    for v in [
        &mut t.total,
        &mut t.ce,
        &mut t.pose,
        &mut t.landmark,
        &mut t.self_rec,
        &mut t.cross_rec,
        &mut t.distance,
    ] {
        *v *= s;
    }
}

fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 << 32);
    rng
}

/// Fresh parameters for `arch` (class count taken from the set), trained on
/// the multi-task objective.
pub fn train_stage2(set: &TrainingSet, arch: &ArchConfig, cfg: &Stage2Config) -> Result<(ModelParams, TrainingLog)> {
    let mut arch = arch.clone();
    arch.num_classes = set.num_classes;
    arch.landmark_dim = set.landmarks.cols;
    let params = init_params(&arch, cfg.seed)?;
    train_multitask(params, set, cfg)
}

/// Continue multi-task training from `params`, honouring its frozen flags.
pub fn train_multitask(mut params: ModelParams, set: &TrainingSet, cfg: &Stage2Config) -> Result<(ModelParams, TrainingLog)> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(invalid("training set is empty"));
    }
    if set.num_classes > params.arch.num_classes || set.images.cols != params.arch.image_size.pow(2) {
        return Err(invalid("training set does not fit the model architecture"));
    }
    let w = cfg.weights();
    let mut state = OptimizerState::new(&params, cfg.adam);
    let mut rng = shuffle_rng(cfg.seed);
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut log = TrainingLog {
        kind: LogKind::Multitask,
        epochs: Vec::new(),
        best_epoch: None,
    };
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sum = LossTerms::default();
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let x = set.images.select_rows(batch);
            let y: Vec<u32> = batch.iter().map(|&i| set.identity[i]).collect();
            let (terms, grads, bundle) = multitask_gradients(&params, &x, &y, &set.pose.select_rows(batch), &set.landmarks.select_rows(batch), &w)?;
            if !terms.total.is_finite() {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    loss: terms.total,
                });
            }
            correct += (0..batch.len()).filter(|&i| argmax(bundle.logits.row(i)) == y[i] as usize).count();
            accumulate(&mut sum, &terms, batch.len() as f64);
            optimizer_step(&mut params, &grads, &mut state, lr)?;
        }
        scale(&mut sum, 1.0 / set.len() as f64);
        log.epochs.push(EpochLog {
            epoch: epoch + 1,
            lr,
            terms: sum,
            train_acc: Some(correct as f64 / set.len() as f64),
            val_rank1: None,
        });
    }
    Ok((params, log))
}

/// Replace the classifier with one over the set's classes and fine-tune every
/// parameter with identity cross-entropy only.
pub fn fine_tune_softmax(params: &ModelParams, set: &TrainingSet, cfg: &Stage2Config) -> Result<(ModelParams, TrainingLog)> {
    let mut p = params.clone();
    p.reset_classifier(set.num_classes, cfg.seed);
    for g in Group::ALL {
        p.set_frozen(g, false);
    }
    let cfg = Stage2Config {
        lambda_p: 0.0,
        lambda_l: 0.0,
        ..cfg.clone()
    };
    train_multitask(p, set, &cfg)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of samples whose top logit is their identity.
pub fn identity_accuracy(params: &ModelParams, set: &TrainingSet) -> Result<f64> {
    let mut correct = 0;
    for start in (0..set.len()).step_by(RICH_CHUNK) {
        let idx: Vec<usize> = (start..(start + RICH_CHUNK).min(set.len())).collect();
        let b = embed(params, &set.images.select_rows(&idx))?;
        correct += idx
            .iter()
            .enumerate()
            .filter(|(k, &i)| argmax(b.logits.row(*k)) == set.identity[i] as usize)
            .count();
    }
    Ok(correct as f64 / set.len() as f64)
}

/// Rich embeddings of every corpus sample.
pub fn rich_embeddings(params: &ModelParams, corpus: &Corpus) -> Result<Mat> {
    let mut data = Vec::with_capacity(corpus.len() * params.arch.rich_dim);
    for chunk in corpus.samples.chunks(RICH_CHUNK) {
        data.extend(forward_rich(params, &images_to_mat(chunk.iter().map(|s| &s.image)))?.data);
    }
    Mat::from_vec(corpus.len(), params.arch.rich_dim, data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PairObjective {
    Siamese(SiameseWeights),
    L2(L2Weights),
}

/// Siamese reconstruction fine-tuning with early stopping on validation P1.
pub fn train_stage3(params: &ModelParams, train: &Corpus, label_offset: u32, validation: &Corpus, cfg: &Stage3Config) -> Result<(ModelParams, TrainingLog)> {
    let v = validation_metric(params, validation, cfg)?;
    fine_tune_pairs(params, train, label_offset, cfg, PairObjective::Siamese(cfg.siamese()), v)
}

/// The L2 pair baseline on the same fine-tuning surface as [`train_stage3`].
pub fn train_l2(params: &ModelParams, train: &Corpus, label_offset: u32, validation: &Corpus, cfg: &Stage3Config) -> Result<(ModelParams, TrainingLog)> {
    let v = validation_metric(params, validation, cfg)?;
    let w = L2Weights {
        ce: cfg.gamma_i,
        beta: cfg.beta,
    };
    fine_tune_pairs(params, train, label_offset, cfg, PairObjective::L2(w), v)
}

/// Mean P1 rank-1 on `validation` from identity embeddings. The backbone is
/// frozen during fine-tuning, so rich embeddings are computed once here.
pub fn validation_metric(params: &ModelParams, validation: &Corpus, cfg: &Stage3Config) -> Result<impl FnMut(&ModelParams) -> Result<f64>> {
    let rich = rich_embeddings(params, validation)?;
    let corpus = validation.clone();
    let (trials, seed) = (cfg.val_trials, cfg.seed);
    Ok(move |p: &ModelParams| {
        let e_i = forward_branches(p, &rich)?.e_i;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e_ed0f_7a11);
        Ok(protocol_p1_on_embeddings(&e_i, &corpus, trials, &mut rng, Metric::Cosine)?.average)
    })
}

/// Pair fine-tuning: the backbone, classifier and pose/landmark heads are
/// frozen, the reconstructor is re-initialized, and training stops once the
/// validation metric has not improved for `patience` epochs. Returns the
/// parameters from the best validation epoch.
pub fn fine_tune_pairs<V>(
    params: &ModelParams,
    train: &Corpus,
    label_offset: u32,
    cfg: &Stage3Config,
    objective: PairObjective,
    mut validate: V,
) -> Result<(ModelParams, TrainingLog)>
where
    V: FnMut(&ModelParams) -> Result<f64>,
{
    cfg.validate()?;
    if label_offset as usize + train.num_identities() > params.arch.num_classes {
        return Err(invalid("fine-tuning labels exceed the classifier's classes"));
    }
    let sampler = PairSampler::new(train)?;
    let mut p = params.clone();
    for g in [Group::Backbone, Group::IdClassifier, Group::PoseHead, Group::LandmarkHead] {
        p.set_frozen(g, true);
    }
    p.set_frozen(Group::Identity, false);
    p.set_frozen(Group::NonIdentity, false);
    p.reset_group(Group::Reconstructor, cfg.seed);
    if cfg.zero_init_output {
        p.group_mut(Group::Reconstructor).tensors[2].data.iter_mut().for_each(|w| *w = 0.0);
    }
    p.set_frozen(Group::Reconstructor, matches!(objective, PairObjective::L2(_)));

    let rich = rich_embeddings(&p, train)?;
    let mut state = OptimizerState::new(&p, cfg.adam);
    let mut rng = shuffle_rng(cfg.seed);
    let pairs = cfg.pairs_per_epoch.unwrap_or(train.len()).max(1);
    let kind = match objective {
        PairObjective::Siamese(_) => LogKind::Siamese,
        PairObjective::L2(_) => LogKind::L2,
    };
    let mut log = TrainingLog {
        kind,
        epochs: Vec::new(),
        best_epoch: None,
    };
    let mut best: Option<(f64, ModelParams)> = None;
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut sum = LossTerms::default();
        let mut done = 0;
        while done < pairs {
            let n = cfg.batch_size.min(pairs - done);
            let batch: Vec<_> = (0..n).map(|_| sampler.sample(&mut rng)).collect();
            let r1 = rich.select_rows(&batch.iter().map(|b| b.reference).collect::<Vec<_>>());
            let r2 = rich.select_rows(&batch.iter().map(|b| b.peer).collect::<Vec<_>>());
            let y: Vec<u32> = batch.iter().map(|b| b.identity + label_offset).collect();
            let pf = forward_pair_from_rich(&p, &r1, &r2)?;
            let (terms, grads) = match &objective {
                PairObjective::Siamese(w) => loss_reconstruction(&p, &pf, &y, w)?,
                PairObjective::L2(w) => loss_l2_pair(&p, &pf.first, &pf.second, &y, w)?,
            };
            if !terms.total.is_finite() {
                return Err(Error::Divergence { epoch, loss: terms.total });
            }
            accumulate(&mut sum, &terms, n as f64);
            optimizer_step(&mut p, &grads, &mut state, cfg.lr)?;
            done += n;
        }
        scale(&mut sum, 1.0 / pairs as f64);
        let val = validate(&p)?;
        log.epochs.push(EpochLog {
            epoch,
            lr: cfg.lr,
            terms: sum,
            train_acc: None,
            val_rank1: Some(val),
        });
        if best.as_ref().is_none_or(|(b, _)| val > *b) {
            best = Some((val, p.clone()));
            log.best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (_, best) = best.expect("at least one epoch runs");
    Ok((best, log))
}
