//! Synthetic labeled corpora: generation, persistence, pose binning, the
//! genuine-pair sampler and gallery/probe splits.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::container::{Container, NamedArray};
use crate::error::{invalid, ContainerError, Error, Result};
use crate::morphable::{normalized_landmarks, pose_sweep, FaceParams, ModelConfig, MorphableModel};
use crate::par;
use crate::render::{Image, SampleRenderer, ID_COEFF_STD};

pub const CORPUS_FORMAT: &str = "pdisent-corpus/1";
pub const MODEL_FORMAT: &str = "pdisent-model/1";

/// Largest |yaw| (radians) that still counts as near-frontal: 5 degrees.
pub fn near_frontal_limit() -> f64 {
    5f64.to_radians() + 1e-9
}

pub fn is_near_frontal(yaw: f64) -> bool {
    yaw.abs() <= near_frontal_limit()
}

/// Six 15-degree yaw bins, symmetric yaws merged. Index 0 is (0, 15].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PoseBin(pub usize);

impl PoseBin {
    pub const COUNT: usize = 6;

    pub fn end_degrees(self) -> u32 {
        15 * (self.0 as u32 + 1)
    }

    pub fn all() -> impl Iterator<Item = PoseBin> {
        (0..Self::COUNT).map(PoseBin)
    }
}

pub fn pose_bin(yaw: f64) -> Result<PoseBin> {
    let deg = yaw.abs().to_degrees();
    if !yaw.is_finite() || yaw.abs() > std::f64::consts::FRAC_PI_2 + 1e-9 {
        return Err(invalid(format!("yaw {deg:.3} degrees is outside [-90, 90]")));
    }
    let k = (deg / 15.0 - 1e-9).ceil().max(1.0) as usize;
    Ok(PoseBin(k.min(PoseBin::COUNT) - 1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PoseLayout {
    /// Every identity rendered at yaw = -90, -90 + step, ..., 90 degrees.
    Sweep { step_deg: f64 },
    /// One frontal view plus `poses - 1` yaws drawn from N(0, sigma), clamped.
    FrontalHeavy { poses: usize, sigma_deg: f64 },
}

impl PoseLayout {
    pub fn poses_per_identity(&self) -> usize {
        match *self {
            PoseLayout::Sweep { step_deg } => {
                if step_deg > 0.0 {
                    (180.0 / step_deg + 1e-9).floor() as usize + 1
                } else {
                    0
                }
            }
            PoseLayout::FrontalHeavy { poses, .. } => poses,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Jitter {
    pub pitch_deg: f64,
    pub roll_deg: f64,
    pub translation: f64,
    pub scale: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            pitch_deg: 3.0,
            roll_deg: 3.0,
            translation: 0.5,
            scale: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub source: String,
    pub num_identities: usize,
    pub poses: PoseLayout,
    pub image_size: usize,
    pub model: ModelConfig,
    pub texture_seed: u64,
    pub sigma_id: f64,
    pub sigma_exp: f64,
    pub jitter: Jitter,
}

impl GenerationConfig {
    /// Many identities, mostly near-frontal views.
    pub fn base() -> Self {
        Self {
            source: "base".into(),
            num_identities: 200,
            poses: PoseLayout::FrontalHeavy { poses: 12, sigma_deg: 25.0 },
            image_size: 32,
            model: ModelConfig::default(),
            texture_seed: 11,
            sigma_id: ID_COEFF_STD,
            sigma_exp: 3.0,
            jitter: Jitter::default(),
        }
    }

    /// Fewer identities, each with a full 5-degree yaw sweep.
    pub fn target() -> Self {
        Self {
            source: "target".into(),
            num_identities: 80,
            poses: PoseLayout::Sweep { step_deg: 5.0 },
            ..Self::base()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 2 {
            return Err(invalid("num_identities must be at least 2"));
        }
        if self.poses.poses_per_identity() < 2 {
            return Err(invalid("each identity needs at least 2 poses"));
        }
        if let PoseLayout::Sweep { step_deg } = self.poses {
            if !(step_deg > 0.0 && step_deg <= 90.0) {
                return Err(invalid("sweep step must lie in (0, 90] degrees"));
            }
        }
        if self.image_size < 8 {
            return Err(invalid("image_size must be at least 8"));
        }
        if !(self.sigma_id >= 0.0 && self.sigma_exp >= 0.0) {
            return Err(invalid("coefficient spreads must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: Image,
    pub identity: u32,
    /// Raw ground truth `(s, pitch, yaw, roll, tx, ty, tz)`; see
    /// [`PoseStats`] for the standardized training label.
    pub pose: [f64; 7],
    /// `2K` landmark coordinates in `[-1, 1]`.
    pub landmarks: Vec<f64>,
}

impl LabeledSample {
    pub fn yaw(&self) -> f64 {
        self.pose[2]
    }
}

/// Per-dimension mean and standard deviation used to standardize pose labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseStats {
    pub mean: [f64; 7],
    pub std: [f64; 7],
}

impl PoseStats {
    pub fn identity() -> Self {
        Self { mean: [0.0; 7], std: [1.0; 7] }
    }

    /// Population statistics; dimensions with no spread keep unit scale.
    pub fn from_poses<'a>(poses: impl IntoIterator<Item = &'a [f64; 7]>) -> Self {
        let poses: Vec<&[f64; 7]> = poses.into_iter().collect();
        if poses.is_empty() {
            return Self::identity();
        }
        let n = poses.len() as f64;
        let mut mean = [0.0; 7];
        let mut std = [0.0; 7];
        for d in 0..7 {
            mean[d] = poses.iter().map(|p| p[d]).sum::<f64>() / n;
            let var = poses.iter().map(|p| (p[d] - mean[d]).powi(2)).sum::<f64>() / n;
            std[d] = if var > 1e-24 { var.sqrt() } else { 1.0 };
        }
        Self { mean, std }
    }

    pub fn standardize(&self, pose: &[f64; 7]) -> [f64; 7] {
        std::array::from_fn(|d| (pose[d] - self.mean[d]) / self.std[d])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub format: String,
    pub source: String,
    pub seed: u64,
    pub num_identities: usize,
    pub num_samples: usize,
    pub image_size: usize,
    pub landmarks: usize,
    pub generation: GenerationConfig,
    pub pose_stats: PoseStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub samples: Vec<LabeledSample>,
}

pub fn generate_corpus(config: &GenerationConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let model = MorphableModel::generate(&config.model)?;
    generate_corpus_with_model(config, &model, seed)
}

pub fn generate_corpus_with_model(config: &GenerationConfig, model: &MorphableModel, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let renderer = SampleRenderer::new(model, config.image_size, config.texture_seed)?;
    let per_identity = par::map_indexed(config.num_identities, |id| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id as u64 + 1);
        identity_samples(config, model, &renderer, id as u32, &mut rng)
    });
    let mut samples = Vec::with_capacity(config.num_identities * config.poses.poses_per_identity());
    for s in per_identity {
        samples.extend(s?);
    }
    let pose_stats = PoseStats::from_poses(samples.iter().map(|s| &s.pose));
    Ok(Corpus {
        manifest: CorpusManifest {
            format: CORPUS_FORMAT.into(),
            source: config.source.clone(),
            seed,
            num_identities: config.num_identities,
            num_samples: samples.len(),
            image_size: config.image_size,
            landmarks: model.num_landmarks(),
            generation: config.clone(),
            pose_stats,
        },
        samples,
    })
}

fn identity_samples(
    config: &GenerationConfig,
    model: &MorphableModel,
    renderer: &SampleRenderer<'_>,
    identity: u32,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<LabeledSample>> {
    let normal = |sd: f64| Normal::new(0.0, sd).expect("finite spread");
    let id_dist = normal(config.sigma_id);
    let exp_dist = normal(config.sigma_exp);
    let base = FaceParams {
        scale: config.image_size as f64 / 32.0,
        pitch: 0.0,
        yaw: 0.0,
        roll: 0.0,
        translation: [0.0; 3],
        alpha_id: (0..model.id_dims).map(|_| id_dist.sample(rng)).collect(),
        alpha_exp: (0..model.exp_dims).map(|_| exp_dist.sample(rng)).collect(),
    };
    let views = match config.poses {
        PoseLayout::Sweep { step_deg } => pose_sweep(&base, (-90f64).to_radians(), 90f64.to_radians(), step_deg.to_radians())?,
        PoseLayout::FrontalHeavy { poses, sigma_deg } => {
            let yaw_dist = normal(sigma_deg.to_radians());
            let limit = std::f64::consts::FRAC_PI_2;
            (0..poses)
                .map(|k| FaceParams {
                    yaw: if k == 0 { 0.0 } else { yaw_dist.sample(rng).clamp(-limit, limit) },
                    ..base.clone()
                })
                .collect()
        }
    };

    let j = &config.jitter;
    let unit = config.image_size as f64 / 32.0;
    views
        .into_iter()
        .map(|mut p| {
            p.pitch = j.pitch_deg.to_radians() * rng.gen_range(-1.0..=1.0);
            p.roll = j.roll_deg.to_radians() * rng.gen_range(-1.0..=1.0);
            p.scale *= 1.0 + j.scale * rng.gen_range(-1.0..=1.0);
            for t in p.translation.iter_mut() {
                *t = unit * j.translation * rng.gen_range(-1.0..=1.0);
            }
            let (image, proj) = renderer.render(&p)?;
            Ok(LabeledSample {
                image,
                identity,
                pose: p.pose_vector(),
                landmarks: normalized_landmarks(model, &proj, config.image_size),
            })
        })
        .collect()
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_identities(&self) -> usize {
        self.manifest.num_identities
    }

    pub fn image_size(&self) -> usize {
        self.manifest.image_size
    }

    pub fn landmark_dim(&self) -> usize {
        2 * self.manifest.landmarks
    }

    pub fn pose_label(&self, i: usize) -> [f64; 7] {
        self.manifest.pose_stats.standardize(&self.samples[i].pose)
    }

    /// Samples of the listed identities, relabeled `0..ids.len()` in list order.
    pub fn select_identities(&self, ids: &[u32]) -> Corpus {
        let mut relabel = vec![None; self.num_identities()];
        for (new, &old) in ids.iter().enumerate() {
            relabel[old as usize] = Some(new as u32);
        }
        let mut samples: Vec<LabeledSample> = Vec::new();
        for &old in ids {
            samples.extend(self.samples.iter().filter(|s| s.identity == old).map(|s| LabeledSample {
                identity: relabel[old as usize].unwrap(),
                ..s.clone()
            }));
        }
        let mut manifest = self.manifest.clone();
        manifest.num_identities = ids.len();
        manifest.num_samples = samples.len();
        Corpus { manifest, samples }
    }

    pub fn to_container(&self) -> Container {
        let Value::Object(manifest) = serde_json::to_value(&self.manifest).expect("manifest serializes") else {
            unreachable!("manifest is a struct")
        };
        let s = self.len();
        let size = self.image_size();
        let k2 = self.landmark_dim();
        let mut c = Container::new(manifest);
        c.push(NamedArray::f32(
            "images",
            vec![s, size, size],
            self.samples.iter().flat_map(|x| x.image.pixels.iter().copied()).collect(),
        ));
        c.push(NamedArray::i32("identity", vec![s], self.samples.iter().map(|x| x.identity as i32).collect()));
        c.push(NamedArray::f64("pose", vec![s, 7], self.samples.iter().flat_map(|x| x.pose).collect()));
        c.push(NamedArray::f64(
            "landmarks",
            vec![s, k2],
            self.samples.iter().flat_map(|x| x.landmarks.iter().copied()).collect(),
        ));
        c
    }

    pub fn from_container(c: &Container) -> Result<Corpus> {
        let manifest: CorpusManifest =
            serde_json::from_value(Value::Object(c.manifest.clone())).map_err(|e| ContainerError::CorruptHeader(format!("corpus manifest: {e}")))?;
        if manifest.format != CORPUS_FORMAT {
            return Err(ContainerError::CorruptHeader(format!("unexpected format `{}`", manifest.format)).into());
        }
        let s = manifest.num_samples;
        let size = manifest.image_size;
        let k2 = 2 * manifest.landmarks;
        let mismatch = |e: ContainerError| -> Error {
            match e {
                ContainerError::WrongShape { name, expected, found } => {
                    ContainerError::ManifestMismatch(format!("array `{name}` has shape {found:?}, manifest implies {expected:?}")).into()
                }
                other => other.into(),
            }
        };
        let images = c.get_f32("images", &[s, size, size]).map_err(mismatch)?;
        let identity = c.get_i32("identity", &[s]).map_err(mismatch)?;
        let pose = c.get_f64("pose", &[s, 7]).map_err(mismatch)?;
        let landmarks = c.get_f64("landmarks", &[s, k2]).map_err(mismatch)?;

        let mut samples = Vec::with_capacity(s);
        for i in 0..s {
            let id = identity[i];
            if id < 0 || id as usize >= manifest.num_identities {
                return Err(ContainerError::ManifestMismatch(format!("identity label {id} out of range")).into());
            }
            samples.push(LabeledSample {
                image: Image {
                    size,
                    pixels: images[i * size * size..(i + 1) * size * size].to_vec(),
                },
                identity: id as u32,
                pose: pose[i * 7..(i + 1) * 7].try_into().unwrap(),
                landmarks: landmarks[i * k2..(i + 1) * k2].to_vec(),
            });
        }
        Ok(Corpus { manifest, samples })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().to_bytes()
    }
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    corpus.to_container().save(path)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    Corpus::from_container(&Container::load(path)?)
}

pub fn model_to_container(model: &MorphableModel, config: &ModelConfig) -> Container {
    let mut manifest = serde_json::Map::new();
    manifest.insert("format".into(), Value::String(MODEL_FORMAT.into()));
    manifest.insert("config".into(), serde_json::to_value(config).expect("config serializes"));
    manifest.insert("num_vertices".into(), model.num_vertices.into());
    let n3 = 3 * model.num_vertices;
    let mut c = Container::new(manifest);
    c.push(NamedArray::f64("mean_shape", vec![n3], model.mean_shape.clone()));
    c.push(NamedArray::f64("identity_basis", vec![n3, model.id_dims], model.identity_basis.clone()));
    c.push(NamedArray::f64("expression_basis", vec![n3, model.exp_dims], model.expression_basis.clone()));
    c.push(NamedArray::i32(
        "landmark_indices",
        vec![model.num_landmarks()],
        model.landmark_indices.iter().map(|&i| i as i32).collect(),
    ));
    c
}

pub fn model_from_container(c: &Container) -> Result<MorphableModel> {
    let config: ModelConfig = c
        .manifest
        .get("config")
        .cloned()
        .map(serde_json::from_value)
        .transpose()?
        .ok_or_else(|| ContainerError::CorruptHeader("model manifest lacks config".into()))?;
    let n = c
        .manifest
        .get("num_vertices")
        .and_then(Value::as_u64)
        .ok_or_else(|| ContainerError::CorruptHeader("model manifest lacks num_vertices".into()))? as usize;
    let mean = c.get_f64("mean_shape", &[3 * n])?;
    let id = c.get_f64("identity_basis", &[3 * n, config.id_dims])?;
    let exp = c.get_f64("expression_basis", &[3 * n, config.exp_dims])?;
    let lm = c.get_i32("landmark_indices", &[config.landmarks])?;
    if lm.iter().any(|&i| i < 0) {
        return Err(ContainerError::CorruptHeader("negative landmark index".into()).into());
    }
    MorphableModel::from_parts(
        mean.to_vec(),
        id.to_vec(),
        config.id_dims,
        exp.to_vec(),
        config.exp_dims,
        lm.iter().map(|&i| i as usize).collect(),
    )
}

/// Reference image (near-frontal) and peer image (non-frontal) of one identity,
/// as indices into the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenuinePair {
    pub reference: usize,
    pub peer: usize,
    pub identity: u32,
}

/// Per-identity near-frontal and non-frontal pools.
#[derive(Debug, Clone)]
pub struct PairSampler {
    pools: Vec<(Vec<usize>, Vec<usize>)>,
}

impl PairSampler {
    pub fn new(corpus: &Corpus) -> Result<Self> {
        let mut pools = vec![(Vec::new(), Vec::new()); corpus.num_identities()];
        for (i, s) in corpus.samples.iter().enumerate() {
            let pool = &mut pools[s.identity as usize];
            if is_near_frontal(s.yaw()) {
                pool.0.push(i);
            } else {
                pool.1.push(i);
            }
        }
        if !pools.iter().any(|(f, n)| !f.is_empty() && !n.is_empty()) {
            return Err(Error::NoPairableIdentity);
        }
        Ok(Self { pools })
    }

    /// Uniform identity (redrawn until it has both pools), then a uniform
    /// reference and a uniform peer.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> GenuinePair {
        loop {
            let id = rng.gen_range(0..self.pools.len());
            let (frontal, other) = &self.pools[id];
            if frontal.is_empty() || other.is_empty() {
                continue;
            }
            let reference = frontal[rng.gen_range(0..frontal.len())];
            let peer = other[rng.gen_range(0..other.len())];
            return GenuinePair {
                reference,
                peer,
                identity: id as u32,
            };
        }
    }
}

pub fn sample_pair<R: Rng>(corpus: &Corpus, rng: &mut R) -> Result<GenuinePair> {
    Ok(PairSampler::new(corpus)?.sample(rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    /// Two random near-frontal images per identity in the gallery.
    P1,
    /// Every near-frontal image in the gallery.
    P2,
}

/// Gallery and probe sample indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub gallery: Vec<usize>,
    pub probe: Vec<usize>,
}

pub fn split_gallery_probe<R: Rng>(corpus: &Corpus, protocol: Protocol, rng: &mut R) -> Result<Split> {
    let mut frontal: Vec<Vec<usize>> = vec![Vec::new(); corpus.num_identities()];
    let mut probe = Vec::new();
    for (i, s) in corpus.samples.iter().enumerate() {
        if is_near_frontal(s.yaw()) {
            frontal[s.identity as usize].push(i);
        } else {
            probe.push(i);
        }
    }
    let need = match protocol {
        Protocol::P1 => 2,
        Protocol::P2 => 1,
    };
    let mut gallery = Vec::new();
    for (id, pool) in frontal.iter().enumerate() {
        if pool.len() < need {
            return Err(Error::InsufficientFrontal(id as u32));
        }
        match protocol {
            Protocol::P1 => {
                let mut pick: Vec<usize> = pool.choose_multiple(rng, 2).copied().collect();
                pick.sort_unstable();
                gallery.extend(pick);
            }
            Protocol::P2 => gallery.extend(pool),
        }
    }
    Ok(Split { gallery, probe })
}

/// Identity-disjoint train/validation/test partition of `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentitySplit {
    pub train: Vec<u32>,
    pub validation: Vec<u32>,
    pub test: Vec<u32>,
}

impl IdentitySplit {
    pub fn new(num_identities: usize, validation: usize, test: usize, seed: u64) -> Result<Self> {
        if validation + test >= num_identities {
            return Err(invalid("identity split leaves no training identities"));
        }
        let mut ids: Vec<u32> = (0..num_identities as u32).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let test_ids = sorted(&ids[..test]);
        let val_ids = sorted(&ids[test..test + validation]);
        let train = sorted(&ids[test + validation..]);
        Ok(Self {
            train,
            validation: val_ids,
            test: test_ids,
        })
    }
}

fn sorted(ids: &[u32]) -> Vec<u32> {
    let mut v = ids.to_vec();
    v.sort_unstable();
    v
}
