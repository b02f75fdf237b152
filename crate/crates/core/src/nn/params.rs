//! Parameter store partitioned into independently freezable groups.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::sha256_hex;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub image_size: usize,
    /// One stride-2 3x3 convolution per entry.
    pub conv_channels: Vec<usize>,
    pub rich_dim: usize,
    pub identity_dim: usize,
    pub nonidentity_dim: usize,
    pub pose_dim: usize,
    pub landmark_dim: usize,
    pub num_classes: usize,
    pub recon_hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            conv_channels: vec![16, 32, 64, 128],
            rich_dim: 512,
            identity_dim: 256,
            nonidentity_dim: 128,
            pose_dim: 7,
            landmark_dim: 32,
            num_classes: 2,
            recon_hidden: 512,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.image_size,
            self.rich_dim,
            self.identity_dim,
            self.nonidentity_dim,
            self.pose_dim,
            self.landmark_dim,
            self.num_classes,
            self.recon_hidden,
        ];
        if dims.contains(&0) || self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(invalid("architecture dimensions must be positive"));
        }
        Ok(())
    }

    /// Spatial side after each conv stage.
    pub fn stage_sizes(&self) -> Vec<usize> {
        let mut s = self.image_size;
        self.conv_channels
            .iter()
            .map(|_| {
                s = conv_out(s);
                s
            })
            .collect()
    }
}

/// Output side of a 3x3, stride-2, pad-1 convolution.
pub(crate) fn conv_out(side: usize) -> usize {
    (side - 1) / 2 + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Backbone,
    Identity,
    NonIdentity,
    IdClassifier,
    PoseHead,
    LandmarkHead,
    Reconstructor,
}

impl Group {
    pub const ALL: [Group; 7] = [
        Group::Backbone,
        Group::Identity,
        Group::NonIdentity,
        Group::IdClassifier,
        Group::PoseHead,
        Group::LandmarkHead,
        Group::Reconstructor,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::Backbone => "backbone",
            Group::Identity => "identity",
            Group::NonIdentity => "nonidentity",
            Group::IdClassifier => "classifier",
            Group::PoseHead => "pose_head",
            Group::LandmarkHead => "landmark_head",
            Group::Reconstructor => "reconstructor",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamTensor {
    fn zeros(name: String, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name,
            shape,
            data: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub group: Group,
    pub tensors: Vec<ParamTensor>,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: ArchConfig,
    pub groups: Vec<ParamGroup>,
}

/// Names and shapes of every tensor in a group, in storage order. Linear
/// weights are `out x in`; conv weights are `out x (in * 9)`.
pub fn group_layout(arch: &ArchConfig, group: Group) -> Vec<(String, Vec<usize>)> {
    let lin = |name: &str, out: usize, inp: usize| vec![(format!("{name}.weight"), vec![out, inp]), (format!("{name}.bias"), vec![out])];
    match group {
        Group::Backbone => {
            let mut v = Vec::new();
            let mut cin = 1;
            for (i, &c) in arch.conv_channels.iter().enumerate() {
                v.extend(lin(&format!("conv{i}"), c, cin * 9));
                cin = c;
            }
            v.extend(lin("rich", arch.rich_dim, cin));
            v
        }
        Group::Identity => lin("identity", arch.identity_dim, arch.rich_dim),
        Group::NonIdentity => lin("nonidentity", arch.nonidentity_dim, arch.rich_dim),
        Group::IdClassifier => lin("classifier", arch.num_classes, arch.identity_dim),
        Group::PoseHead => lin("pose", arch.pose_dim, arch.nonidentity_dim),
        Group::LandmarkHead => lin("landmark", arch.landmark_dim, arch.nonidentity_dim),
        Group::Reconstructor => {
            let mut v = lin("recon1", arch.recon_hidden, arch.identity_dim + arch.nonidentity_dim);
            v.extend(lin("recon2", arch.rich_dim, arch.recon_hidden));
            v
        }
    }
}

/// Weights uniform in `[-sqrt(6 / fan_in), sqrt(6 / fan_in)]`, biases zero.
/// Each group draws from its own stream so groups can be re-initialized alone.
pub fn init_group(arch: &ArchConfig, group: Group, seed: u64) -> ParamGroup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(group.index() as u64 + 1);
    let tensors = group_layout(arch, group)
        .into_iter()
        .map(|(name, shape)| {
            let mut t = ParamTensor::zeros(name, shape);
            if t.shape.len() == 2 {
                let bound = init_bound(t.shape[1]);
                t.data.iter_mut().for_each(|w| *w = rng.gen_range(-bound..=bound));
            }
            t
        })
        .collect();
    ParamGroup { group, tensors, frozen: false }
}

pub fn init_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

pub fn init_params(arch: &ArchConfig, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    Ok(ModelParams {
        arch: arch.clone(),
        groups: Group::ALL.iter().map(|&g| init_group(arch, g, seed)).collect(),
    })
}

impl ModelParams {
    pub fn group(&self, g: Group) -> &ParamGroup {
        &self.groups[g.index()]
    }

    pub fn group_mut(&mut self, g: Group) -> &mut ParamGroup {
        &mut self.groups[g.index()]
    }

    /// Tensor data by group and position in [`group_layout`] order.
    pub(crate) fn t(&self, g: Group, i: usize) -> &[f64] {
        &self.groups[g.index()].tensors[i].data
    }

    pub fn tensor(&self, g: Group, name: &str) -> Option<&ParamTensor> {
        self.group(g).tensors.iter().find(|t| t.name == name)
    }

    pub fn set_frozen(&mut self, g: Group, frozen: bool) {
        self.group_mut(g).frozen = frozen;
    }

    pub fn is_frozen(&self, g: Group) -> bool {
        self.group(g).frozen
    }

    pub fn num_scalars(&self) -> usize {
        self.groups.iter().flat_map(|g| &g.tensors).map(|t| t.data.len()).sum()
    }

    /// SHA-256 over a group's names, shapes and little-endian values.
    pub fn group_hash(&self, g: Group) -> String {
        let mut bytes = Vec::new();
        for t in &self.group(g).tensors {
            bytes.extend_from_slice(t.name.as_bytes());
            for &d in &t.shape {
                bytes.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &t.data {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }

    /// Replace the classifier with a freshly initialized one over `num_classes`.
    pub fn reset_classifier(&mut self, num_classes: usize, seed: u64) {
        self.arch.num_classes = num_classes;
        let frozen = self.is_frozen(Group::IdClassifier);
        let mut g = init_group(&self.arch, Group::IdClassifier, seed);
        g.frozen = frozen;
        self.groups[Group::IdClassifier.index()] = g;
    }

    pub fn reset_group(&mut self, group: Group, seed: u64) {
        let frozen = self.is_frozen(group);
        let mut g = init_group(&self.arch, group, seed);
        g.frozen = frozen;
        self.groups[group.index()] = g;
    }
}

/// Gradient buffers mirroring [`ModelParams`] tensor for tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub groups: Vec<Vec<Vec<f64>>>,
}

impl Gradients {
    pub fn zeros_like(p: &ModelParams) -> Self {
        Self {
            groups: p.groups.iter().map(|g| g.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect()).collect(),
        }
    }

    pub fn get(&self, g: Group, i: usize) -> &[f64] {
        &self.groups[g.index()][i]
    }

    pub fn group_is_zero(&self, g: Group) -> bool {
        self.groups[g.index()].iter().flatten().all(|&x| x == 0.0)
    }
}
