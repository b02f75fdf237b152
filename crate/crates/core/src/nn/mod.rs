//! Backbone, identity/non-identity branches, heads and the feature reconstructor.

mod checkpoint;
mod forward;
mod linalg;
mod params;

pub use checkpoint::{load_checkpoint, params_from_container, params_to_container, save_checkpoint, CHECKPOINT_FORMAT};
pub use forward::{
    backward_branches, backward_reconstruct, backward_rich, embed, embed_images, forward_branches, forward_pair, forward_pair_from_rich, forward_reconstruct,
    forward_rich, forward_rich_cached, images_to_mat, BundleGrad, EmbeddingBundle, Mat, PairForward, Reconstruction, RichCache,
};
pub use params::{group_layout, init_bound, init_group, init_params, ArchConfig, Gradients, Group, ModelParams, ParamGroup, ParamTensor};
