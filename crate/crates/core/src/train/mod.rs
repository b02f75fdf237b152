//! Losses, the Adam optimizer, training stages and gradient checking.

mod adam;
mod gradcheck;
mod loss;
mod stages;

pub use adam::{optimizer_step, AdamConfig, OptimizerState};
pub use gradcheck::{check_objectives, gradient_check, relative_error, GradCheckReport, ObjectiveCheck, TensorCheck};
pub use loss::{
    cross_entropy, loss_l2_pair, loss_multitask, loss_reconstruction, multitask_gradients, pair_distance, squared_error, L2Weights, LossTerms,
    MultitaskWeights, SiameseWeights,
};
pub use stages::{
    argmax, fine_tune_pairs, fine_tune_softmax, identity_accuracy, rich_embeddings, train_l2, train_multitask, train_stage2, train_stage3, validation_metric,
    EpochLog, LogKind, PairObjective, Stage2Config, Stage3Config, TrainingLog, TrainingSet,
};
