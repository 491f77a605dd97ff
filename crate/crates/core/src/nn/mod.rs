//! Minimal dense networks: forward, backward and plain SGD.
//!
//! Large enough for the toy multi-exit classifier, the fully connected exit
//! predictor and the two-layer threshold regressors; nothing more.

mod gradcheck;
mod loss;
mod mlp;
mod train;

pub use gradcheck::{numeric_gradient_check, GRADCHECK_STEP};
pub use loss::{
    bce_loss, mse_loss, softmax_cross_entropy, weighted_ce_loss, LossKind, BCE_CLAMP,
};
pub use mlp::{Activation, ForwardCache, Gradients, Layer, Mlp, OutputGrad};
pub use train::{shuffled_batches, train, TrainConfig, TrainOutcome};
