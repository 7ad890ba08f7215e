//! Direct preference optimization of the toy captioner.

mod loss;
mod optim;
mod trainer;

pub use loss::{
    dpo_grad, dpo_loss, dpo_loss_from_deltas, encode_pairs, sigmoid, softplus, BatchGrad, EncodedPair, PairLoss,
};
pub use optim::{Adam, AdamConfig, Schedule};
pub use trainer::{
    estimate_kl, evaluate_policy, full_loss, lr_at, train, DpoConfig, TrainLogEntry, TrainOutcome, TrainState,
    ValidationDecoding, ValidationSet,
};
