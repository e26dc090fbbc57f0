//! Loss, optimizers and the epoch loop.

mod config;
mod epoch;
mod forward;
mod loss;
mod optim;

pub use config::{parse_kv, parse_switch, TrainConfig};
pub use epoch::{
    batch_gradient, epoch_order, evaluate, run_epoch, train_epoch, Evaluation, Metrics, Splits,
};
pub use forward::{forward, init_model, log_domain_loss, loss_and_grad, predict, Forward};
pub(crate) use loss::softmax_cross_entropy;
pub use loss::{argmax, cross_entropy_loss, log_sum_exp, softmax};
pub use optim::{adam_step, sgd_step, AdamHyper, AdamState, OptimizerKind, OptimizerState};
