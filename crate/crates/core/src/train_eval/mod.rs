//! Losses, metrics, optimizer, and the training and evaluation loops.

pub mod adam;
pub mod eval;
pub mod loss;
pub mod metrics;
pub mod train;

pub use adam::{adam_step, TrainState};
pub use eval::{deblur, evaluate, EvalReport, EvalRow};
pub use loss::{l1_loss, msfr_loss, total_loss, LossBreakdown, MSFR_WEIGHT};
pub use metrics::{psnr, ssim};
pub use train::{train, train_epoch, train_step, TrainConfig, TrainReport};
