//! Losses, Adam updates, adaptive density control and the training loop.

mod adam;
mod density;
mod losses;
mod train;

pub use adam::{adam_step, AdamState, LearningRates, Moments, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use density::{density_control, DensifyConfig, DensifyStats, ScreenAccum};
pub use losses::{
    isotropic_backward, isotropy_penalty, loss_distortion, loss_isotropic, loss_normal,
    loss_photometric, loss_rigging, masked_target, psnr, rigging_penalties, ssim, total_loss,
    LossComponents, LossWeights, PhotometricLoss,
};
pub use train::{
    holdout_metrics, init_scene, label_metrics, predict_contacts, render_scene_frame, train,
    ContactPrediction, IterationLog, TrainConfig, TrainState, LOG_CSV_HEADER,
};
