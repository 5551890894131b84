//! Gradients, optimizer, metrics, losses, patch sampling and the training
//! loop.

pub mod adam;
pub mod backprop;
pub mod data;
pub mod loss;
pub mod metrics;
pub mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use backprop::{backward, GradAccumulator, GradientTape, Gradients};
pub use data::{sample_patches, Patch, PatchDataset};
pub use loss::{
    clip_weights, critic_input_grad, sres_loss, wgan_losses, DeltaMetric, GanLossConfig, GanOutput, GanSample,
    LossOutput, Sample,
};
pub use metrics::{mse, psnr, ssim, ssim_grad};
pub use trainer::{critic_path, read_system, Mode, StepRecord, TrainConfig, Trainer};
