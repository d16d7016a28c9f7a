//! Conditional denoising diffusion: schedule, denoiser, forward corruption,
//! training, ancestral sampling and partial-diffusion editing.

mod edit;
mod process;
mod schedule;
mod train;
mod unet;

pub use edit::{
    check_stop_grid, edit_series, even_stop_grid, partial_edit, partial_edit_batch,
    resemblance_threshold, validate_marks, TransformationSeries,
};
pub use process::{
    fill_standard_normal, noise_prediction_loss, q_sample, q_step, reverse_chain, sample,
    sample_batch, training_loss, ExplicitNoise, NoiseSource, RngNoise, SeededNoise, TrainingNoise,
};
pub use schedule::NoiseSchedule;
pub use train::{DiffusionModel, DiffusionTrainer, GaussianPrior, TrainConfig};
pub use unet::{DenoiserConfig, NoisePredictor, UNet};
