//! Binary classifier ensemble used to score real and generated patches.

mod ensemble;
mod net;
mod sampler;
mod train;

pub use ensemble::{evaluate, Classifier, ClassifierEnsemble, Ensemble, Metrics, PatchScorer};
pub use net::{BackboneConfig, ResNet};
pub use sampler::{split_by_vertical_axis, BalancedSampler};
pub use train::{train_classifier, train_member, ClassifierConfig, TrainingCurve};
