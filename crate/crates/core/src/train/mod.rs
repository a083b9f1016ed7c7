//! Losses, discriminators, the optimizer and both training stages.

pub mod adversarial;
pub mod config;
pub mod losses;
pub mod optim;
pub mod trainer;

pub use config::{DataConfig, FlowConfig, Precision, TrainConfig, TrainingData};
pub use losses::{FeatureConfig, FeatureProvider, IdentityFeatures, LossWeights};
pub use optim::{Adam, AdamConfig};
pub use trainer::{moving_average, read_metrics, Stage, StepRecord, Trainer};
