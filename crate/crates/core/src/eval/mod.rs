//! Metrics, motion-correlation analysis, retrieval and synthetic data.

pub mod correlation;
pub mod fvd;
pub mod metrics;
pub mod oracles;
pub mod retrieval;
pub mod suite;
pub mod synthetic;

pub use correlation::{correlation_map, CorrelationConfig, CorrelationMap};
pub use fvd::{frechet_video_distance, ToyEmbedder, VideoEmbedder};
pub use metrics::{perceptual_distance, psnr, ssim};
pub use oracles::{PatchOracle, ReplayOracle, RigidTranslationOracle};
pub use retrieval::{nearest_neighbor_frame, Neighbor};
pub use suite::{evaluate_suite, MetricsReport, SuiteConfig};
pub use synthetic::{make_synthetic_dataset, SyntheticDataset, SyntheticKind, SyntheticSpec};
