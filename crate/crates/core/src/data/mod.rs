//! Dataset ingestion, optical flow and training-poke simulation.

pub mod clip;
pub mod example;
pub mod flow;
pub mod poke;
pub mod sampler;

pub use clip::{load_dataset, DatasetIndex, IngestConfig, ManifestEntry, Split, VideoClip};
pub use example::{make_training_example, TrainingExample};
pub use flow::{
    estimate_flow, BlockMatchingFlowProvider, ExternalFlowProvider, FlowMap, FlowProvider,
    FlowQuery, GroundTruthMotion, PrecomputedFlowProvider, SyntheticFlowProvider, read_raster, write_raster,
};
pub use poke::{
    foreground_mask, mean_motion, normalize_impulse_poke, sample_training_poke, Mask, PokeMode,
    PokeSpec,
};
pub use sampler::MotionMatchedSampler;
