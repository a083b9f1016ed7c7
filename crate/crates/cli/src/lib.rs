//! Pipelines behind the `poke2vid` command line.

use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime};

use candle_core::Device;
use poke2vid::data::{DatasetIndex, FlowProvider, IngestConfig, Split};
use poke2vid::eval::synthetic::{kind_name, make_synthetic_dataset, SyntheticSpec};
use poke2vid::eval::{correlation_map, evaluate_suite, CorrelationConfig, CorrelationMap, MetricsReport, SuiteConfig, ToyEmbedder};
use poke2vid::model::{Checkpoint, Poke2Vid};
use poke2vid::train::{Stage, StepRecord, TrainConfig, Trainer, TrainingData};
use poke2vid::{Error, Image, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const LOG_LEVEL_VAR: &str = "POKE2VID_LOG_LEVEL";

/// Parses the value of `POKE2VID_LOG_LEVEL`.
pub fn parse_log_level(value: Option<&str>) -> Result<log::LevelFilter> {
    match value.map(str::trim) {
        None | Some("") | Some("info") => Ok(log::LevelFilter::Info),
        Some("debug") => Ok(log::LevelFilter::Debug),
        Some("warn") => Ok(log::LevelFilter::Warn),
        Some("error") => Ok(log::LevelFilter::Error),
        Some(other) => Err(Error::Config(format!(
            "{LOG_LEVEL_VAR} must be one of debug, info, warn, error; got `{other}`"
        ))),
    }
}

pub fn init_logging() -> Result<()> {
    let level = parse_log_level(std::env::var(LOG_LEVEL_VAR).ok().as_deref())?;
    env_logger::Builder::new().filter_level(level).format_timestamp_millis().init();
    Ok(())
}

pub struct TrainOutcome {
    pub codec: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub history: Vec<StepRecord>,
    /// Mean L1 of validation rollouts, when the data has a test split.
    pub validation_l1: Option<f64>,
}

/// Runs codec pretraining when the config needs it and no codec checkpoint is
/// given, then the dynamics stage.
pub fn train(config: &TrainConfig, codec: Option<&Path>) -> Result<TrainOutcome> {
    let codec_path = match (config.dynamics.single_stage, codec) {
        (true, Some(_)) => return Err(Error::Config("single-stage training takes no codec checkpoint".into())),
        (true, None) => None,
        (false, Some(p)) => Some(p.to_path_buf()),
        (false, None) => Some(pretrain_codec(config)?),
    };
    let codec_ckpt = codec_path.as_deref().map(Checkpoint::load).transpose()?;
    let mut trainer = Trainer::new(config.clone(), TrainingData::from_config(config)?, Stage::Dynamics, codec_ckpt.as_ref())?;
    let checkpoint = trainer.run()?;
    let validation_l1 = match &trainer.data().validation {
        Some(_) => Some(trainer.validation_l1(64, 0)?),
        None => None,
    };
    Ok(TrainOutcome {
        codec: codec_path,
        checkpoint,
        history: trainer.history().to_vec(),
        validation_l1,
    })
}

pub fn pretrain_codec(config: &TrainConfig) -> Result<PathBuf> {
    let mut trainer = Trainer::new(config.clone(), TrainingData::from_config(config)?, Stage::Codec, None)?;
    let path = trainer.run()?;
    log::info!("codec checkpoint {}", path.display());
    Ok(path)
}

/// Continues an interrupted run from one of its checkpoints.
pub fn resume(config: &TrainConfig, checkpoint: &Path) -> Result<PathBuf> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut trainer = Trainer::resume(config.clone(), TrainingData::from_config(config)?, &ckpt)?;
    trainer.run()
}

pub fn evaluate(config: &TrainConfig, checkpoint: &Path, suite: &SuiteConfig, seed: u64) -> Result<MetricsReport> {
    let model = Poke2Vid::load(checkpoint, Device::Cpu)?;
    let data = TrainingData::from_config(config)?;
    let test = data
        .validation
        .ok_or_else(|| Error::Protocol("the configured data has no test split".into()))?;
    let features = config.perceptual.build(config.precision.dtype(), &Device::Cpu)?;
    evaluate_suite(
        &model,
        &test,
        data.flow.as_ref(),
        features.as_ref(),
        &ToyEmbedder::default(),
        suite,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

pub fn correlate(
    checkpoint: &Path,
    image: &Image,
    location: (usize, usize),
    config: &CorrelationConfig,
    flow: &dyn FlowProvider,
    seed: u64,
) -> Result<CorrelationMap> {
    let model = Poke2Vid::load(checkpoint, Device::Cpu)?;
    correlation_map(&model, image, location, config, flow, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Renders a synthetic dataset to PNG frames plus a manifest, and returns the
/// manifest path.
pub fn write_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<PathBuf> {
    let ds = make_synthetic_dataset(spec, &mut ChaCha8Rng::seed_from_u64(spec.seed))?;
    let manifest = out.join(format!("{}.jsonl", kind_name(spec.kind)));
    ds.index.save_index(&manifest)?;
    Ok(manifest)
}

/// Loads and preprocesses a manifest, writing the processed copy to `out`.
pub fn ingest(manifest: &Path, config: &IngestConfig, out: &Path) -> Result<DatasetIndex> {
    let index = poke2vid::data::load_dataset(manifest, config)?;
    index.save_index(out)?;
    let count = |s| index.split(s).count();
    log::info!("{} train / {} test clips -> {}", count(Split::Train), count(Split::Test), out.display());
    Ok(index)
}

/// Modification time, for hot reloading a checkpoint that is rewritten in place.
pub fn modified(path: &Path) -> Option<SystemTime> {
    std::fs::metadata(path).and_then(|m| m.modified()).ok()
}

pub const RELOAD_POLL: Duration = Duration::from_secs(2);
