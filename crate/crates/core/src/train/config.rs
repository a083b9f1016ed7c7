//! Training configuration (a TOML file) and dataset assembly.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::DType;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    load_dataset, BlockMatchingFlowProvider, DatasetIndex, ExternalFlowProvider, FlowProvider, IngestConfig,
    PokeMode, PrecomputedFlowProvider, Split,
};
use crate::error::{Error, Result};
use crate::eval::synthetic::{make_synthetic_dataset, SyntheticSpec};
use crate::model::ModelConfig;
use crate::train::adversarial::DiscriminatorConfig;
use crate::train::losses::{FeatureConfig, LossWeights};
use crate::train::optim::AdamConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FlowConfig {
    /// Exact flow of rendered scenes; only valid with synthetic data.
    Synthetic,
    Precomputed {
        root: PathBuf,
    },
    External {
        program: PathBuf,
        #[serde(default)]
        args: Vec<String>,
    },
    BlockMatching {
        block_radius: usize,
        search_radius: usize,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub downsample: usize,
    pub center_crop: bool,
    pub synthetic: Option<SyntheticSpec>,
    /// Defaults to exact flow for synthetic data and block matching
    /// otherwise.
    pub flow: Option<FlowConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 2000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsConfig {
    pub steps: u64,
    /// Train everything from scratch in one stage, without a codec
    /// checkpoint.
    pub single_stage: bool,
    pub freeze_state_encoder: bool,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            single_stage: false,
            freeze_state_encoder: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// 0 disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            checkpoint_every: 1000,
            log_every: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub precision: Precision,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub optim: AdamConfig,
    pub batch_size: usize,
    pub sequence_length: usize,
    pub poke_mode: PokeMode,
    pub bg_fraction: f64,
    pub loss: LossWeights,
    pub perceptual: FeatureConfig,
    pub discriminator: DiscriminatorConfig,
    pub pretrain: PretrainConfig,
    pub dynamics: DynamicsConfig,
    pub output: OutputConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            optim: AdamConfig::default(),
            batch_size: 10,
            sequence_length: 10,
            poke_mode: PokeMode::Shift,
            bg_fraction: 0.1,
            loss: LossWeights::default(),
            perceptual: FeatureConfig::Identity,
            discriminator: DiscriminatorConfig::default(),
            pretrain: PretrainConfig::default(),
            dynamics: DynamicsConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 || self.sequence_length == 0 {
            return Err(Error::Config("batch_size and sequence_length must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.bg_fraction) {
            return Err(Error::Config(format!("bg_fraction {} outside [0, 1)", self.bg_fraction)));
        }
        if self.output.log_every == 0 {
            return Err(Error::Config("output.log_every must be positive".into()));
        }
        match (&self.data.manifest, &self.data.synthetic) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("data: set either `manifest` or `synthetic`, not both".into()))
            }
            (None, None) => return Err(Error::Config("data: one of `manifest` or `synthetic` is required".into())),
            (None, Some(spec)) => {
                spec.validate()?;
                if spec.image_size != self.model.codec.image_size {
                    return Err(Error::Config(format!(
                        "synthetic image_size {} differs from model image_size {}",
                        spec.image_size, self.model.codec.image_size
                    )));
                }
            }
            (Some(_), None) => {
                if matches!(self.data.flow, Some(FlowConfig::Synthetic)) {
                    return Err(Error::Config("synthetic flow needs synthetic data".into()));
                }
            }
        }
        if self.data.downsample == 0 && self.data.manifest.is_some() {
            return Err(Error::Config("data.downsample must be >= 1".into()));
        }
        Ok(())
    }
}

pub struct TrainingData {
    pub train: DatasetIndex,
    pub validation: Option<DatasetIndex>,
    pub flow: Arc<dyn FlowProvider>,
}

impl TrainingData {
    pub fn new(train: DatasetIndex, validation: Option<DatasetIndex>, flow: Arc<dyn FlowProvider>) -> Self {
        Self {
            train,
            validation,
            flow,
        }
    }

    pub fn from_config(config: &TrainConfig) -> Result<Self> {
        let data = &config.data;
        let split = |all: DatasetIndex| {
            let test = all.subset(Split::Test);
            (all.subset(Split::Train), (!test.is_empty()).then_some(test))
        };
        if let Some(spec) = &data.synthetic {
            let ds = make_synthetic_dataset(spec, &mut ChaCha8Rng::seed_from_u64(spec.seed))?;
            let (train, validation) = split(ds.index);
            let flow: Arc<dyn FlowProvider> = match &data.flow {
                None | Some(FlowConfig::Synthetic) => Arc::new(ds.flow),
                Some(other) => build_flow(other)?,
            };
            return Ok(Self::new(train, validation, flow));
        }
        let manifest = data.manifest.as_ref().expect("validated");
        let ingest = IngestConfig {
            downsample: data.downsample.max(1),
            center_crop: data.center_crop,
            image_size: Some(config.model.codec.image_size),
        };
        let (train, validation) = split(load_dataset(manifest, &ingest)?);
        let flow = build_flow(data.flow.as_ref().unwrap_or(&FlowConfig::BlockMatching {
            block_radius: 2,
            search_radius: 4,
        }))?;
        Ok(Self::new(train, validation, flow))
    }
}

pub fn build_flow(config: &FlowConfig) -> Result<Arc<dyn FlowProvider>> {
    Ok(match config {
        FlowConfig::Synthetic => return Err(Error::Config("synthetic flow needs synthetic data".into())),
        FlowConfig::Precomputed { root } => Arc::new(PrecomputedFlowProvider::new(root)),
        FlowConfig::External { program, args } => Arc::new(ExternalFlowProvider::new(program, args.clone())),
        FlowConfig::BlockMatching {
            block_radius,
            search_radius,
        } => Arc::new(BlockMatchingFlowProvider {
            block_radius: *block_radius,
            search_radius: *search_radius,
        }),
    })
}
