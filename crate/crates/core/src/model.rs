//! The assembled synthesizer and its checkpoint archive.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype as StDtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::codec::{CodecConfig, Decoder, Hierarchy, PokeEncoder, StateEncoder};
use crate::data::{PokeMode, PokeSpec};
use crate::dynamics::{interaction_schedule, Predictor, PredictorKind};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::ParamStore;

pub const CHECKPOINT_FORMAT: &str = "poke2vid-ckpt-1";

pub const STATE_ENCODER: &str = "enc_sigma";
pub const POKE_ENCODER: &str = "enc_phi";
pub const DYNAMICS: &str = "dyn";
pub const DECODER: &str = "dec";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub codec: CodecConfig,
    pub predictor: PredictorKind,
    /// Layers of the bottleneck-only recurrent baseline.
    pub bottleneck_layers: usize,
    /// Frame rate reported for synthesized clips.
    pub fps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            codec: CodecConfig::default(),
            predictor: PredictorKind::Hierarchy,
            bottleneck_layers: 3,
            fps: 10.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        if self.predictor == PredictorKind::BottleneckRnn && self.codec.depth() != 1 {
            return Err(Error::Config(
                "the bottleneck_rnn predictor requires codec.levels = 1".into(),
            ));
        }
        if !(self.fps > 0.0) {
            return Err(Error::Config("fps must be positive".into()));
        }
        Ok(())
    }
}

/// Anything that turns a frame and a poke into a clip. Implemented by the
/// learned model and by the analytic oracles used in evaluation.
pub trait VideoSynthesizer: Send + Sync {
    fn model_id(&self) -> String;

    /// Native square resolution, if the synthesizer has one.
    fn image_size(&self) -> Option<usize>;

    fn fps(&self) -> f32 {
        10.0
    }

    fn synthesize(&self, x0: &Image, poke: &PokeSpec, len: usize) -> Result<Vec<Image>>;
}

pub struct Poke2Vid {
    config: ModelConfig,
    store: ParamStore,
    enc_sigma: StateEncoder,
    enc_phi: PokeEncoder,
    predictor: Predictor,
    decoder: Decoder,
    model_id: String,
}

/// Differentiable output of one forward pass.
pub struct Rollout {
    /// Predicted hierarchies for steps `1..=T`.
    pub states: Vec<Hierarchy>,
    /// Decoded frames, `T` tensors of shape `(B, 3, H, W)`.
    pub frames: Vec<Tensor>,
}

impl Poke2Vid {
    pub fn new(config: ModelConfig, dtype: DType, device: Device, seed: u64) -> Result<Self> {
        config.validate()?;
        let codec = &config.codec;
        let mut store = ParamStore::new(dtype, device, seed);
        // Each group gets its own stream so sizes of one never shift another.
        store.reseed(seed.wrapping_mul(4).wrapping_add(1));
        let enc_sigma = StateEncoder::new(&mut store.scope(STATE_ENCODER), codec)?;
        store.reseed(seed.wrapping_mul(4).wrapping_add(2));
        let enc_phi = PokeEncoder::new(&mut store.scope(POKE_ENCODER), codec)?;
        store.reseed(seed.wrapping_mul(4).wrapping_add(3));
        let predictor = match config.predictor {
            PredictorKind::Hierarchy => Predictor::hierarchy(&mut store.scope(DYNAMICS), codec)?,
            PredictorKind::BottleneckRnn => {
                Predictor::bottleneck_stack(&mut store.scope(DYNAMICS), codec, config.bottleneck_layers)?
            }
        };
        store.reseed(seed.wrapping_mul(4).wrapping_add(4));
        let decoder = Decoder::new(&mut store.scope(DECODER), codec)?;
        Ok(Self {
            config,
            store,
            enc_sigma,
            enc_phi,
            predictor,
            decoder,
            model_id: format!("poke2vid-init-{seed}"),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn predictor(&self) -> &Predictor {
        &self.predictor
    }

    pub fn set_model_id(&mut self, id: impl Into<String>) {
        self.model_id = id.into();
    }

    pub fn encode_states(&self, x: &Tensor) -> Result<Hierarchy> {
        self.enc_sigma.forward(x)
    }

    pub fn encode_pokes(&self, pokes: &[PokeSpec]) -> Result<Tensor> {
        self.enc_phi.forward(pokes, self.dtype(), self.device())
    }

    pub fn decode(&self, states: &Hierarchy) -> Result<Tensor> {
        self.decoder.forward(states)
    }

    /// Decodes several hierarchies with a single decoder pass.
    pub fn decode_many(&self, states: &[Hierarchy]) -> Result<Vec<Tensor>> {
        let Some(first) = states.first() else {
            return Ok(Vec::new());
        };
        let b = first.batch_size();
        let depth = first.depth();
        let levels = (0..depth)
            .map(|k| {
                let parts: Vec<&Tensor> = states.iter().map(|h| &h.levels()[k]).collect();
                Ok(Tensor::cat(&parts, 0)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let frames = self.decoder.forward(&Hierarchy::new(levels)?)?;
        (0..states.len())
            .map(|i| Ok(frames.narrow(0, i * b, b)?))
            .collect()
    }

    /// Encodes `x0`, rolls the hierarchy forward for `len` steps under the
    /// pokes, and decodes every step.
    pub fn forward(&self, x0: &Tensor, pokes: &[PokeSpec], mode: PokeMode, len: usize) -> Result<Rollout> {
        if pokes.len() != x0.dims()[0] {
            return Err(Error::validation(format!(
                "{} pokes for a batch of {}",
                pokes.len(),
                x0.dims()[0]
            )));
        }
        let s0 = self.encode_states(x0)?;
        let phi = self.encode_pokes(pokes)?;
        let schedule = interaction_schedule(&phi, mode, len)?;
        let states = self.predictor.rollout(&s0, &schedule)?;
        let frames = self.decode_many(&states)?;
        Ok(Rollout { states, frames })
    }

    /// Generator parameters as a checkpoint-ready map.
    pub fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        self.store.snapshot()
    }

    pub fn load_tensors(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let own: BTreeMap<String, Tensor> = tensors
            .iter()
            .filter(|(k, _)| self.store.get(k).is_some())
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        self.store.load(&own, true)
    }

    /// Builds a model from a checkpoint, validating the format tag and that
    /// every parameter shape matches the stored config.
    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType, device: Device) -> Result<Self> {
        let config = ckpt.model_config()?;
        let mut model = Self::new(config, dtype, device, 0)?;
        model.load_tensors(&ckpt.tensors)?;
        model.model_id = ckpt.model_id();
        Ok(model)
    }

    pub fn load(path: &Path, device: Device) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, DType::F32, device)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(&self.config)?;
        ckpt.tensors = self.tensors()?;
        Ok(ckpt)
    }
}

impl VideoSynthesizer for Poke2Vid {
    fn model_id(&self) -> String {
        self.model_id.clone()
    }

    fn image_size(&self) -> Option<usize> {
        Some(self.config.codec.image_size)
    }

    fn fps(&self) -> f32 {
        self.config.fps
    }

    fn synthesize(&self, x0: &Image, poke: &PokeSpec, len: usize) -> Result<Vec<Image>> {
        let size = self.config.codec.image_size;
        if x0.shape() != (size, size) {
            return Err(Error::validation(format!(
                "image is {:?}, model expects {size}x{size}",
                x0.shape()
            )));
        }
        poke.validate(size, size)?;
        let x = x0.to_tensor(self.dtype(), self.device())?;
        let out = self.forward(&x, std::slice::from_ref(poke), poke.mode, len)?;
        out.frames
            .iter()
            .map(|f| Image::from_tensor(&f.detach()))
            .collect()
    }
}

/// Named tensors plus string metadata, stored as a safetensors archive.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(model: &ModelConfig) -> Result<Self> {
        let mut metadata = BTreeMap::new();
        metadata.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
        metadata.insert("model".to_string(), serde_json::to_string(model)?);
        Ok(Self {
            metadata,
            tensors: BTreeMap::new(),
        })
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let raw = self
            .metadata
            .get("model")
            .ok_or_else(|| Error::Checkpoint("checkpoint has no model config".into()))?;
        let cfg: ModelConfig = serde_json::from_str(raw)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Stable identifier derived from the parameter contents.
    pub fn model_id(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (k, t) in &self.tensors {
            h.update(k.as_bytes());
            if let Ok(v) = t.to_dtype(DType::F64).and_then(|t| t.flatten_all()?.to_vec1::<f64>()) {
                for x in v {
                    h.update(x.to_le_bytes());
                }
            }
        }
        let digest = h.finalize();
        let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
        format!("poke2vid-{hex}")
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buffers: Vec<(String, Vec<u8>, StDtype, Vec<usize>)> = Vec::new();
        for (name, t) in &self.tensors {
            let (bytes, dtype) = match t.dtype() {
                DType::F64 => (
                    t.flatten_all()?
                        .to_vec1::<f64>()?
                        .iter()
                        .flat_map(|v| v.to_le_bytes())
                        .collect(),
                    StDtype::F64,
                ),
                _ => (
                    t.to_dtype(DType::F32)?
                        .flatten_all()?
                        .to_vec1::<f32>()?
                        .iter()
                        .flat_map(|v| v.to_le_bytes())
                        .collect(),
                    StDtype::F32,
                ),
            };
            buffers.push((name.clone(), bytes, dtype, t.dims().to_vec()));
        }
        let views = buffers
            .iter()
            .map(|(name, bytes, dtype, shape)| {
                TensorView::new(*dtype, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) =
            SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let metadata: BTreeMap<String, String> = header
            .metadata()
            .clone()
            .unwrap_or_default()
            .into_iter()
            .collect();
        match metadata.get("format") {
            Some(f) if f == CHECKPOINT_FORMAT => {}
            Some(f) => {
                return Err(Error::Checkpoint(format!(
                    "unsupported checkpoint format `{f}`, expected `{CHECKPOINT_FORMAT}`"
                )))
            }
            None => return Err(Error::Checkpoint("checkpoint has no format tag".into())),
        }
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            let shape = view.shape().to_vec();
            let data = view.data();
            let t = match view.dtype() {
                StDtype::F64 => {
                    let v: Vec<f64> = data
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    Tensor::from_vec(v, shape, &Device::Cpu)?
                }
                StDtype::F32 => {
                    let v: Vec<f32> = data
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                    Tensor::from_vec(v, shape, &Device::Cpu)?
                }
                other => {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{name}` has unsupported dtype {other:?}"
                    )))
                }
            };
            tensors.insert(name, t);
        }
        Ok(Self { metadata, tensors })
    }

    /// Writes through a temporary file, so an interrupted save never
    /// clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
