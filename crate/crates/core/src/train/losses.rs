//! Reconstruction and trajectory losses and their weighted combination.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::codec::Hierarchy;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore};

/// Multi-layer feature maps used by the perceptual loss and distance.
pub trait FeatureProvider: Send + Sync {
    fn name(&self) -> &str;

    /// Feature maps `Phi_k(x)` for a `(B, 3, H, W)` batch.
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;

    /// Per-layer weights for the perceptual distance metric.
    fn layer_weights(&self) -> Vec<f64>;
}

/// A single layer that is the image itself.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityFeatures;

impl FeatureProvider for IdentityFeatures {
    fn name(&self) -> &str {
        "identity"
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![x.clone()])
    }

    fn layer_weights(&self) -> Vec<f64> {
        vec![1.0]
    }
}

/// A frozen stack of `conv3 -> ReLU` blocks, halving resolution after the
/// first. Weights come from a safetensors file (`layer{k}.weight`,
/// `layer{k}.bias`, optional `layer_weights` JSON metadata) or from a seed.
pub struct ConvFeatures {
    layers: Vec<(Tensor, Tensor, usize)>,
    weights: Vec<f64>,
    name: String,
}

impl ConvFeatures {
    pub fn random(channels: &[usize], seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut store = ParamStore::new(dtype, device.clone(), seed);
        let mut cin = 3;
        let mut layers = Vec::new();
        for (k, &c) in channels.iter().enumerate() {
            let stride = if k == 0 { 1 } else { 2 };
            let conv = Conv2d::new(&mut store.scope(&format!("layer{k}")), cin, c, 3, stride, 1)?;
            layers.push((conv.weight.as_tensor().detach(), conv.bias.as_tensor().detach(), stride));
            cin = c;
        }
        Ok(Self {
            weights: vec![1.0; layers.len()],
            layers,
            name: format!("random-conv-{seed}"),
        })
    }

    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let meta = header.metadata().clone().unwrap_or_default();
        let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let get = |name: &str| -> Result<Option<Tensor>> {
            let Ok(view) = st.tensor(name) else {
                return Ok(None);
            };
            if view.dtype() != safetensors::Dtype::F32 {
                return Err(Error::Checkpoint(format!("feature tensor `{name}` must be f32")));
            }
            let v: Vec<f32> = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Ok(Some(Tensor::from_vec(v, view.shape(), device)?.to_dtype(dtype)?))
        };
        let mut layers = Vec::new();
        for k in 0.. {
            let (Some(w), Some(b)) = (get(&format!("layer{k}.weight"))?, get(&format!("layer{k}.bias"))?) else {
                break;
            };
            layers.push((w, b, if k == 0 { 1 } else { 2 }));
        }
        if layers.is_empty() {
            return Err(Error::Checkpoint(format!("{} holds no feature layers", path.display())));
        }
        let weights: Vec<f64> = match meta.get("layer_weights") {
            Some(raw) => serde_json::from_str(raw)?,
            None => vec![1.0; layers.len()],
        };
        if weights.len() != layers.len() {
            return Err(Error::Checkpoint("layer_weights length differs from layer count".into()));
        }
        Ok(Self {
            layers,
            weights,
            name: path.display().to_string(),
        })
    }
}

impl FeatureProvider for ConvFeatures {
    fn name(&self) -> &str {
        &self.name
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = match self.layers.first() {
            Some((w, _, _)) => x.to_dtype(w.dtype())?,
            None => x.clone(),
        };
        let mut out = Vec::with_capacity(self.layers.len());
        for (w, b, stride) in &self.layers {
            let y = crate::nn::conv2d(&h, w, 1, *stride)?;
            h = y.broadcast_add(&b.reshape((1, (), 1, 1))?)?.relu()?;
            out.push(h.clone());
        }
        Ok(out)
    }

    fn layer_weights(&self) -> Vec<f64> {
        self.weights.clone()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureConfig {
    #[default]
    Identity,
    RandomConv {
        channels: Vec<usize>,
        seed: u64,
    },
    File {
        path: std::path::PathBuf,
    },
}

impl FeatureConfig {
    pub fn build(&self, dtype: DType, device: &Device) -> Result<Box<dyn FeatureProvider>> {
        Ok(match self {
            FeatureConfig::Identity => Box::new(IdentityFeatures),
            FeatureConfig::RandomConv { channels, seed } => {
                Box::new(ConvFeatures::random(channels, *seed, dtype, device)?)
            }
            FeatureConfig::File { path } => Box::new(ConvFeatures::load(path, dtype, device)?),
        })
    }
}

/// `sum_i sum_k mean|Phi_k(pred_i) - Phi_k(target_i)|`, averaged over the
/// batch. Frames are `(B, 3, H, W)` tensors.
pub fn perceptual_loss(pred: &[Tensor], target: &[Tensor], features: &dyn FeatureProvider) -> Result<Tensor> {
    if pred.len() != target.len() {
        return Err(Error::validation(format!(
            "{} predicted frames vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::validation("perceptual loss needs at least one frame"));
    }
    for (p, t) in pred.iter().zip(target) {
        if p.dims() != t.dims() {
            return Err(Error::validation(format!(
                "frame shapes differ: {:?} vs {:?}",
                p.dims(),
                t.dims()
            )));
        }
    }
    // All frames share a shape, so the sum of per-frame means is T times the
    // mean over the concatenation.
    let steps = pred.len() as f64;
    let fp = features.features(&Tensor::cat(pred, 0)?)?;
    let ft = features.features(&Tensor::cat(target, 0)?)?;
    let mut total: Option<Tensor> = None;
    for (a, b) in fp.iter().zip(&ft) {
        let term = ((a - b)?.abs()?.mean_all()? * steps)?;
        total = Some(match total {
            None => term,
            Some(acc) => (acc + term)?,
        });
    }
    total.ok_or_else(|| Error::validation("feature provider returned no layers"))
}

const NORM_EPS: f64 = 1e-12;

/// `s / sqrt(s + eps)`: the Euclidean norm for `s = |d|^2`, exactly zero at
/// zero and with a finite gradient there.
fn smooth_norm(sq: &Tensor) -> Result<Tensor> {
    Ok((sq / (sq + NORM_EPS)?.sqrt()?)?)
}

/// `sum_i sum_n |target_i^n - pred_i^n|_2`, the norm taken per sample over
/// the flattened level and averaged over the batch.
pub fn trajectory_loss(pred: &[Hierarchy], target: &[Hierarchy]) -> Result<Tensor> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::validation(format!(
            "{} predicted states vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    for (p, t) in pred.iter().zip(target) {
        if p.depth() != t.depth() {
            return Err(Error::validation(format!(
                "hierarchy depth {} vs {}",
                p.depth(),
                t.depth()
            )));
        }
        for (a, b) in p.levels().iter().zip(t.levels()) {
            if a.dims() != b.dims() {
                return Err(Error::validation(format!(
                    "level shapes differ: {:?} vs {:?}",
                    a.dims(),
                    b.dims()
                )));
            }
            let bsz = a.dims()[0];
            let sq = (a - b)?.sqr()?.reshape((bsz, ()))?.sum(1)?;
            let term = smooth_norm(&sq)?.mean_all()?;
            total = Some(match total {
                None => term,
                Some(acc) => (acc + term)?,
            });
        }
    }
    Ok(total.expect("non-empty"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub traj: f64,
    pub spatial: f64,
    pub temporal: f64,
    pub feature_matching: f64,
    pub gradient_penalty: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            traj: 0.1,
            spatial: 0.2,
            temporal: 1.0,
            feature_matching: 2.0,
            gradient_penalty: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.traj,
            self.spatial,
            self.temporal,
            self.feature_matching,
            self.gradient_penalty,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }

    /// Whether any discriminator-driven term is active.
    pub fn adversarial(&self) -> bool {
        self.spatial > 0.0 || self.temporal > 0.0 || self.feature_matching > 0.0
    }
}

/// Generator-side loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub rec: f64,
    pub traj: f64,
    pub spatial: f64,
    pub temporal: f64,
    pub feature_matching: f64,
}

pub fn total_generator_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    parts.rec
        + w.traj * parts.traj
        + w.spatial * parts.spatial
        + w.temporal * parts.temporal
        + w.feature_matching * parts.feature_matching
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn px(v: f64) -> Tensor {
        Tensor::full(v, (1, 3, 1, 1), &Device::Cpu).unwrap()
    }

    fn val(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn perceptual_identity_arithmetic() {
        let pred = [px(0.5), px(0.25)];
        let target = [px(0.0), px(0.0)];
        let l = perceptual_loss(&pred, &target, &IdentityFeatures).unwrap();
        assert!((val(&l) - 0.75).abs() < 1e-12);
        assert_eq!(val(&perceptual_loss(&pred, &pred, &IdentityFeatures).unwrap()), 0.0);
    }

    #[test]
    fn perceptual_loss_is_additive_over_time() {
        let one = perceptual_loss(&[px(0.3)], &[px(0.1)], &IdentityFeatures).unwrap();
        let two = perceptual_loss(&[px(0.3), px(0.3)], &[px(0.1), px(0.1)], &IdentityFeatures).unwrap();
        assert!((2.0 * val(&one) - val(&two)).abs() < 1e-12);
        assert!(perceptual_loss(&[px(0.3)], &[], &IdentityFeatures).is_err());
    }

    #[test]
    fn trajectory_norm_example() {
        let a = Hierarchy::new(vec![Tensor::new(&[3.0f64, 4.0], &Device::Cpu).unwrap().reshape((1, 2, 1, 1)).unwrap()]).unwrap();
        let b = Hierarchy::new(vec![Tensor::zeros((1, 2, 1, 1), DType::F64, &Device::Cpu).unwrap()]).unwrap();
        let l = trajectory_loss(&[a.clone()], &[b]).unwrap();
        assert!((val(&l) - 5.0).abs() < 1e-9);
        assert_eq!(val(&trajectory_loss(&[a.clone()], &[a]).unwrap()), 0.0);
    }

    #[test]
    fn trajectory_depth_mismatch_is_rejected() {
        let one = Hierarchy::new(vec![px(0.0)]).unwrap();
        let two = Hierarchy::new(vec![px(0.0), px(0.0)]).unwrap();
        assert!(trajectory_loss(&[one], &[two]).is_err());
    }

    #[test]
    fn weighted_sum_example() {
        let parts = LossParts {
            rec: 1.0,
            traj: 2.0,
            spatial: 3.0,
            temporal: 4.0,
            feature_matching: 0.0,
        };
        assert!((total_generator_loss(&parts, &LossWeights::default()) - 5.8).abs() < 1e-12);
        let zero = LossWeights {
            traj: 0.0,
            spatial: 0.0,
            temporal: 0.0,
            feature_matching: 0.0,
            gradient_penalty: 0.0,
        };
        assert_eq!(total_generator_loss(&parts, &zero), 1.0);
    }

    #[test]
    fn random_conv_features_have_one_map_per_layer() {
        let f = ConvFeatures::random(&[4, 8], 0, DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::zeros((2, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let maps = f.features(&x).unwrap();
        assert_eq!(maps[0].dims(), &[2, 4, 16, 16]);
        assert_eq!(maps[1].dims(), &[2, 8, 8, 8]);
    }
}
