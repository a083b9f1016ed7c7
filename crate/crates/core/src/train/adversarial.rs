//! Spatial patch discriminator, spatio-temporal residual discriminator and
//! the hinge, feature-matching and gradient-penalty terms built on them.
//!
//! Clips are `(B, T, 3, H, W)` tensors.

use candle_core::{DType, Tensor};
use rand::seq::index::sample;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{instance_norm, instance_norm_video, leaky_relu, Conv2d, Conv3d, Linear, Scope};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub channels: usize,
    /// Frames scored by the spatial discriminator per step.
    pub spatial_frames: usize,
    /// Finite-difference step of the gradient-penalty estimator.
    pub gp_epsilon: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            spatial_frames: 16,
            gp_epsilon: 1e-2,
        }
    }
}

/// Fully convolutional frame critic producing a grid of patch scores.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    convs: Vec<Conv2d>,
    head: Conv2d,
}

impl PatchDiscriminator {
    pub fn new(s: &mut Scope, image_size: usize, channels: usize) -> Result<Self> {
        // Downsample until the patch grid is 4x4 (or one step for tiny inputs).
        let downs = ((image_size / 4).max(2)).trailing_zeros().min(3) as usize;
        let mut convs = Vec::new();
        let mut cin = 3;
        for k in 0..downs {
            let cout = channels << k;
            convs.push(Conv2d::new(&mut s.pp(&format!("conv{k}")), cin, cout, 3, 2, 1)?);
            cin = cout;
        }
        let head = Conv2d::new(&mut s.pp("head"), cin, 1, 3, 1, 1)?;
        Ok(Self { convs, head })
    }

    /// `(N, 3, H, W)` frames to `(N, 1, h, w)` scores.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (k, c) in self.convs.iter().enumerate() {
            h = c.forward(&h)?;
            if k > 0 {
                h = instance_norm(&h)?;
            }
            h = leaky_relu(&h)?;
        }
        self.head.forward(&h)
    }
}

/// Spatio-temporal critic: strided 3D convolutions with a residual block per
/// stage, pooled to one score per clip. Intermediate activations are exposed
/// for feature matching.
#[derive(Clone, Debug)]
pub struct VideoDiscriminator {
    stages: Vec<(Conv3d, Conv3d)>,
    head: Linear,
}

impl VideoDiscriminator {
    pub fn new(s: &mut Scope, image_size: usize, channels: usize) -> Result<Self> {
        let downs = ((image_size / 4).max(2)).trailing_zeros().min(3) as usize;
        let mut stages = Vec::new();
        let mut cin = 3;
        for k in 0..downs {
            let cout = channels << k;
            let mut st = s.pp(&format!("stage{k}"));
            let down = Conv3d::new(&mut st.pp("down"), cin, cout, 3, 2)?;
            let res = Conv3d::new(&mut st.pp("res"), cout, cout, 3, 1)?;
            stages.push((down, res));
            cin = cout;
        }
        let head = Linear::new(&mut s.pp("head"), cin, 1)?;
        Ok(Self { stages, head })
    }

    /// Returns the per-clip score `(B,)` and the stage activations.
    pub fn forward_with_features(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut h = x.clone();
        let mut feats = Vec::with_capacity(self.stages.len());
        for (down, res) in &self.stages {
            h = leaky_relu(&instance_norm_video(&down.forward(&h)?)?)?;
            let r = instance_norm_video(&res.forward(&h)?)?;
            h = leaky_relu(&(h + r)?)?;
            feats.push(h.clone());
        }
        // Global average over time and space.
        let pooled = h.mean(4)?.mean(3)?.mean(1)?;
        let score = self.head.forward(&pooled)?.squeeze(1)?;
        Ok((score, feats))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_features(x)?.0)
    }
}

/// `mean(max(0, 1 - D(real))) + mean(max(0, 1 + D(fake)))`.
pub fn hinge_discriminator_loss(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    let r = (1.0 - real)?.relu()?.mean_all()?;
    let f = (fake + 1.0)?.relu()?.mean_all()?;
    Ok((r + f)?)
}

/// `-mean(D(fake))`.
pub fn hinge_generator_loss(fake: &Tensor) -> Result<Tensor> {
    Ok(fake.mean_all()?.neg()?)
}

/// Mean L1 between corresponding feature maps, summed over layers.
pub fn feature_matching_loss(real: &[Tensor], fake: &[Tensor]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (r, f) in real.iter().zip(fake) {
        let t = (r.detach() - f)?.abs()?.mean_all()?;
        total = Some(match total {
            None => t,
            Some(acc) => (acc + t)?,
        });
    }
    total.ok_or_else(|| Error::validation("no features to match"))
}

fn gaussian_like<R: RngCore + ?Sized>(x: &Tensor, rng: &mut R) -> Result<Tensor> {
    let n = x.elem_count();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, x.dims(), x.device())?.to_dtype(x.dtype())?)
}

/// Estimate of `mean_b |grad_x D(x_b)|^2` at the real clips.
///
/// For `u ~ N(0, I)`, `E[(u . g)^2] = |g|^2`, and `u . g` is approximated by
/// a central difference of step `eps`. The result is differentiable in the
/// discriminator parameters using first-order gradients only.
pub fn gradient_penalty<R: RngCore + ?Sized>(
    d: &VideoDiscriminator,
    real: &Tensor,
    eps: f64,
    rng: &mut R,
) -> Result<Tensor> {
    let real = real.detach();
    let u = (gaussian_like(&real, rng)? * eps)?;
    let plus = d.forward(&(&real + &u)?)?;
    let minus = d.forward(&(&real - &u)?)?;
    let dir = ((plus - minus)? / (2.0 * eps))?;
    Ok(dir.sqr()?.mean_all()?)
}

/// Exact `mean_b |grad_x D(x_b)|^2` via backpropagation to the input. Not
/// differentiable in the parameters; used for diagnostics and tests.
pub fn gradient_penalty_exact(d: &VideoDiscriminator, real: &Tensor) -> Result<f64> {
    let x = candle_core::Var::from_tensor(&real.detach())?;
    let score = d.forward(x.as_tensor())?.sum_all()?;
    let grads = score.backward()?;
    let g = grads
        .get(x.as_tensor())
        .ok_or_else(|| Error::validation("discriminator output does not depend on its input"))?;
    let b = real.dims()[0] as f64;
    Ok(g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()? / b)
}

/// Picks frames for the spatial discriminator: without replacement when the
/// clips hold enough frames, with replacement otherwise.
pub fn sample_frame_indices<R: Rng + ?Sized>(available: usize, wanted: usize, rng: &mut R) -> Vec<usize> {
    if available >= wanted {
        sample(rng, available, wanted).into_vec()
    } else {
        (0..wanted).map(|_| rng.random_range(0..available)).collect()
    }
}

fn flatten_frames(clips: &Tensor) -> Result<Tensor> {
    let (b, t, c, h, w) = clips.dims5()?;
    Ok(clips.reshape((b * t, c, h, w))?)
}

fn gather_frames(clips: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let frames = flatten_frames(clips)?;
    let ids = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), clips.device())?;
    Ok(frames.index_select(&ids, 0)?)
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    let v = t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !v.is_finite() {
        return Err(Error::Diverged {
            step: 0,
            detail: format!("{what} is {v}"),
        });
    }
    Ok(())
}

/// Discriminator-side objective on detached fakes.
pub struct DiscriminatorLosses {
    pub spatial: Tensor,
    pub temporal: Tensor,
    pub gradient_penalty: Tensor,
}

/// Generator-side adversarial terms.
pub struct GeneratorAdversarial {
    pub spatial: Tensor,
    pub temporal: Tensor,
    pub feature_matching: Tensor,
}

pub struct Discriminators {
    pub spatial: PatchDiscriminator,
    pub temporal: VideoDiscriminator,
    pub config: DiscriminatorConfig,
}

impl Discriminators {
    pub fn discriminator_losses<R: Rng + ?Sized>(
        &self,
        real: &Tensor,
        fake: &Tensor,
        rng: &mut R,
    ) -> Result<DiscriminatorLosses> {
        check_pair(real, fake)?;
        let fake = fake.detach();
        let real = real.detach();
        let (b, t, ..) = real.dims5()?;
        let idx = sample_frame_indices(b * t, self.config.spatial_frames, rng);
        let ds_real = self.spatial.forward(&gather_frames(&real, &idx)?)?;
        let ds_fake = self.spatial.forward(&gather_frames(&fake, &idx)?)?;
        let spatial = hinge_discriminator_loss(&ds_real, &ds_fake)?;
        let dt_real = self.temporal.forward(&real)?;
        let dt_fake = self.temporal.forward(&fake)?;
        let temporal = hinge_discriminator_loss(&dt_real, &dt_fake)?;
        let gradient_penalty = gradient_penalty(&self.temporal, &real, self.config.gp_epsilon, rng)?;
        check_finite(&spatial, "spatial discriminator loss")?;
        check_finite(&temporal, "temporal discriminator loss")?;
        Ok(DiscriminatorLosses {
            spatial,
            temporal,
            gradient_penalty,
        })
    }

    pub fn generator_terms<R: Rng + ?Sized>(&self, real: &Tensor, fake: &Tensor, rng: &mut R) -> Result<GeneratorAdversarial> {
        check_pair(real, fake)?;
        let (b, t, ..) = fake.dims5()?;
        let idx = sample_frame_indices(b * t, self.config.spatial_frames, rng);
        let spatial = hinge_generator_loss(&self.spatial.forward(&gather_frames(fake, &idx)?)?)?;
        let (score_fake, feat_fake) = self.temporal.forward_with_features(fake)?;
        let (_, feat_real) = self.temporal.forward_with_features(&real.detach())?;
        let temporal = hinge_generator_loss(&score_fake)?;
        let feature_matching = feature_matching_loss(&feat_real, &feat_fake)?;
        check_finite(&temporal, "temporal generator term")?;
        Ok(GeneratorAdversarial {
            spatial,
            temporal,
            feature_matching,
        })
    }
}

fn check_pair(real: &Tensor, fake: &Tensor) -> Result<()> {
    if real.dims() != fake.dims() || real.rank() != 5 {
        return Err(Error::validation(format!(
            "real {:?} and fake {:?} clips must share a (B, T, C, H, W) shape",
            real.dims(),
            fake.dims()
        )));
    }
    Ok(())
}

/// All adversarial quantities for one pair of clip batches.
pub struct AdversarialLosses {
    pub d_s_loss: f64,
    pub d_t_loss: f64,
    pub g_adv_loss: f64,
    pub fm_loss: f64,
    pub gp_loss: f64,
}

pub fn adversarial_losses<R: Rng + ?Sized>(
    real: &Tensor,
    fake: &Tensor,
    discs: &Discriminators,
    rng: &mut R,
) -> Result<AdversarialLosses> {
    let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let d = discs.discriminator_losses(real, fake, rng)?;
    let g = discs.generator_terms(real, fake, rng)?;
    Ok(AdversarialLosses {
        d_s_loss: v(&d.spatial)?,
        d_t_loss: v(&d.temporal)?,
        g_adv_loss: v(&g.spatial)? + v(&g.temporal)?,
        fm_loss: v(&g.feature_matching)?,
        gp_loss: v(&d.gradient_penalty)?,
    })
}
