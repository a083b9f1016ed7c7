use std::sync::Arc;

use poke2vid::data::SyntheticFlowProvider;
use poke2vid::eval::correlation::{correlation_map, CorrelationConfig};
use poke2vid::eval::fvd::{frechet_video_distance, ToyEmbedder, VideoEmbedder};
use poke2vid::eval::metrics::{perceptual_distance, psnr, ssim};
use poke2vid::eval::oracles::{PatchOracle, RigidTranslationOracle};
use poke2vid::train::losses::{ConvFeatures, IdentityFeatures};
use poke2vid::{Image, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn textured(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(size, size, |_, _| [rng.random(), rng.random(), rng.random()])
}

#[test]
fn metrics_are_ideal_on_identical_inputs() {
    let x = textured(32, 1);
    assert_eq!(psnr(&x, &x).unwrap(), 100.0);
    assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-6);
    assert_eq!(perceptual_distance(&x, &x, &IdentityFeatures).unwrap(), 0.0);
    let conv = ConvFeatures::random(&[3, 8, 8], 0, candle_core::DType::F32, &candle_core::Device::Cpu).unwrap();
    assert_eq!(perceptual_distance(&x, &x, &conv).unwrap(), 0.0);

    let set: Vec<Vec<Image>> = (0..6).map(|i| (0..4).map(|t| textured(8, i * 10 + t)).collect()).collect();
    assert!(frechet_video_distance(&set, &set, &ToyEmbedder::default()).unwrap() < 1e-6);
}

struct FirstPixel;

impl VideoEmbedder for FirstPixel {
    fn name(&self) -> &str {
        "first-pixel"
    }

    fn embed(&self, video: &[Image]) -> Result<Vec<f64>> {
        Ok(vec![video[0].pixel(0, 0)[0] as f64])
    }
}

#[test]
fn scalar_frechet_distance_has_the_closed_form_value() {
    // N(0, 1) against N(3, 1): 3^2 + 1 + 1 - 2 = 9.
    let clip = |v: f32| vec![Image::filled(1, 1, [v, 0.0, 0.0])];
    let a: Vec<_> = [-1.0, 0.0, 1.0].into_iter().map(clip).collect();
    let b: Vec<_> = [2.0, 3.0, 4.0].into_iter().map(clip).collect();
    let d = frechet_video_distance(&a, &b, &FirstPixel).unwrap();
    assert!((d - 9.0).abs() < 1e-6, "{d}");
}

#[test]
fn rigid_translation_oracle_correlates_everywhere() {
    let flow = Arc::new(SyntheticFlowProvider::new());
    let oracle = RigidTranslationOracle { flow: flow.clone() };
    let x0 = textured(16, 3);
    let cfg = CorrelationConfig::default();
    assert_eq!(cfg.n_interactions, 100);
    let map = correlation_map(&oracle, &x0, (8, 8), &cfg, flow.as_ref(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(map.samples, 100);
    assert!(map.normalized.iter().all(|&v| v == 1.0));
}

#[test]
fn patch_oracle_correlates_exactly_on_the_patch() {
    let flow = Arc::new(SyntheticFlowProvider::new());
    let oracle = PatchOracle {
        flow: flow.clone(),
        top: 4,
        left: 6,
        side: 5,
    };
    let x0 = textured(16, 4);
    let cfg = CorrelationConfig::default();
    let map = correlation_map(&oracle, &x0, (6, 8), &cfg, flow.as_ref(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    for r in 0..16 {
        for c in 0..16 {
            let v = map.normalized_at(r, c);
            if oracle.on_patch(r, c) {
                assert_eq!(v, 1.0, "({r}, {c})");
            } else {
                assert!(v < 1.0, "({r}, {c}) = {v}");
            }
        }
    }
}
