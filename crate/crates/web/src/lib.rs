//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Three operations, all computed in the browser:
//! - [`integrate`] steps the two-level linear hierarchy next to a plain
//!   semi-implicit Euler integrator and a stale-wired variant.
//! - [`Scene`] renders a synthetic clip, its foreground mask and the poke a
//!   training example would use at a clicked pixel.
//! - [`correlation_heatmap`] pokes a patch oracle repeatedly and colors each
//!   pixel by how strongly it follows the poke.

use std::sync::Arc;

use candle_core::{Device, Tensor};
use poke2vid::data::{estimate_flow, foreground_mask, FlowMap, FlowQuery, Mask, PokeMode, SyntheticFlowProvider};
use poke2vid::dynamics::{damped_linear_system, interaction_schedule, scalar_hierarchy, Cell, LinearResidualCell};
use poke2vid::eval::correlation::{correlation_map, CorrelationConfig};
use poke2vid::eval::oracles::PatchOracle;
use poke2vid::eval::synthetic::{make_synthetic_dataset, SyntheticDataset, SyntheticKind, SyntheticSpec};
use poke2vid::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// RGBA bytes for `ImageData`, nearest-neighbour upscaled by `zoom`.
pub fn rgba(img: &Image, zoom: usize) -> Vec<u8> {
    let (h, w) = img.shape();
    let zoom = zoom.max(1);
    let mut out = Vec::with_capacity(h * w * zoom * zoom * 4);
    for r in 0..h * zoom {
        for c in 0..w * zoom {
            let p = img.pixel(r / zoom, c / zoom);
            out.extend(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
            out.push(255);
        }
    }
    out
}

#[wasm_bindgen]
pub struct Trace {
    hierarchy: Vec<f64>,
    euler: Vec<f64>,
    stale: Vec<f64>,
    identical: bool,
    first_divergence: Option<usize>,
}

#[wasm_bindgen]
impl Trace {
    /// Positions `x_1..x_T` from the hierarchy rollout.
    #[wasm_bindgen(getter)]
    pub fn hierarchy(&self) -> Vec<f64> {
        self.hierarchy.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn euler(&self) -> Vec<f64> {
        self.euler.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn stale(&self) -> Vec<f64> {
        self.stale.clone()
    }

    /// Whether hierarchy and Euler agree bit for bit at every step.
    #[wasm_bindgen(getter)]
    pub fn identical(&self) -> bool {
        self.identical
    }

    /// First step (1-based) where the stale wiring leaves the Euler path.
    #[wasm_bindgen(getter, js_name = firstDivergence)]
    pub fn first_divergence(&self) -> Option<usize> {
        self.first_divergence
    }
}

/// Integrates `v' = -gamma v + phi`, `x' = v` from `(v0, x0)` three ways.
#[wasm_bindgen]
pub fn integrate(gamma: f64, phi: f64, h: f64, v0: f64, x0: f64, steps: usize) -> Result<Trace, JsError> {
    if !(h > 0.0) || steps == 0 || steps > 100_000 {
        return Err(JsError::new("need h > 0 and 1..=100000 steps"));
    }
    let dev = Device::Cpu;
    let value = |t: &Tensor| -> Result<f64, JsError> { Ok(t.flatten_all().map_err(js_err)?.to_vec1::<f64>().map_err(js_err)?[0]) };
    let s0 = scalar_hierarchy(&[v0, x0], &dev).map_err(js_err)?;
    let u = Tensor::full(phi, (1, 1, 1, 1), &dev).map_err(js_err)?;
    let sched = interaction_schedule(&u, PokeMode::Shift, steps).map_err(js_err)?;
    let hierarchy = damped_linear_system(gamma, h)
        .rollout(&s0, &sched)
        .map_err(js_err)?
        .iter()
        .map(|s| value(s.level(2)))
        .collect::<Result<Vec<_>, _>>()?;

    let (mut v, mut x) = (v0, x0);
    let euler: Vec<f64> = (0..steps)
        .map(|_| {
            v += (-gamma * v + phi) * h;
            x += v * h;
            x
        })
        .collect();

    let c1 = Cell::Linear(LinearResidualCell { a: -gamma, b: 1.0, h });
    let c2 = Cell::Linear(LinearResidualCell { a: 0.0, b: 1.0, h });
    let (mut sv, mut sx) = (s0.level(1).clone(), s0.level(2).clone());
    let mut stale = Vec::with_capacity(steps);
    for _ in 0..steps {
        let next = c1.step(&sv, &u).map_err(js_err)?;
        sx = c2.step(&sx, &sv).map_err(js_err)?;
        sv = next;
        stale.push(value(&sx)?);
    }

    let identical = hierarchy.iter().zip(&euler).all(|(a, b)| a.to_bits() == b.to_bits());
    let first_divergence = stale.iter().zip(&euler).position(|(a, b)| a.to_bits() != b.to_bits()).map(|i| i + 1);
    Ok(Trace {
        hierarchy,
        euler,
        stale,
        identical,
        first_divergence,
    })
}

/// A rendered synthetic clip with exact flow.
#[wasm_bindgen]
pub struct Scene {
    data: SyntheticDataset,
}

#[wasm_bindgen]
impl Scene {
    /// `kind` is `spring_dot`, `rigid_patch` or `two_link`.
    #[wasm_bindgen(constructor)]
    pub fn new(kind: &str, size: usize, frames: usize, seed: u64) -> Result<Scene, JsError> {
        let kind: SyntheticKind = kind.parse().map_err(js_err)?;
        let spec = SyntheticSpec {
            kind,
            image_size: size,
            train_clips: 1,
            test_clips: 0,
            frames,
            seed,
            ..Default::default()
        };
        let data = make_synthetic_dataset(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(js_err)?;
        Ok(Scene { data })
    }

    pub fn size(&self) -> usize {
        self.clip().shape().0
    }

    pub fn len(&self) -> usize {
        self.clip().len()
    }

    pub fn is_empty(&self) -> bool {
        self.clip().is_empty()
    }

    pub fn frame(&self, t: usize, zoom: usize) -> Result<Vec<u8>, JsError> {
        self.check(t)?;
        Ok(rgba(self.clip().frame(t), zoom))
    }

    /// Frame 0 with the foreground of the motion up to frame `t` tinted.
    pub fn mask(&self, t: usize, zoom: usize) -> Result<Vec<u8>, JsError> {
        let mask = foreground_mask(&self.flow(t)?);
        Ok(rgba(&tint(self.clip().frame(0), &mask), zoom))
    }

    /// `[dy, dx, foreground]` of the poke at `(row, col)` for a rollout of `t` frames.
    pub fn poke(&self, row: usize, col: usize, t: usize) -> Result<Vec<f32>, JsError> {
        let flow = self.flow(t)?;
        if row >= flow.height() || col >= flow.width() {
            return Err(JsError::new("pixel outside the frame"));
        }
        let fg = foreground_mask(&flow).get(row, col);
        let [dy, dx] = flow.at(row, col);
        Ok(vec![dy, dx, if fg { 1.0 } else { 0.0 }])
    }
}

impl Scene {
    fn clip(&self) -> &poke2vid::data::VideoClip {
        &self.data.index.clips[0]
    }

    fn check(&self, t: usize) -> Result<(), JsError> {
        if t >= self.clip().len() {
            return Err(JsError::new("frame index out of range"));
        }
        Ok(())
    }

    fn flow(&self, t: usize) -> Result<FlowMap, JsError> {
        self.check(t)?;
        let clip = self.clip();
        let q = FlowQuery {
            source: clip.frame(0),
            target: clip.frame(t),
            clip_id: Some(&clip.clip_id),
            source_index: clip.source_index(0),
            target_index: clip.source_index(t),
        };
        estimate_flow(&q, &self.data.flow).map_err(js_err)
    }
}

fn tint(img: &Image, mask: &Mask) -> Image {
    Image::from_fn(img.height(), img.width(), |r, c| {
        let p = img.pixel(r, c);
        if mask.get(r, c) {
            [0.5 + 0.5 * p[0], 0.5 * p[1], 0.5 * p[2]]
        } else {
            p
        }
    })
}

/// Viridis correlation map of a `side`-pixel patch oracle poked `n` times at
/// `(row, col)` on a random texture.
#[wasm_bindgen(js_name = correlationHeatmap)]
#[allow(clippy::too_many_arguments)]
pub fn correlation_heatmap(
    size: usize,
    top: usize,
    left: usize,
    side: usize,
    row: usize,
    col: usize,
    n: usize,
    seed: u64,
    zoom: usize,
) -> Result<Vec<u8>, JsError> {
    if size == 0 || size > 128 || top + side > size || left + side > size {
        return Err(JsError::new("patch must fit inside a frame of at most 128 pixels"));
    }
    let flow = Arc::new(SyntheticFlowProvider::new());
    let oracle = PatchOracle {
        flow: flow.clone(),
        top,
        left,
        side,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = Image::from_fn(size, size, |_, _| [rng.random(), rng.random(), rng.random()]);
    let cfg = CorrelationConfig {
        n_interactions: n,
        ..Default::default()
    };
    let map = correlation_map(&oracle, &x0, (row, col), &cfg, flow.as_ref(), &mut rng).map_err(js_err)?;
    Ok(rgba(&map.heatmap(), zoom))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hierarchy_matches_euler_and_stale_wiring_does_not() {
        let t = integrate(0.3, 0.8, 0.1, 0.0, 0.2, 50).map_err(|_| "integrate").unwrap();
        assert!(t.identical);
        assert_eq!(t.first_divergence, Some(1));
        assert_eq!(t.hierarchy.len(), 50);
    }

    #[test]
    fn rgba_upscales_with_opaque_alpha() {
        let img = Image::filled(2, 3, [1.0, 0.0, 0.5]);
        let px = rgba(&img, 2);
        assert_eq!(px.len(), 4 * 6 * 4);
        assert_eq!(&px[..4], &[255, 0, 128, 255]);
    }

    #[test]
    fn scene_pokes_follow_the_exact_flow() {
        let scene = Scene::new("rigid_patch", 16, 6, 2).map_err(|_| "scene").unwrap();
        assert_eq!(scene.len(), 6);
        assert_eq!(scene.frame(0, 1).map_err(|_| "frame").unwrap().len(), 16 * 16 * 4);
        let flow = scene.flow(5).map_err(|_| "flow").unwrap();
        let mask = foreground_mask(&flow);
        let (r, c) = (0..16 * 16).map(|i| (i / 16, i % 16)).find(|&(r, c)| mask.get(r, c)).unwrap();
        let p = scene.poke(r, c, 5).map_err(|_| "poke").unwrap();
        assert_eq!([p[0], p[1]], flow.at(r, c));
        assert_eq!(p[2], 1.0);
    }

    #[test]
    fn heatmap_covers_the_frame() {
        let px = correlation_heatmap(16, 4, 4, 6, 6, 6, 20, 1, 3).map_err(|_| "heatmap").unwrap();
        assert_eq!(px.len(), 48 * 48 * 4);
    }
}
