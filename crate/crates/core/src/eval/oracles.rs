//! Analytic stand-ins for a trained model, used to check the analysis
//! pipeline against known answers.

use std::collections::HashMap;
use std::sync::Arc;

use crate::data::{DatasetIndex, FlowMap, PokeSpec, SyntheticFlowProvider};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::VideoSynthesizer;

/// Translates the whole frame by the poke, reaching the full displacement on
/// the last frame. The exact flow of every last frame is registered with
/// the provider.
pub struct RigidTranslationOracle {
    pub flow: Arc<SyntheticFlowProvider>,
}

impl VideoSynthesizer for RigidTranslationOracle {
    fn model_id(&self) -> String {
        "oracle-rigid".into()
    }

    fn image_size(&self) -> Option<usize> {
        None
    }

    fn synthesize(&self, x0: &Image, poke: &PokeSpec, len: usize) -> Result<Vec<Image>> {
        let (h, w) = x0.shape();
        poke.validate(h, w)?;
        let [dy, dx] = poke.displacement;
        let frames: Vec<Image> = (1..=len)
            .map(|t| {
                let s = t as f32 / len as f32;
                Image::from_fn(h, w, |r, c| x0.sample_bilinear(r as f32 - dy * s, c as f32 - dx * s))
            })
            .collect();
        if let Some(last) = frames.last() {
            self.flow.register_pair(x0, last, FlowMap::from_fn(h, w, |_, _| poke.displacement));
        }
        Ok(frames)
    }
}

/// Moves only the square `[top, top+side) x [left, left+side)` with the
/// poke; every other pixel stays put.
pub struct PatchOracle {
    pub flow: Arc<SyntheticFlowProvider>,
    pub top: usize,
    pub left: usize,
    pub side: usize,
}

impl PatchOracle {
    pub fn on_patch(&self, r: usize, c: usize) -> bool {
        (self.top..self.top + self.side).contains(&r) && (self.left..self.left + self.side).contains(&c)
    }
}

impl VideoSynthesizer for PatchOracle {
    fn model_id(&self) -> String {
        "oracle-patch".into()
    }

    fn image_size(&self) -> Option<usize> {
        None
    }

    fn synthesize(&self, x0: &Image, poke: &PokeSpec, len: usize) -> Result<Vec<Image>> {
        let (h, w) = x0.shape();
        poke.validate(h, w)?;
        let [dy, dx] = poke.displacement;
        let (top, left, side) = (self.top as f32, self.left as f32, self.side as f32);
        let frames: Vec<Image> = (1..=len)
            .map(|t| {
                let s = t as f32 / len as f32;
                Image::from_fn(h, w, |r, c| {
                    let (y, x) = (r as f32 - dy * s, c as f32 - dx * s);
                    let inside = y >= top && y <= top + side - 1.0 && x >= left && x <= left + side - 1.0;
                    if inside {
                        x0.sample_bilinear(y, x)
                    } else {
                        x0.pixel(r, c)
                    }
                })
            })
            .collect();
        if let Some(last) = frames.last() {
            let flow = FlowMap::from_fn(h, w, |r, c| {
                if self.on_patch(r, c) {
                    poke.displacement
                } else {
                    [0.0, 0.0]
                }
            });
            self.flow.register_pair(x0, last, flow);
        }
        Ok(frames)
    }
}

/// Returns the recorded successors of any dataset frame: a perfect
/// predictor for evaluation-protocol checks.
pub struct ReplayOracle {
    index: HashMap<u64, (usize, usize)>,
    clips: Vec<Vec<Image>>,
    fps: f32,
}

impl ReplayOracle {
    pub fn new(dataset: &DatasetIndex) -> Self {
        let mut index = HashMap::new();
        let mut clips = Vec::new();
        for (ci, clip) in dataset.clips.iter().enumerate() {
            for (fi, f) in clip.frames().iter().enumerate() {
                index.entry(f.content_hash()).or_insert((ci, fi));
            }
            clips.push(clip.frames().to_vec());
        }
        let fps = dataset.clips.first().map(|c| c.fps).unwrap_or(10.0);
        Self { index, clips, fps }
    }
}

impl VideoSynthesizer for ReplayOracle {
    fn model_id(&self) -> String {
        "oracle-replay".into()
    }

    fn image_size(&self) -> Option<usize> {
        None
    }

    fn fps(&self) -> f32 {
        self.fps
    }

    fn synthesize(&self, x0: &Image, _poke: &PokeSpec, len: usize) -> Result<Vec<Image>> {
        let &(ci, fi) = self
            .index
            .get(&x0.content_hash())
            .ok_or_else(|| Error::validation("frame is not part of the replayed dataset"))?;
        let frames = &self.clips[ci];
        if fi + len >= frames.len() {
            return Err(Error::validation(format!(
                "only {} recorded frames follow, {len} requested",
                frames.len() - fi - 1
            )));
        }
        Ok(frames[fi + 1..=fi + len].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{estimate_flow, FlowQuery};

    fn texture(n: usize) -> Image {
        Image::from_fn(n, n, |r, c| {
            let (y, x) = (r as f32, c as f32);
            [0.5 + 0.4 * (0.9 * x).sin(), 0.5 + 0.4 * (0.7 * y).cos(), 0.5 + 0.3 * (0.5 * (x + y)).sin()]
        })
    }

    #[test]
    fn rigid_oracle_registers_constant_flow() {
        let provider = Arc::new(SyntheticFlowProvider::new());
        let o = RigidTranslationOracle { flow: provider.clone() };
        let x0 = texture(12);
        let p = PokeSpec::shift((3, 3), [1.5, -2.0]);
        let frames = o.synthesize(&x0, &p, 4).unwrap();
        assert_eq!(frames.len(), 4);
        let f = estimate_flow(&FlowQuery::images(&x0, frames.last().unwrap()), provider.as_ref()).unwrap();
        assert!(f.vectors().iter().all(|v| *v == [1.5, -2.0]));
        // Interior pixels moved by the poke.
        assert_eq!(frames[3].pixel(6, 6), x0.sample_bilinear(4.5, 8.0));
    }

    #[test]
    fn patch_oracle_leaves_background_untouched() {
        let provider = Arc::new(SyntheticFlowProvider::new());
        let o = PatchOracle {
            flow: provider.clone(),
            top: 2,
            left: 2,
            side: 4,
        };
        let x0 = texture(12);
        let frames = o.synthesize(&x0, &PokeSpec::shift((3, 3), [0.0, 3.0]), 3).unwrap();
        let last = frames.last().unwrap();
        assert_eq!(last.pixel(10, 10), x0.pixel(10, 10));
        assert_eq!(last.pixel(3, 6), x0.pixel(3, 3));
    }
}
