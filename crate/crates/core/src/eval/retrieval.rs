//! Nearest training frame in bottleneck feature space.

use serde::{Deserialize, Serialize};

use crate::data::DatasetIndex;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::Poke2Vid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub clip_id: String,
    pub frame_index: usize,
    pub distance: f64,
}

fn bottleneck_features(model: &Poke2Vid, frames: &[&Image]) -> Result<Vec<Vec<f64>>> {
    let x = Image::batch_to_tensor(frames, model.dtype(), model.device())?;
    let states = model.encode_states(&x)?;
    let level = states.level(1).to_dtype(candle_core::DType::F64)?;
    let n = level.dim(0)?;
    Ok(level.reshape((n, ()))?.to_vec2::<f64>()?)
}

/// Euclidean nearest neighbor of `query` among all dataset frames; ties go
/// to the smallest `(clip_id, frame_index)`.
pub fn nearest_neighbor_frame(query: &Image, dataset: &DatasetIndex, model: &Poke2Vid) -> Result<Neighbor> {
    if dataset.clips.iter().all(|c| c.is_empty()) {
        return Err(Error::Protocol("nearest-neighbor search over an empty dataset".into()));
    }
    let q = bottleneck_features(model, &[query])?.remove(0);
    let mut best: Option<Neighbor> = None;
    for clip in &dataset.clips {
        // One frame per pass, exactly as the query was encoded.
        for (i, frame) in clip.frames().iter().enumerate() {
            let f = bottleneck_features(model, &[frame])?.remove(0);
            let d = q.iter().zip(&f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let better = match &best {
                None => true,
                Some(b) => {
                    d < b.distance
                        || (d == b.distance && (clip.clip_id.as_str(), i) < (b.clip_id.as_str(), b.frame_index))
                }
            };
            if better {
                best = Some(Neighbor {
                    clip_id: clip.clip_id.clone(),
                    frame_index: i,
                    distance: d,
                });
            }
        }
    }
    Ok(best.expect("non-empty dataset"))
}
