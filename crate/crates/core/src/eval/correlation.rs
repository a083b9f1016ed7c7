//! Motion-correlation maps: how tightly each pixel's motion follows pokes
//! applied at one fixed location.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{estimate_flow, write_raster, FlowProvider, FlowQuery, PokeSpec};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::VideoSynthesizer;

pub const CORRELATION_MAGIC: &[u8; 8] = b"POKECOR1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrelationConfig {
    pub n_interactions: usize,
    pub num_frames: usize,
    pub min_magnitude: f64,
    /// Defaults to a quarter of the image side.
    pub max_magnitude: Option<f64>,
}

impl Default for CorrelationConfig {
    fn default() -> Self {
        Self {
            n_interactions: 100,
            num_frames: 10,
            min_magnitude: 1.0,
            max_magnitude: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMap {
    pub height: usize,
    pub width: usize,
    pub location: (usize, usize),
    pub samples: usize,
    pub variance: Vec<f64>,
    /// `1 - var / max(var)`; exactly 1 only where the variance is 0.
    pub normalized: Vec<f64>,
}

impl CorrelationMap {
    pub fn from_variance(height: usize, width: usize, location: (usize, usize), samples: usize, variance: Vec<f64>) -> Self {
        let max = variance.iter().copied().fold(0.0, f64::max);
        // Largest double below 1, so tiny positive variances stay distinct
        // from perfect coupling.
        let below_one = 1.0 - f64::EPSILON / 2.0;
        let normalized = variance
            .iter()
            .map(|&v| {
                if v == 0.0 || max == 0.0 {
                    1.0
                } else {
                    (1.0 - v / max).clamp(0.0, below_one)
                }
            })
            .collect();
        Self {
            height,
            width,
            location,
            samples,
            variance,
            normalized,
        }
    }

    pub fn normalized_at(&self, r: usize, c: usize) -> f64 {
        self.normalized[r * self.width + c]
    }

    pub fn variance_at(&self, r: usize, c: usize) -> f64 {
        self.variance[r * self.width + c]
    }

    /// Two-channel raster: variance, normalized correlation.
    pub fn write_raster(&self, path: &Path) -> Result<()> {
        let data: Vec<f32> = self
            .variance
            .iter()
            .zip(&self.normalized)
            .flat_map(|(&v, &n)| [v as f32, n as f32])
            .collect();
        write_raster(path, CORRELATION_MAGIC, self.height, self.width, &data)
    }

    /// Viridis rendering of the normalized correlation.
    pub fn heatmap(&self) -> Image {
        Image::from_fn(self.height, self.width, |r, c| {
            let col = colorous::VIRIDIS.eval_continuous(self.normalized_at(r, c).clamp(0.0, 1.0));
            [col.r, col.g, col.b].map(|v| v as f32 / 255.0)
        })
    }

    /// Heatmap alpha-blended over the source frame.
    pub fn overlay(&self, frame: &Image, alpha: f32) -> Result<Image> {
        if frame.shape() != (self.height, self.width) {
            return Err(Error::validation("overlay frame does not match the map"));
        }
        let heat = self.heatmap();
        Ok(Image::from_fn(self.height, self.width, |r, c| {
            let (a, b) = (frame.pixel(r, c), heat.pixel(r, c));
            [0, 1, 2].map(|k| a[k] * (1.0 - alpha) + b[k] * alpha)
        }))
    }
}

fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

pub fn sample_pokes<R: Rng + ?Sized>(location: (usize, usize), size: usize, config: &CorrelationConfig, rng: &mut R) -> Vec<PokeSpec> {
    let hi = config.max_magnitude.unwrap_or(0.25 * size as f64).max(config.min_magnitude);
    (0..config.n_interactions)
        .map(|_| {
            let m = if hi > config.min_magnitude {
                rng.random_range(config.min_magnitude..hi)
            } else {
                hi
            };
            let a = rng.random_range(0.0..TAU);
            PokeSpec::shift(location, [(m * a.sin()) as f32, (m * a.cos()) as f32])
        })
        .collect()
}

/// Distance between each pixel's `(magnitude, angle)` and the poke's, with
/// both channels divided by the spread of the pokes.
fn differences(flows: &[crate::data::FlowMap], pokes: &[PokeSpec]) -> Vec<Vec<f64>> {
    let mags: Vec<f64> = pokes.iter().map(|p| p.magnitude()).collect();
    let angs: Vec<f64> = pokes.iter().map(|p| p.angle()).collect();
    let scale = |s: f64| if s > 0.0 { s } else { 1.0 };
    let (sm, sa) = (scale(population_std(&mags)), scale(population_std(&angs)));
    flows
        .iter()
        .zip(mags.iter().zip(&angs))
        .map(|(flow, (&m, &a))| {
            flow.vectors()
                .iter()
                .map(|&v| {
                    let pm = PokeSpec::shift((0, 0), v);
                    let dm = (pm.magnitude() - m) / sm;
                    let da = wrap_angle(pm.angle() - a) / sa;
                    (dm * dm + da * da).sqrt()
                })
                .collect()
        })
        .collect()
}

pub fn correlation_map<R: Rng + ?Sized>(
    model: &dyn VideoSynthesizer,
    x0: &Image,
    location: (usize, usize),
    config: &CorrelationConfig,
    flow: &dyn FlowProvider,
    rng: &mut R,
) -> Result<CorrelationMap> {
    let (h, w) = x0.shape();
    if location.0 >= h || location.1 >= w {
        return Err(Error::validation(format!(
            "location {location:?} outside {h}x{w} frame"
        )));
    }
    if config.n_interactions < 2 || config.num_frames == 0 {
        return Err(Error::validation("correlation maps need >= 2 interactions and >= 1 frame"));
    }
    let pokes = sample_pokes(location, h.min(w), config, rng);
    let mut flows = Vec::with_capacity(pokes.len());
    let mut failed = Vec::new();
    let mut reason = String::new();
    for (k, poke) in pokes.iter().enumerate() {
        let result = model.synthesize(x0, poke, config.num_frames).and_then(|frames| {
            let last = frames
                .last()
                .ok_or_else(|| Error::validation("synthesizer returned no frames"))?;
            let q = FlowQuery {
                source: x0,
                target: last,
                clip_id: None,
                source_index: 0,
                target_index: frames.len(),
            };
            estimate_flow(&q, flow)
        });
        match result {
            Ok(f) => flows.push(f),
            Err(e) => {
                if reason.is_empty() {
                    reason = e.to_string();
                }
                failed.push(k);
            }
        }
    }
    if !failed.is_empty() {
        return Err(Error::Partial { failed, reason });
    }
    let diffs = differences(&flows, &pokes);
    let n = diffs.len() as f64;
    let variance = (0..h * w)
        .map(|p| {
            let mean = diffs.iter().map(|d| d[p]).sum::<f64>() / n;
            diffs.iter().map(|d| (d[p] - mean).powi(2)).sum::<f64>() / n
        })
        .collect();
    Ok(CorrelationMap::from_variance(h, w, location, pokes.len(), variance))
}
