//! Pokes, foreground separation and simulated training pokes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::clip::VideoClip;
use super::flow::{estimate_flow, vector_magnitude, FlowMap, FlowProvider, FlowQuery};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PokeMode {
    /// Constant interaction towards a target location.
    #[default]
    Shift,
    /// One-shot initial force with normalized magnitude.
    Impulse,
}

impl std::str::FromStr for PokeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shift" => Ok(PokeMode::Shift),
            "impulse" => Ok(PokeMode::Impulse),
            other => Err(Error::validation(format!("unknown poke mode `{other}`"))),
        }
    }
}

/// A displacement `(dy, dx)` applied at pixel `(row, col)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PokeSpec {
    pub location: (usize, usize),
    pub displacement: [f32; 2],
    pub mode: PokeMode,
}

impl PokeSpec {
    pub fn shift(location: (usize, usize), displacement: [f32; 2]) -> Self {
        Self {
            location,
            displacement,
            mode: PokeMode::Shift,
        }
    }

    pub fn impulse(location: (usize, usize), displacement: [f32; 2]) -> Self {
        Self {
            location,
            displacement,
            mode: PokeMode::Impulse,
        }
    }

    pub fn magnitude(&self) -> f64 {
        vector_magnitude(self.displacement)
    }

    /// `atan2(dy, dx)` in `(-pi, pi]`.
    pub fn angle(&self) -> f64 {
        (self.displacement[0] as f64).atan2(self.displacement[1] as f64)
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let (r, c) = self.location;
        if r >= height || c >= width {
            return Err(Error::validation(format!(
                "poke location ({r}, {c}) outside {height}x{width} frame"
            )));
        }
        if !self.displacement.iter().all(|v| v.is_finite()) {
            return Err(Error::validation("poke displacement must be finite"));
        }
        if self.mode == PokeMode::Impulse && self.magnitude() > 1.0 + 1e-6 {
            return Err(Error::validation(format!(
                "impulse magnitude {} exceeds 1",
                self.magnitude()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::validation("mask size mismatch"));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn positions(&self, value: bool) -> Vec<(usize, usize)> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == value)
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }
}

/// Pixels whose flow magnitude strictly exceeds the spatial mean magnitude.
pub fn foreground_mask(flow: &FlowMap) -> Mask {
    let mags = flow.magnitudes();
    // Offsetting by the minimum keeps a uniform field's mean exactly equal
    // to its value, so no pixel exceeds it through rounding.
    let min = mags.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = min + mags.iter().map(|m| m - min).sum::<f64>() / mags.len() as f64;
    let bits = mags.iter().map(|&m| m > mean).collect();
    Mask {
        height: flow.height(),
        width: flow.width(),
        bits,
    }
}

/// Draws one simulated poke.
///
/// With probability `1 - bg_fraction` the location is uniform over the
/// foreground and the displacement is the stored flow vector. Otherwise the
/// location is uniform over the background, and magnitude and angle are
/// drawn independently from the foreground's empirical distributions.
pub fn sample_training_poke<R: Rng + ?Sized>(
    flow: &FlowMap,
    mask: &Mask,
    bg_fraction: f64,
    rng: &mut R,
) -> Result<(PokeSpec, bool)> {
    if !(0.0..1.0).contains(&bg_fraction) {
        return Err(Error::validation(format!(
            "bg_fraction {bg_fraction} outside [0, 1)"
        )));
    }
    if mask.shape() != flow.shape() {
        return Err(Error::validation("mask and flow shapes differ"));
    }
    let foreground = mask.positions(true);
    if foreground.is_empty() {
        return Err(Error::Sampling("flow map has no foreground pixels".into()));
    }
    let background = rng.random::<f64>() < bg_fraction;
    let background_pixels = mask.positions(false);
    if !background || background_pixels.is_empty() {
        let l = foreground[rng.random_range(0..foreground.len())];
        return Ok((PokeSpec::shift(l, flow.at(l.0, l.1)), false));
    }
    let l = background_pixels[rng.random_range(0..background_pixels.len())];
    let (mr, mc) = foreground[rng.random_range(0..foreground.len())];
    let (ar, ac) = foreground[rng.random_range(0..foreground.len())];
    let magnitude = flow.magnitude(mr, mc);
    let dir = flow.at(ar, ac);
    let angle = (dir[0] as f64).atan2(dir[1] as f64);
    let p = [(magnitude * angle.sin()) as f32, (magnitude * angle.cos()) as f32];
    Ok((PokeSpec::shift(l, p), true))
}

/// Average over consecutive frame pairs of the spatial mean flow magnitude.
pub fn mean_motion(clip: &VideoClip, provider: &dyn FlowProvider) -> Result<f64> {
    let steps = clip.len() - 1;
    let mut total = 0.0;
    for i in 1..clip.len() {
        let q = FlowQuery {
            source: clip.frame(i),
            target: clip.frame(i - 1),
            clip_id: Some(&clip.clip_id),
            source_index: clip.source_index(i),
            target_index: clip.source_index(i - 1),
        };
        total += estimate_flow(&q, provider)?.mean_magnitude();
    }
    Ok(total / steps as f64)
}

/// Converts a shift poke into an impulse poke with the same direction and
/// magnitude `|p| / max|flow|`, clamped to `[0, 1]`.
pub fn normalize_impulse_poke(poke: &PokeSpec, flow: &FlowMap) -> PokeSpec {
    let max = flow.max_magnitude();
    let norm = poke.magnitude();
    let displacement = if max > 0.0 && norm > 0.0 {
        let magnitude = (norm / max).min(1.0);
        let s = magnitude / norm;
        [
            (poke.displacement[0] as f64 * s) as f32,
            (poke.displacement[1] as f64 * s) as f32,
        ]
    } else {
        [0.0, 0.0]
    };
    PokeSpec::impulse(poke.location, displacement)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn half_moving_field_selects_exactly_the_moving_half() {
        let flow = FlowMap::from_fn(4, 4, |r, _| if r < 2 { [2.0, 0.0] } else { [0.0, 0.0] });
        let mask = foreground_mask(&flow);
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(mask.get(r, c), r < 2);
            }
        }
    }

    #[test]
    fn uniform_magnitude_gives_empty_mask() {
        let exact = FlowMap::from_fn(8, 8, |_, _| [0.3, 0.4]);
        assert_eq!(foreground_mask(&exact).count(), 0);
        assert_eq!(foreground_mask(&FlowMap::zeros(8, 8)).count(), 0);
    }

    #[test]
    fn single_moving_pixel_is_the_only_foreground() {
        let mut flow = FlowMap::zeros(8, 8);
        flow.set(5, 2, [6.0, 8.0]);
        let mask = foreground_mask(&flow);
        assert_eq!(mask.count(), 1);
        assert!(mask.get(5, 2));
    }

    #[test]
    fn single_candidate_poke_is_the_stored_vector() {
        let mut flow = FlowMap::zeros(8, 8);
        flow.set(3, 4, [1.0, -1.0]);
        let mask = foreground_mask(&flow);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let (p, bg) = sample_training_poke(&flow, &mask, 0.0, &mut rng).unwrap();
            assert!(!bg);
            assert_eq!(p.location, (3, 4));
            assert_eq!(p.displacement, [1.0, -1.0]);
        }
    }

    #[test]
    fn empty_foreground_is_a_sampling_error() {
        let flow = FlowMap::zeros(8, 8);
        let mask = foreground_mask(&flow);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_training_poke(&flow, &mask, 0.1, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Sampling(_)));
    }

    #[test]
    fn background_pokes_reuse_foreground_magnitudes() {
        let flow = FlowMap::from_fn(16, 16, |r, c| {
            if r < 6 && c < 6 {
                [1.0 + r as f32 * 0.5, c as f32 - 2.0]
            } else {
                [0.0, 0.0]
            }
        });
        let mask = foreground_mask(&flow);
        let fg: Vec<f64> = (0..16 * 16)
            .filter(|i| mask.bits()[*i])
            .map(|i| flow.magnitude(i / 16, i % 16))
            .collect();
        let (lo, hi) = fg.iter().fold((f64::MAX, f64::MIN), |a, &m| (a.0.min(m), a.1.max(m)));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen_bg = 0;
        for _ in 0..2000 {
            let (p, bg) = sample_training_poke(&flow, &mask, 0.5, &mut rng).unwrap();
            if bg {
                seen_bg += 1;
                assert!(!mask.get(p.location.0, p.location.1));
                let m = p.magnitude();
                assert!(m >= lo - 1e-5 && m <= hi + 1e-5, "{m} not in [{lo}, {hi}]");
            } else {
                assert_eq!(p.displacement, flow.at(p.location.0, p.location.1));
            }
        }
        assert!(seen_bg > 800 && seen_bg < 1200);
    }

    #[test]
    fn impulse_normalization_examples() {
        let mut flow = FlowMap::zeros(4, 4);
        flow.set(1, 1, [3.0, 4.0]);
        let p = normalize_impulse_poke(&PokeSpec::shift((1, 1), [3.0, 4.0]), &flow);
        assert_eq!(p.mode, PokeMode::Impulse);
        assert!((p.magnitude() - 1.0).abs() < 1e-6);
        assert!((p.displacement[0] - 0.6).abs() < 1e-6 && (p.displacement[1] - 0.8).abs() < 1e-6);

        let zero = normalize_impulse_poke(&PokeSpec::shift((0, 0), [1.0, 0.0]), &FlowMap::zeros(4, 4));
        assert_eq!(zero.magnitude(), 0.0);

        let mut big = FlowMap::zeros(4, 4);
        big.set(0, 0, [0.0, 8.0]);
        let q = normalize_impulse_poke(&PokeSpec::shift((2, 2), [2.0, 0.0]), &big);
        assert!((q.magnitude() - 0.25).abs() < 1e-6);
    }

    #[test]
    fn impulse_validation_bounds_magnitude() {
        assert!(PokeSpec::impulse((0, 0), [0.6, 0.8]).validate(16, 16).is_ok());
        assert!(PokeSpec::impulse((0, 0), [1.0, 1.0]).validate(16, 16).is_err());
        assert!(PokeSpec::shift((16, 0), [0.0, 0.0]).validate(16, 16).is_err());
    }
}
