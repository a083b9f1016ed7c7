//! Motion-matched impulse magnitudes: clips with more motion receive larger
//! impulses.

use rand::Rng;

use super::clip::DatasetIndex;
use super::flow::FlowProvider;
use super::poke::mean_motion;
use crate::error::Result;

/// Pairs each clip's motion rank with a band of impulse magnitudes.
///
/// With `K` clips, the clip of rank `r` draws magnitudes uniformly from
/// `[r/K, (r+1)/K]`. Clips with equal motion share the union of their rank
/// bands, so equal motion yields identical magnitude distributions.
#[derive(Clone, Debug)]
pub struct MotionMatchedSampler {
    motions: Vec<f64>,
    bands: Vec<(f64, f64)>,
}

impl MotionMatchedSampler {
    pub fn from_motions(motions: Vec<f64>) -> Self {
        let k = motions.len();
        if k < 2 {
            log::warn!("motion-matched sampler built from {k} clip(s); falling back to uniform magnitudes");
            return Self {
                bands: vec![(0.0, 1.0); k],
                motions,
            };
        }
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| motions[a].total_cmp(&motions[b]));
        let mut bands = vec![(0.0, 1.0); k];
        let mut i = 0;
        while i < k {
            let mut j = i;
            while j + 1 < k && motions[order[j + 1]] == motions[order[i]] {
                j += 1;
            }
            let band = (i as f64 / k as f64, (j + 1) as f64 / k as f64);
            for &idx in &order[i..=j] {
                bands[idx] = band;
            }
            i = j + 1;
        }
        Self { motions, bands }
    }

    pub fn from_dataset(dataset: &DatasetIndex, provider: &dyn FlowProvider) -> Result<Self> {
        let motions = dataset
            .clips
            .iter()
            .map(|c| mean_motion(c, provider))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_motions(motions))
    }

    pub fn motions(&self) -> &[f64] {
        &self.motions
    }

    pub fn band(&self, clip: usize) -> (f64, f64) {
        self.bands[clip]
    }

    pub fn is_degenerate(&self) -> bool {
        self.motions.len() < 2
    }

    /// Impulse magnitude in `[0, 1]` for the given clip.
    pub fn draw<R: Rng + ?Sized>(&self, clip: usize, rng: &mut R) -> f64 {
        let (lo, hi) = self.bands[clip];
        lo + (hi - lo) * rng.random::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn higher_motion_clip_gets_dominating_magnitudes() {
        let s = MotionMatchedSampler::from_motions(vec![0.1, 5.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut low: Vec<f64> = (0..10_000).map(|_| s.draw(0, &mut rng)).collect();
        let mut high: Vec<f64> = (0..10_000).map(|_| s.draw(1, &mut rng)).collect();
        low.sort_by(f64::total_cmp);
        high.sort_by(f64::total_cmp);
        assert!(low.iter().zip(&high).all(|(l, h)| l <= h));
    }

    #[test]
    fn equal_motion_gives_identical_bands() {
        let s = MotionMatchedSampler::from_motions(vec![2.0, 2.0, 2.0]);
        assert_eq!(s.band(0), (0.0, 1.0));
        assert_eq!(s.band(0), s.band(2));
    }

    #[test]
    fn single_clip_is_uniform_on_unit_interval() {
        let s = MotionMatchedSampler::from_motions(vec![3.0]);
        assert!(s.is_degenerate());
        assert_eq!(s.band(0), (0.0, 1.0));
    }

    #[test]
    fn ties_share_rank_bands() {
        let s = MotionMatchedSampler::from_motions(vec![1.0, 0.5, 1.0, 3.0]);
        assert_eq!(s.band(1), (0.0, 0.25));
        assert_eq!(s.band(0), (0.25, 0.75));
        assert_eq!(s.band(2), (0.25, 0.75));
        assert_eq!(s.band(3), (0.75, 1.0));
    }
}
