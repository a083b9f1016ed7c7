//! The evaluation protocol: simulated pokes on held-out clips, frame
//! metrics averaged over time then over sequences, and FVD.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    estimate_flow, foreground_mask, normalize_impulse_poke, sample_training_poke, DatasetIndex, FlowProvider,
    FlowQuery, PokeMode, PokeSpec, VideoClip,
};
use crate::error::{Error, Result};
use crate::eval::fvd::{frechet_video_distance, VideoEmbedder};
use crate::eval::metrics::{perceptual_distance, psnr, ssim, SSIM_WINDOW};
use crate::image::Image;
use crate::model::VideoSynthesizer;
use crate::train::losses::FeatureProvider;

const MAX_POKE_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub sequences: usize,
    pub fvd_samples: usize,
    pub sequence_length: usize,
    pub poke_mode: PokeMode,
    pub min_test_clips: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            sequences: 8000,
            fvd_samples: 1000,
            sequence_length: 10,
            poke_mode: PokeMode::Shift,
            min_test_clips: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub count: usize,
}

impl MetricSummary {
    fn of(values: &[f64]) -> Option<Self> {
        (!values.is_empty()).then(|| Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            count: values.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub clip_id: String,
    pub start: usize,
    pub poke: PokeSpec,
    pub psnr: f64,
    /// Absent when frames are smaller than the SSIM window.
    pub ssim: Option<f64>,
    pub perceptual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model_id: String,
    pub fingerprint: String,
    pub psnr: MetricSummary,
    pub ssim: Option<MetricSummary>,
    pub perceptual: MetricSummary,
    pub fvd: f64,
    pub fvd_samples: usize,
    pub records: Vec<SequenceRecord>,
}

fn fingerprint(config: &SuiteConfig, model_id: &str, features: &str, embedder: &str) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    for part in [model_id, features, embedder] {
        h.update([0u8]);
        h.update(part.as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn draw_poke<R: Rng + ?Sized>(
    clip: &VideoClip,
    start: usize,
    len: usize,
    mode: PokeMode,
    flow: &dyn FlowProvider,
    rng: &mut R,
) -> Result<Option<PokeSpec>> {
    let q = FlowQuery {
        source: clip.frame(start),
        target: clip.frame(start + len),
        clip_id: Some(&clip.clip_id),
        source_index: clip.source_index(start),
        target_index: clip.source_index(start + len),
    };
    let f = estimate_flow(&q, flow)?;
    let mask = foreground_mask(&f);
    if mask.count() == 0 {
        return Ok(None);
    }
    let (poke, _) = sample_training_poke(&f, &mask, 0.0, rng)?;
    Ok(Some(match mode {
        PokeMode::Shift => poke,
        PokeMode::Impulse => normalize_impulse_poke(&poke, &f),
    }))
}

pub fn evaluate_suite<R: Rng + ?Sized>(
    model: &dyn VideoSynthesizer,
    test: &DatasetIndex,
    flow: &dyn FlowProvider,
    features: &dyn FeatureProvider,
    embedder: &dyn VideoEmbedder,
    config: &SuiteConfig,
    rng: &mut R,
) -> Result<MetricsReport> {
    let t = config.sequence_length;
    if t == 0 || config.sequences == 0 {
        return Err(Error::Protocol("evaluation needs sequences of at least one frame".into()));
    }
    let usable: Vec<&VideoClip> = test.clips.iter().filter(|c| c.len() > t).collect();
    let required = config.min_test_clips.max(1);
    if usable.len() < required {
        return Err(Error::Protocol(format!(
            "evaluation needs {required} test clip(s) longer than {t} frames, {} available",
            usable.len()
        )));
    }
    let fvd_samples = config.fvd_samples.min(config.sequences);
    if fvd_samples < 2 {
        return Err(Error::Protocol(format!(
            "FVD needs at least 2 sequences per side, {fvd_samples} configured"
        )));
    }
    let mut records = Vec::with_capacity(config.sequences);
    let mut generated = Vec::with_capacity(fvd_samples);
    let mut real = Vec::with_capacity(fvd_samples);
    let mut ssim_values = Vec::new();
    while records.len() < config.sequences {
        let mut drawn = None;
        for _ in 0..MAX_POKE_ATTEMPTS {
            let clip = usable[rng.random_range(0..usable.len())];
            let start = rng.random_range(0..clip.len() - t);
            if let Some(p) = draw_poke(clip, start, t, config.poke_mode, flow, rng)? {
                drawn = Some((clip, start, p));
                break;
            }
        }
        let (clip, start, poke) = drawn.ok_or_else(|| {
            Error::Sampling(format!("no moving window found in {MAX_POKE_ATTEMPTS} attempts"))
        })?;
        let targets = &clip.frames()[start + 1..=start + t];
        let pred = model.synthesize(clip.frame(start), &poke, t)?;
        if pred.len() != t {
            return Err(Error::Protocol(format!("model returned {} frames, {t} requested", pred.len())));
        }
        let mut p_sum = 0.0;
        let mut d_sum = 0.0;
        let mut s_sum = 0.0;
        let with_ssim = targets[0].height() >= SSIM_WINDOW && targets[0].width() >= SSIM_WINDOW;
        for (a, b) in pred.iter().zip(targets) {
            p_sum += psnr(a, b)?;
            d_sum += perceptual_distance(a, b, features)?;
            if with_ssim {
                s_sum += ssim(a, b)?;
            }
        }
        let n = t as f64;
        let s = with_ssim.then_some(s_sum / n);
        if let Some(v) = s {
            ssim_values.push(v);
        }
        records.push(SequenceRecord {
            clip_id: clip.clip_id.clone(),
            start,
            poke,
            psnr: p_sum / n,
            ssim: s,
            perceptual: d_sum / n,
        });
        if generated.len() < fvd_samples {
            let mut gen: Vec<Image> = vec![clip.frame(start).clone()];
            gen.extend(pred);
            generated.push(gen);
            real.push(clip.frames()[start..=start + t].to_vec());
        }
    }
    let fvd = frechet_video_distance(&generated, &real, embedder)?;
    let psnrs: Vec<f64> = records.iter().map(|r| r.psnr).collect();
    let percs: Vec<f64> = records.iter().map(|r| r.perceptual).collect();
    Ok(MetricsReport {
        model_id: model.model_id(),
        fingerprint: fingerprint(config, &model.model_id(), features.name(), embedder.name()),
        psnr: MetricSummary::of(&psnrs).expect("non-empty"),
        ssim: MetricSummary::of(&ssim_values),
        perceptual: MetricSummary::of(&percs).expect("non-empty"),
        fvd,
        fvd_samples,
        records,
    })
}
