//! Codec pretraining and end-to-end dynamics training.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Hierarchy;
use crate::data::{
    estimate_flow, foreground_mask, make_training_example, normalize_impulse_poke, sample_training_poke, FlowMap,
    FlowProvider, FlowQuery, Mask, MotionMatchedSampler, PokeMode, PokeSpec, TrainingExample, VideoClip,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{Checkpoint, Poke2Vid, VideoSynthesizer, DECODER, DYNAMICS, POKE_ENCODER, STATE_ENCODER};
use crate::nn::ParamStore;
use crate::train::adversarial::{Discriminators, PatchDiscriminator, VideoDiscriminator};
use crate::train::config::{TrainConfig, TrainingData};
use crate::train::losses::{perceptual_loss, trajectory_loss, FeatureProvider};
use crate::train::optim::Adam;

const MAX_DRAW_ATTEMPTS: usize = 100;
pub const SPATIAL_DISCRIMINATOR: &str = "disc_s";
pub const TEMPORAL_DISCRIMINATOR: &str = "disc_t";
const GENERATOR_OPT: &str = "opt_g";
const DISCRIMINATOR_OPT: &str = "opt_d";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Frame reconstruction with the state encoder and decoder.
    Codec,
    /// Rollouts under pokes, optionally with adversarial terms.
    Dynamics,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Codec => "codec",
            Stage::Dynamics => "dynamics",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "codec" => Ok(Stage::Codec),
            "dynamics" => Ok(Stage::Dynamics),
            other => Err(Error::Checkpoint(format!("unknown training stage `{other}`"))),
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss_rec: f64,
    pub loss_traj: f64,
    pub loss_ds: f64,
    pub loss_dt: f64,
    pub loss_fm: f64,
    pub loss_gp: f64,
}

impl StepRecord {
    fn new(step: u64) -> Self {
        Self {
            step,
            loss_rec: 0.0,
            loss_traj: 0.0,
            loss_ds: 0.0,
            loss_dt: 0.0,
            loss_fm: 0.0,
            loss_gp: 0.0,
        }
    }

    fn describe(&self) -> String {
        format!(
            "loss_rec={} loss_traj={} loss_ds={} loss_dt={} loss_fm={} loss_gp={}",
            self.loss_rec, self.loss_traj, self.loss_ds, self.loss_dt, self.loss_fm, self.loss_gp
        )
    }
}

struct Adversary {
    store: ParamStore,
    discs: Discriminators,
    opt: Adam,
}

type FlowCache = HashMap<(usize, usize), Arc<(FlowMap, Mask)>>;

/// Everything needed to draw `(x0, poke, targets)` examples from a set of
/// clips.
struct ExampleSource<'a> {
    clips: &'a [VideoClip],
    eligible: &'a [usize],
    flow: &'a dyn FlowProvider,
    len: usize,
    bg_fraction: f64,
    mode: PokeMode,
    sampler: Option<&'a MotionMatchedSampler>,
}

impl ExampleSource<'_> {
    fn window_flow(&self, cache: &mut FlowCache, ci: usize, start: usize) -> Result<Arc<(FlowMap, Mask)>> {
        if let Some(hit) = cache.get(&(ci, start)) {
            return Ok(hit.clone());
        }
        let clip = &self.clips[ci];
        let q = FlowQuery {
            source: clip.frame(start),
            target: clip.frame(start + self.len),
            clip_id: Some(&clip.clip_id),
            source_index: clip.source_index(start),
            target_index: clip.source_index(start + self.len),
        };
        let flow = estimate_flow(&q, self.flow)?;
        let mask = foreground_mask(&flow);
        let entry = Arc::new((flow, mask));
        cache.insert((ci, start), entry.clone());
        Ok(entry)
    }

    fn to_impulse<R: Rng + ?Sized>(&self, poke: PokeSpec, flow: &FlowMap, ci: usize, rng: &mut R) -> PokeSpec {
        let unit = normalize_impulse_poke(&poke, flow);
        let norm = unit.magnitude();
        match self.sampler {
            Some(sampler) if norm > 0.0 => {
                // Direction from the flow, magnitude matched to the clip's motion.
                let s = sampler.draw(ci, rng).clamp(0.0, 1.0) / norm;
                PokeSpec::impulse(
                    poke.location,
                    [
                        (unit.displacement[0] as f64 * s) as f32,
                        (unit.displacement[1] as f64 * s) as f32,
                    ],
                )
            }
            _ => unit,
        }
    }

    fn draw<R: Rng + ?Sized>(&self, cache: &mut FlowCache, rng: &mut R) -> Result<TrainingExample> {
        for _ in 0..MAX_DRAW_ATTEMPTS {
            let ci = self.eligible[rng.random_range(0..self.eligible.len())];
            let clip = &self.clips[ci];
            let start = rng.random_range(0..clip.len() - self.len);
            let entry = self.window_flow(cache, ci, start)?;
            let (flow, mask) = entry.as_ref();
            if mask.count() == 0 {
                continue;
            }
            let (poke, is_bg) = sample_training_poke(flow, mask, self.bg_fraction, rng)?;
            let poke = match self.mode {
                PokeMode::Shift => poke,
                PokeMode::Impulse => self.to_impulse(poke, flow, ci, rng),
            };
            return make_training_example(clip, start, self.len, poke, is_bg);
        }
        Err(Error::Sampling(format!(
            "no window with a moving foreground in {MAX_DRAW_ATTEMPTS} draws"
        )))
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn at_step(e: Error, step: u64) -> Error {
    match e {
        Error::Diverged { detail, .. } => Error::Diverged { step, detail },
        other => other,
    }
}

fn frames_tensor(frames: &[&Image], dtype: DType) -> Result<Tensor> {
    Image::batch_to_tensor(frames, dtype, &Device::Cpu)
}

/// Splits a hierarchy over `len * batch` frames into `len` hierarchies.
fn split_hierarchy(h: &Hierarchy, len: usize, batch: usize) -> Result<Vec<Hierarchy>> {
    (0..len)
        .map(|i| {
            let levels = h
                .levels()
                .iter()
                .map(|l| Ok(l.narrow(0, i * batch, batch)?))
                .collect::<Result<Vec<_>>>()?;
            Hierarchy::new(levels)
        })
        .collect()
}

pub struct Trainer {
    config: TrainConfig,
    stage: Stage,
    model: Poke2Vid,
    data: TrainingData,
    eligible: Vec<usize>,
    features: Box<dyn FeatureProvider>,
    adversary: Option<Adversary>,
    opt: Adam,
    rng: ChaCha8Rng,
    step: u64,
    flow_cache: FlowCache,
    sampler: Option<MotionMatchedSampler>,
    history: Vec<StepRecord>,
}

impl Trainer {
    /// Starts a stage. The dynamics stage needs the codec checkpoint unless
    /// `dynamics.single_stage` is set.
    pub fn new(config: TrainConfig, data: TrainingData, stage: Stage, codec: Option<&Checkpoint>) -> Result<Self> {
        let trainer = Self::build(config, data, stage)?;
        let single = trainer.config.dynamics.single_stage;
        match (stage, codec) {
            (Stage::Codec, Some(_)) => {
                return Err(Error::Config("codec pretraining starts from scratch".into()));
            }
            (Stage::Dynamics, Some(_)) if single => {
                return Err(Error::Config("single-stage training takes no codec checkpoint".into()));
            }
            (Stage::Dynamics, None) if !single => {
                return Err(Error::Config(
                    "dynamics training needs a codec checkpoint (or dynamics.single_stage = true)".into(),
                ));
            }
            (Stage::Dynamics, Some(ck)) => trainer.load_codec(ck)?,
            _ => {}
        }
        Ok(trainer)
    }

    /// Continues a run from one of its own checkpoints.
    pub fn resume(config: TrainConfig, data: TrainingData, ckpt: &Checkpoint) -> Result<Self> {
        let meta = |k: &str| {
            ckpt.metadata
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no `{k}` entry; not a training checkpoint")))
        };
        let stage = Stage::parse(meta("stage")?)?;
        if ckpt.model_config()? != config.model {
            return Err(Error::Checkpoint("model config differs from the checkpoint".into()));
        }
        let parse_u64 = |k: &str| -> Result<u64> {
            meta(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad `{k}` entry")))
        };
        let mut t = Self::build(config, data, stage)?;
        t.model.load_tensors(&ckpt.tensors)?;
        t.opt.load_state(GENERATOR_OPT, &ckpt.tensors, parse_u64("opt_g_steps")?)?;
        if let Some(adv) = &mut t.adversary {
            let own: BTreeMap<String, Tensor> = ckpt
                .tensors
                .iter()
                .filter(|(k, _)| adv.store.get(k).is_some())
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect();
            adv.store.load(&own, true)?;
            adv.opt.load_state(DISCRIMINATOR_OPT, &ckpt.tensors, parse_u64("opt_d_steps")?)?;
        }
        let rng: RngState = serde_json::from_str(meta("rng")?)?;
        t.rng = rng.restore()?;
        t.step = parse_u64("step")?;
        Ok(t)
    }

    fn build(config: TrainConfig, data: TrainingData, stage: Stage) -> Result<Self> {
        config.validate()?;
        let dtype = config.precision.dtype();
        let model = Poke2Vid::new(config.model.clone(), dtype, Device::Cpu, config.seed)?;
        let len = config.sequence_length;
        let eligible: Vec<usize> = data
            .train
            .clips
            .iter()
            .enumerate()
            .filter(|(_, c)| match stage {
                Stage::Codec => !c.is_empty(),
                Stage::Dynamics => c.len() > len,
            })
            .map(|(i, _)| i)
            .collect();
        if eligible.is_empty() {
            return Err(Error::Config(format!(
                "no training clip is long enough for the {} stage (sequence_length {len})",
                stage.name()
            )));
        }
        let size = config.model.codec.image_size;
        if data.train.clips.iter().any(|c| c.shape() != (size, size)) {
            return Err(Error::Config(format!("training frames must be {size}x{size}")));
        }
        let prefixes: Vec<String> = match stage {
            Stage::Codec => vec![STATE_ENCODER, DECODER],
            Stage::Dynamics => {
                let mut p = vec![POKE_ENCODER, DYNAMICS, DECODER];
                if config.dynamics.single_stage || !config.dynamics.freeze_state_encoder {
                    p.push(STATE_ENCODER);
                }
                p
            }
        }
        .into_iter()
        .map(|p| format!("{p}."))
        .collect();
        let prefix_refs: Vec<&str> = prefixes.iter().map(String::as_str).collect();
        let opt = Adam::new(model.params().select(&prefix_refs), config.optim.clone())?;
        let adversary = if stage == Stage::Dynamics && config.loss.adversarial() {
            let mut store = ParamStore::new(dtype, Device::Cpu, config.seed.wrapping_mul(4).wrapping_add(5));
            let ch = config.discriminator.channels;
            let spatial = PatchDiscriminator::new(&mut store.scope(SPATIAL_DISCRIMINATOR), size, ch)?;
            let temporal = VideoDiscriminator::new(&mut store.scope(TEMPORAL_DISCRIMINATOR), size, ch)?;
            let params = store.select(&[""]);
            Some(Adversary {
                discs: Discriminators {
                    spatial,
                    temporal,
                    config: config.discriminator.clone(),
                },
                opt: Adam::new(params, config.optim.clone())?,
                store,
            })
        } else {
            None
        };
        let sampler = if stage == Stage::Dynamics && config.poke_mode == PokeMode::Impulse {
            Some(MotionMatchedSampler::from_dataset(&data.train, data.flow.as_ref())?)
        } else {
            None
        };
        let features = config.perceptual.build(dtype, &Device::Cpu)?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            stage,
            model,
            data,
            eligible,
            features,
            adversary,
            opt,
            step: 0,
            flow_cache: HashMap::new(),
            sampler,
            history: Vec::new(),
        })
    }

    fn load_codec(&self, ck: &Checkpoint) -> Result<()> {
        if ck.model_config()?.codec != self.config.model.codec {
            return Err(Error::Config("codec checkpoint was trained with a different codec config".into()));
        }
        let wanted = [STATE_ENCODER, POKE_ENCODER, DECODER].map(|p| format!("{p}."));
        let keep = |k: &str| wanted.iter().any(|p| k.starts_with(p.as_str()));
        let tensors: BTreeMap<String, Tensor> = ck
            .tensors
            .iter()
            .filter(|(k, _)| keep(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        if let Some(missing) = self.model.params().names().find(|k| keep(k) && !tensors.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("codec checkpoint lacks `{missing}`")));
        }
        self.model.params().load(&tensors, false)
    }

    pub fn model(&self) -> &Poke2Vid {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn history(&self) -> &[StepRecord] {
        &self.history
    }

    pub fn data(&self) -> &TrainingData {
        &self.data
    }

    fn dtype(&self) -> DType {
        self.model.dtype()
    }

    fn source(&self) -> ExampleSource<'_> {
        ExampleSource {
            clips: &self.data.train.clips,
            eligible: &self.eligible,
            flow: self.data.flow.as_ref(),
            len: self.config.sequence_length,
            bg_fraction: self.config.bg_fraction,
            mode: self.config.poke_mode,
            sampler: self.sampler.as_ref(),
        }
    }

    /// One optimization step of the current stage.
    pub fn step(&mut self) -> Result<StepRecord> {
        let next = self.step + 1;
        let rec = match self.stage {
            Stage::Codec => self.codec_step(next),
            Stage::Dynamics => self.dynamics_step(next),
        }
        .map_err(|e| at_step(e, next))?;
        self.step = next;
        self.history.push(rec.clone());
        Ok(rec)
    }

    fn codec_step(&mut self, step: u64) -> Result<StepRecord> {
        let clips = &self.data.train.clips;
        let frames: Vec<&Image> = (0..self.config.batch_size)
            .map(|_| {
                let clip = &clips[self.eligible[self.rng.random_range(0..self.eligible.len())]];
                clip.frame(self.rng.random_range(0..clip.len()))
            })
            .collect();
        let x = frames_tensor(&frames, self.model.dtype())?;
        let rec = self.model.decode(&self.model.encode_states(&x)?)?;
        let loss = perceptual_loss(&[rec], &[x], self.features.as_ref())?;
        let mut out = StepRecord::new(step);
        out.loss_rec = scalar(&loss)?;
        if !out.loss_rec.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: out.describe(),
            });
        }
        self.opt.step(&loss.backward()?)?;
        Ok(out)
    }

    fn dynamics_step(&mut self, step: u64) -> Result<StepRecord> {
        let (b, t) = (self.config.batch_size, self.config.sequence_length);
        let mut cache = std::mem::take(&mut self.flow_cache);
        let drawn = {
            let source = self.source();
            let mut rng = self.rng.clone();
            let r = (0..b).map(|_| source.draw(&mut cache, &mut rng)).collect::<Result<Vec<_>>>();
            (r, rng)
        };
        self.flow_cache = cache;
        self.rng = drawn.1;
        let examples = drawn.0?;
        let dtype = self.dtype();
        let x0 = frames_tensor(&examples.iter().map(|e| &e.x0).collect::<Vec<_>>(), dtype)?;
        let pokes: Vec<PokeSpec> = examples.iter().map(|e| e.poke).collect();
        let targets = (0..t)
            .map(|i| frames_tensor(&examples.iter().map(|e| &e.targets[i]).collect::<Vec<_>>(), dtype))
            .collect::<Result<Vec<_>>>()?;
        let roll = self.model.forward(&x0, &pokes, self.config.poke_mode, t)?;
        let w = self.config.loss.clone();
        let mut out = StepRecord::new(step);

        let loss_rec = perceptual_loss(&roll.frames, &targets, self.features.as_ref())?;
        let encoded = self.model.encode_states(&Tensor::cat(&targets, 0)?)?.detach();
        let target_states = split_hierarchy(&encoded, t, b)?;
        let loss_traj = trajectory_loss(&roll.states, &target_states)?;
        out.loss_rec = scalar(&loss_rec)?;
        out.loss_traj = scalar(&loss_traj)?;
        let mut total = if w.traj > 0.0 {
            (&loss_rec + (&loss_traj * w.traj)?)?
        } else {
            loss_rec
        };

        if let Some(adv) = &mut self.adversary {
            let real = Tensor::stack(&targets, 1)?;
            let fake = Tensor::stack(&roll.frames, 1)?;
            let d = adv.discs.discriminator_losses(&real, &fake, &mut self.rng)?;
            let d_total = ((&d.spatial + &d.temporal)? + (&d.gradient_penalty * w.gradient_penalty)?)?;
            out.loss_gp = scalar(&d.gradient_penalty)?;
            let dv = scalar(&d_total)?;
            if !dv.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("discriminator loss {dv}; {}", out.describe()),
                });
            }
            adv.opt.step(&d_total.backward()?)?;
            let g = adv.discs.generator_terms(&real, &fake, &mut self.rng)?;
            out.loss_ds = scalar(&g.spatial)?;
            out.loss_dt = scalar(&g.temporal)?;
            out.loss_fm = scalar(&g.feature_matching)?;
            total = (total
                + (&g.spatial * w.spatial)?
                + (&g.temporal * w.temporal)?
                + (&g.feature_matching * w.feature_matching)?)?;
        }
        let tv = scalar(&total)?;
        if !tv.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: out.describe(),
            });
        }
        self.opt.step(&total.backward()?)?;
        Ok(out)
    }

    /// Mean per-pixel L1 of rollouts against recorded frames, over
    /// `examples` foreground windows drawn with a fixed seed from the
    /// validation clips (training clips when there are none).
    pub fn validation_l1(&self, examples: usize, seed: u64) -> Result<f64> {
        let t = self.config.sequence_length;
        let set = self.data.validation.as_ref().unwrap_or(&self.data.train);
        let eligible: Vec<usize> = (0..set.clips.len()).filter(|&i| set.clips[i].len() > t).collect();
        if eligible.is_empty() || examples == 0 {
            return Err(Error::Protocol("no validation windows available".into()));
        }
        let source = ExampleSource {
            clips: &set.clips,
            eligible: &eligible,
            flow: self.data.flow.as_ref(),
            len: t,
            bg_fraction: 0.0,
            mode: self.config.poke_mode,
            sampler: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cache = FlowCache::new();
        let mut total = 0.0;
        let mut count = 0usize;
        for _ in 0..examples {
            let ex = source.draw(&mut cache, &mut rng)?;
            let pred = self.model.synthesize(&ex.x0, &ex.poke, t)?;
            for (p, q) in pred.iter().zip(&ex.targets) {
                total += p.mean_abs_diff(q)? as f64;
                count += 1;
            }
        }
        Ok(total / count as f64)
    }

    /// A complete snapshot: parameters, optimizer moments, RNG and step.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = self.model.to_checkpoint()?;
        ck.metadata.insert("config".into(), serde_json::to_string(&self.config)?);
        ck.metadata.insert("stage".into(), self.stage.name().into());
        ck.metadata.insert("step".into(), self.step.to_string());
        ck.metadata.insert("rng".into(), serde_json::to_string(&RngState::capture(&self.rng))?);
        ck.metadata.insert("opt_g_steps".into(), self.opt.steps().to_string());
        ck.tensors.extend(self.opt.state(GENERATOR_OPT));
        if let Some(adv) = &self.adversary {
            ck.tensors.extend(adv.store.snapshot()?);
            ck.tensors.extend(adv.opt.state(DISCRIMINATOR_OPT));
            ck.metadata.insert("opt_d_steps".into(), adv.opt.steps().to_string());
        }
        Ok(ck)
    }

    fn stage_steps(&self) -> u64 {
        match self.stage {
            Stage::Codec => self.config.pretrain.steps,
            Stage::Dynamics => self.config.dynamics.steps,
        }
    }

    pub fn final_checkpoint_path(&self) -> PathBuf {
        let name = match self.stage {
            Stage::Codec => "codec.safetensors",
            Stage::Dynamics => "model.safetensors",
        };
        self.config.output.dir.join(name)
    }

    pub fn metrics_path(&self) -> PathBuf {
        let name = match self.stage {
            Stage::Codec => "pretrain_metrics.jsonl",
            Stage::Dynamics => "metrics.jsonl",
        };
        self.config.output.dir.join(name)
    }

    fn open_log(&self) -> Result<BufWriter<File>> {
        let dir = &self.config.output.dir;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = self.metrics_path();
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(BufWriter::new(f))
    }

    /// Trains until the configured step count, appending to the metrics log
    /// and writing periodic checkpoints. On failure the most recent
    /// checkpoint on disk is left untouched.
    pub fn run(&mut self) -> Result<PathBuf> {
        let target = self.stage_steps();
        let mut log = self.open_log()?;
        let log_path = self.metrics_path();
        let every = self.config.output.checkpoint_every;
        let mut last_good: Option<PathBuf> = None;
        while self.step < target {
            let rec = match self.step() {
                Ok(r) => r,
                Err(e) => {
                    log.flush().map_err(|io| Error::io(&log_path, io))?;
                    return Err(match e {
                        Error::Diverged { step, detail } => Error::Diverged {
                            step,
                            detail: match &last_good {
                                Some(p) => format!("{detail}; last good checkpoint {}", p.display()),
                                None => detail,
                            },
                        },
                        other => other,
                    });
                }
            };
            if rec.step % self.config.output.log_every == 0 {
                serde_json::to_writer(&mut log, &rec)?;
                log.write_all(b"\n").map_err(|e| Error::io(&log_path, e))?;
            }
            if every > 0 && rec.step % every == 0 && rec.step < target {
                let p = self
                    .config
                    .output
                    .dir
                    .join(format!("{}-{:07}.safetensors", self.stage.name(), rec.step));
                self.checkpoint()?.save(&p)?;
                log::info!("step {}: {}", rec.step, rec.describe());
                last_good = Some(p);
            }
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        let path = self.final_checkpoint_path();
        self.checkpoint()?.save(&path)?;
        Ok(path)
    }
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: String,
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream().to_string(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint("malformed rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream.parse().map_err(|_| bad())?);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// Reads a metrics log back.
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Trailing moving averages over `window` consecutive values.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(values.len() - window + 1);
    let mut sum: f64 = values[..window].iter().sum();
    out.push(sum / window as f64);
    for i in window..values.len() {
        sum += values[i] - values[i - window];
        out.push(sum / window as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;
    use crate::eval::synthetic::{SyntheticKind, SyntheticSpec};
    use crate::model::ModelConfig;
    use crate::train::config::DataConfig;

    fn config(dir: &Path) -> TrainConfig {
        let mut cfg = TrainConfig {
            seed: 7,
            model: ModelConfig {
                codec: CodecConfig::new(16, 4, 4),
                ..Default::default()
            },
            data: DataConfig {
                synthetic: Some(SyntheticSpec {
                    kind: SyntheticKind::SpringDot,
                    train_clips: 4,
                    test_clips: 2,
                    frames: 6,
                    ..Default::default()
                }),
                ..Default::default()
            },
            batch_size: 2,
            sequence_length: 4,
            ..Default::default()
        };
        cfg.output.dir = dir.to_path_buf();
        cfg.output.checkpoint_every = 0;
        cfg.pretrain.steps = 2;
        cfg.dynamics.steps = 3;
        cfg.discriminator.channels = 4;
        cfg.discriminator.spatial_frames = 4;
        cfg
    }

    fn data(cfg: &TrainConfig) -> TrainingData {
        TrainingData::from_config(cfg).unwrap()
    }

    #[test]
    fn dynamics_needs_codec_unless_single_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(dir.path());
        assert!(matches!(
            Trainer::new(cfg.clone(), data(&cfg), Stage::Dynamics, None),
            Err(Error::Config(_))
        ));
        cfg.dynamics.single_stage = true;
        assert!(Trainer::new(cfg.clone(), data(&cfg), Stage::Dynamics, None).is_ok());
    }

    #[test]
    fn two_stages_log_every_component_and_freeze_the_encoder() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path());
        let mut codec = Trainer::new(cfg.clone(), data(&cfg), Stage::Codec, None).unwrap();
        let codec_path = codec.run().unwrap();
        let ck = Checkpoint::load(&codec_path).unwrap();
        let mut dynamics = Trainer::new(cfg.clone(), data(&cfg), Stage::Dynamics, Some(&ck)).unwrap();
        let path = dynamics.run().unwrap();
        let log = fs::read_to_string(dynamics.metrics_path()).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines.len(), 3);
        let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(keys, ["loss_ds", "loss_dt", "loss_fm", "loss_gp", "loss_rec", "loss_traj", "step"]);
        let out = Checkpoint::load(&path).unwrap();
        for (k, v) in ck.tensors.iter().filter(|(k, _)| k.starts_with("enc_sigma.")) {
            let a = v.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let b = out.tensors[k].flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(a, b, "{k} changed");
        }
    }
}
