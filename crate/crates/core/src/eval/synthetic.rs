//! Rendered clips with exactly known motion.
//!
//! Every scene renders its own frames and answers flow queries analytically,
//! so the flow provider used with these datasets is exact.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetIndex, FlowMap, GroundTruthMotion, Split, SyntheticFlowProvider, VideoClip};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// A dot pulled by a damped spring towards a displaced target.
    SpringDot,
    /// A textured square translating at constant velocity.
    RigidPatch,
    /// Two hinged segments swinging with damped, phase-shifted oscillations.
    TwoLink,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spring_dot" => Ok(Self::SpringDot),
            "rigid_patch" => Ok(Self::RigidPatch),
            "two_link" => Ok(Self::TwoLink),
            other => Err(Error::validation(format!("unknown synthetic dataset kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub image_size: usize,
    pub train_clips: usize,
    pub test_clips: usize,
    pub frames: usize,
    pub fps: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            kind: SyntheticKind::SpringDot,
            image_size: 16,
            train_clips: 32,
            test_clips: 8,
            frames: 11,
            fps: 10.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.image_size.is_power_of_two() || self.image_size < 16 {
            return Err(Error::Config(format!(
                "synthetic image_size {} must be a power of two >= 16",
                self.image_size
            )));
        }
        if self.frames < 2 {
            return Err(Error::Config("synthetic clips need at least 2 frames".into()));
        }
        if self.train_clips + self.test_clips == 0 {
            return Err(Error::Config("synthetic dataset needs at least one clip".into()));
        }
        Ok(())
    }
}

/// A scene that can render any of its frames.
pub trait Scene: GroundTruthMotion {
    fn render(&self, t: usize) -> Image;
}

pub struct SyntheticDataset {
    pub index: DatasetIndex,
    pub flow: SyntheticFlowProvider,
}

type Rgb = [f32; 3];

fn blend(a: Rgb, b: Rgb, w: f32) -> Rgb {
    [
        a[0] * (1.0 - w) + b[0] * w,
        a[1] * (1.0 - w) + b[1] * w,
        a[2] * (1.0 - w) + b[2] * w,
    ]
}

fn gradient_background(size: usize) -> Image {
    let s = size as f32;
    Image::from_fn(size, size, |r, c| {
        [0.1 + 0.15 * r as f32 / s, 0.12, 0.1 + 0.15 * c as f32 / s]
    })
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> Rgb {
    let hue = rng.random::<f32>();
    // Bright, saturated colors that stand out against the dark background.
    let ch = |shift: f32| 0.55 + 0.4 * ((hue + shift) * std::f32::consts::TAU).cos();
    [ch(0.0), ch(1.0 / 3.0), ch(2.0 / 3.0)]
}

/// A disc whose center follows `c + d + (s0 - d)(1 + w t) e^{-w t}`: a
/// critically damped spring released at offset `s0` from rest towards the
/// target offset `d`.
#[derive(Clone, Debug)]
pub struct SpringDotScene {
    pub size: usize,
    pub center: [f64; 2],
    pub initial_offset: [f64; 2],
    pub target_offset: [f64; 2],
    pub radius: f64,
    pub omega: f64,
    pub color: Rgb,
    pub background: Image,
}

impl SpringDotScene {
    pub fn position(&self, t: usize) -> [f64; 2] {
        let t = t as f64;
        let k = (1.0 + self.omega * t) * (-self.omega * t).exp();
        [0, 1].map(|i| {
            self.center[i] + self.target_offset[i] + (self.initial_offset[i] - self.target_offset[i]) * k
        })
    }

    fn coverage(&self, pos: [f64; 2], r: usize, c: usize) -> f64 {
        let dy = r as f64 - pos[0];
        let dx = c as f64 - pos[1];
        (self.radius + 0.5 - (dy * dy + dx * dx).sqrt()).clamp(0.0, 1.0)
    }
}

impl GroundTruthMotion for SpringDotScene {
    fn flow_between(&self, source_index: usize, target_index: usize) -> FlowMap {
        let a = self.position(source_index);
        let b = self.position(target_index);
        let d = [(b[0] - a[0]) as f32, (b[1] - a[1]) as f32];
        FlowMap::from_fn(self.size, self.size, |r, c| {
            if self.coverage(a, r, c) > 0.0 {
                d
            } else {
                [0.0, 0.0]
            }
        })
        .with_indices(source_index, target_index)
    }
}

impl Scene for SpringDotScene {
    fn render(&self, t: usize) -> Image {
        let pos = self.position(t);
        Image::from_fn(self.size, self.size, |r, c| {
            blend(self.background.pixel(r, c), self.color, self.coverage(pos, r, c) as f32)
        })
    }
}

/// A textured `side x side` square whose top-left corner moves by
/// `velocity` pixels per frame over a static textured background.
#[derive(Clone, Debug)]
pub struct RigidPatchScene {
    pub size: usize,
    pub origin: [f64; 2],
    pub velocity: [f64; 2],
    pub side: usize,
    pub texture: Vec<Rgb>,
    pub background: Image,
}

impl RigidPatchScene {
    pub fn corner(&self, t: usize) -> [f64; 2] {
        [0, 1].map(|i| self.origin[i] + self.velocity[i] * t as f64)
    }

    fn texel(&self, corner: [f64; 2], r: usize, c: usize) -> Option<Rgb> {
        let u = (r as f64 - corner[0]).floor();
        let v = (c as f64 - corner[1]).floor();
        let side = self.side as f64;
        if (0.0..side).contains(&u) && (0.0..side).contains(&v) {
            Some(self.texture[u as usize * self.side + v as usize])
        } else {
            None
        }
    }
}

impl GroundTruthMotion for RigidPatchScene {
    fn flow_between(&self, source_index: usize, target_index: usize) -> FlowMap {
        let a = self.corner(source_index);
        let dt = target_index as f64 - source_index as f64;
        let d = [(self.velocity[0] * dt) as f32, (self.velocity[1] * dt) as f32];
        FlowMap::from_fn(self.size, self.size, |r, c| {
            if self.texel(a, r, c).is_some() {
                d
            } else {
                [0.0, 0.0]
            }
        })
        .with_indices(source_index, target_index)
    }
}

impl Scene for RigidPatchScene {
    fn render(&self, t: usize) -> Image {
        let corner = self.corner(t);
        Image::from_fn(self.size, self.size, |r, c| {
            self.texel(corner, r, c).unwrap_or_else(|| self.background.pixel(r, c))
        })
    }
}

/// Two rigid segments hinged at `base` and at their joint. Angles are
/// measured from "up" and follow damped oscillations; the outer segment lags
/// the inner one by `phase`.
#[derive(Clone, Debug)]
pub struct TwoLinkScene {
    pub size: usize,
    pub base: [f64; 2],
    pub lengths: [f64; 2],
    pub amplitudes: [f64; 2],
    pub omega: f64,
    pub damping: f64,
    pub phase: f64,
    pub half_width: f64,
    pub colors: [Rgb; 2],
    pub background: Image,
}

#[derive(Clone, Copy, Debug)]
struct Pose {
    // Segment start points and unit directions in (row, col).
    start: [[f64; 2]; 2],
    dir: [[f64; 2]; 2],
}

impl TwoLinkScene {
    fn angles(&self, t: usize) -> [f64; 2] {
        let t = t as f64;
        let decay = (-self.damping * t).exp();
        [
            self.amplitudes[0] * decay * (self.omega * t).cos(),
            self.amplitudes[1] * decay * (self.omega * t - self.phase).cos(),
        ]
    }

    fn pose(&self, t: usize) -> Pose {
        let [a1, a2] = self.angles(t);
        let unit = |a: f64| [-a.cos(), a.sin()];
        let d1 = unit(a1);
        let d2 = unit(a1 + a2);
        let joint = [
            self.base[0] + self.lengths[0] * d1[0],
            self.base[1] + self.lengths[0] * d1[1],
        ];
        Pose {
            start: [self.base, joint],
            dir: [d1, d2],
        }
    }

    /// Segment index covering the pixel (outer drawn on top) with the
    /// pixel's local (along, across) coordinates.
    fn locate(&self, pose: &Pose, r: usize, c: usize) -> Option<(usize, [f64; 2])> {
        for k in [1, 0] {
            let p = [r as f64 - pose.start[k][0], c as f64 - pose.start[k][1]];
            let d = pose.dir[k];
            let along = p[0] * d[0] + p[1] * d[1];
            let across = -p[0] * d[1] + p[1] * d[0];
            let clamped = along.clamp(0.0, self.lengths[k]);
            let dist = ((along - clamped).powi(2) + across.powi(2)).sqrt();
            if dist <= self.half_width {
                return Some((k, [along, across]));
            }
        }
        None
    }
}

impl GroundTruthMotion for TwoLinkScene {
    fn flow_between(&self, source_index: usize, target_index: usize) -> FlowMap {
        let a = self.pose(source_index);
        let b = self.pose(target_index);
        FlowMap::from_fn(self.size, self.size, |r, c| match self.locate(&a, r, c) {
            Some((k, [along, across])) => {
                let d = b.dir[k];
                let y = b.start[k][0] + along * d[0] - across * d[1];
                let x = b.start[k][1] + along * d[1] + across * d[0];
                [(y - r as f64) as f32, (x - c as f64) as f32]
            }
            None => [0.0, 0.0],
        })
        .with_indices(source_index, target_index)
    }
}

impl Scene for TwoLinkScene {
    fn render(&self, t: usize) -> Image {
        let pose = self.pose(t);
        Image::from_fn(self.size, self.size, |r, c| match self.locate(&pose, r, c) {
            Some((k, _)) => self.colors[k],
            None => self.background.pixel(r, c),
        })
    }
}

fn random_spring_dot<R: Rng + ?Sized>(size: usize, rng: &mut R) -> SpringDotScene {
    let s = size as f64;
    let radius = s / 8.0;
    let margin = radius + 1.0;
    let max_travel = 0.25 * s;
    loop {
        let center = [rng.random_range(margin..s - 1.0 - margin), rng.random_range(margin..s - 1.0 - margin)];
        let mag = rng.random_range(1.0..max_travel);
        let ang = rng.random_range(0.0..2.0 * PI);
        let target = [center[0] + mag * ang.sin(), center[1] + mag * ang.cos()];
        if target.iter().all(|&v| v >= margin && v <= s - 1.0 - margin) {
            return SpringDotScene {
                size,
                center,
                initial_offset: [0.0, 0.0],
                target_offset: [mag * ang.sin(), mag * ang.cos()],
                radius,
                omega: 0.5,
                color: random_color(rng),
                background: gradient_background(size),
            };
        }
    }
}

fn random_rigid_patch<R: Rng + ?Sized>(size: usize, frames: usize, rng: &mut R) -> RigidPatchScene {
    let side = (size / 4).max(2);
    let steps = [-1.0, 0.0, 1.0];
    let velocity = loop {
        let v = [steps[rng.random_range(0..3)], steps[rng.random_range(0..3)]];
        if v != [0.0, 0.0] {
            break v;
        }
    };
    let travel = (frames - 1) as f64;
    let span = (size - side) as f64;
    let origin = [0, 1].map(|i| {
        let lo = if velocity[i] < 0.0 { (travel).min(span) } else { 0.0 };
        let hi = if velocity[i] > 0.0 { (span - travel).max(lo) } else { span };
        rng.random_range(lo..=hi).floor()
    });
    let texture = (0..side * side).map(|_| random_color(rng)).collect();
    let bg: Vec<f32> = (0..size * size * 3).map(|_| rng.random_range(0.0..0.25)).collect();
    RigidPatchScene {
        size,
        origin,
        velocity,
        side,
        texture,
        background: Image::new(size, size, bg).expect("sized buffer"),
    }
}

fn random_two_link<R: Rng + ?Sized>(size: usize, rng: &mut R) -> TwoLinkScene {
    let s = size as f64;
    TwoLinkScene {
        size,
        base: [s - 2.0, s / 2.0],
        lengths: [0.4 * s, 0.3 * s],
        amplitudes: [rng.random_range(0.1..0.5), rng.random_range(0.2..0.8)],
        omega: rng.random_range(0.3..0.8),
        damping: rng.random_range(0.02..0.15),
        phase: rng.random_range(0.2..1.2),
        half_width: (s / 16.0).max(1.0),
        colors: [random_color(rng), random_color(rng)],
        background: gradient_background(size),
    }
}

pub fn render_clip(scene: &dyn Scene, clip_id: &str, split: Split, fps: f32, frames: usize) -> Result<VideoClip> {
    VideoClip::new(clip_id, split, fps, (0..frames).map(|t| scene.render(t)).collect())
}

/// Renders `train_clips + test_clips` clips of the requested kind and a flow
/// provider that knows every scene.
pub fn make_synthetic_dataset<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut flow = SyntheticFlowProvider::new();
    let mut clips = Vec::new();
    let total = spec.train_clips + spec.test_clips;
    for i in 0..total {
        let split = if i < spec.train_clips { Split::Train } else { Split::Test };
        let id = format!("{}_{i:04}", kind_name(spec.kind));
        let scene: Box<dyn SceneMotion> = match spec.kind {
            SyntheticKind::SpringDot => Box::new(random_spring_dot(spec.image_size, rng)),
            SyntheticKind::RigidPatch => Box::new(random_rigid_patch(spec.image_size, spec.frames, rng)),
            SyntheticKind::TwoLink => Box::new(random_two_link(spec.image_size, rng)),
        };
        clips.push(render_clip(scene.as_scene(), &id, split, spec.fps, spec.frames)?);
        flow.add_scene(id, scene.into_motion());
    }
    Ok(SyntheticDataset {
        index: DatasetIndex::new(clips),
        flow,
    })
}

pub fn kind_name(kind: SyntheticKind) -> &'static str {
    match kind {
        SyntheticKind::SpringDot => "spring_dot",
        SyntheticKind::RigidPatch => "rigid_patch",
        SyntheticKind::TwoLink => "two_link",
    }
}

/// Lets one boxed scene serve both as renderer and as flow oracle.
trait SceneMotion: Scene {
    fn as_scene(&self) -> &dyn Scene;
    fn into_motion(self: Box<Self>) -> Box<dyn GroundTruthMotion>;
}

impl<T: Scene + 'static> SceneMotion for T {
    fn as_scene(&self) -> &dyn Scene {
        self
    }

    fn into_motion(self: Box<Self>) -> Box<dyn GroundTruthMotion> {
        self
    }
}
