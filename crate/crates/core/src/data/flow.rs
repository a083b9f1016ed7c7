//! Dense optical flow maps, their on-disk raster format and flow providers.
//!
//! A [`FlowMap`] stores one `(dy, dx)` displacement per pixel: the pixel at
//! `(r, c)` of the source frame nominally moves to `(r + dy, c + dx)` in the
//! target frame.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::image::Image;

pub const FLOW_MAGIC: &[u8; 8] = b"POKEFLW1";

#[derive(Clone, Debug, PartialEq)]
pub struct FlowMap {
    height: usize,
    width: usize,
    vectors: Vec<[f32; 2]>,
    pub source_index: usize,
    pub target_index: usize,
}

impl FlowMap {
    pub fn new(height: usize, width: usize, vectors: Vec<[f32; 2]>) -> Result<Self> {
        if vectors.len() != height * width {
            return Err(Error::validation(format!(
                "flow holds {} vectors, expected {height}x{width}",
                vectors.len()
            )));
        }
        if vectors.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
            return Err(Error::validation("flow contains non-finite vectors"));
        }
        Ok(Self {
            height,
            width,
            vectors,
            source_index: 0,
            target_index: 0,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            vectors: vec![[0.0; 2]; height * width],
            source_index: 0,
            target_index: 0,
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 2]) -> Self {
        let mut vectors = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                vectors.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            vectors,
            source_index: 0,
            target_index: 0,
        }
    }

    pub fn with_indices(mut self, source_index: usize, target_index: usize) -> Self {
        self.source_index = source_index;
        self.target_index = target_index;
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn vectors(&self) -> &[[f32; 2]] {
        &self.vectors
    }

    pub fn at(&self, row: usize, col: usize) -> [f32; 2] {
        self.vectors[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: [f32; 2]) {
        self.vectors[row * self.width + col] = v;
    }

    pub fn magnitude(&self, row: usize, col: usize) -> f64 {
        vector_magnitude(self.at(row, col))
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.vectors.iter().map(|&v| vector_magnitude(v)).collect()
    }

    pub fn mean_magnitude(&self) -> f64 {
        self.magnitudes().iter().sum::<f64>() / self.vectors.len() as f64
    }

    pub fn max_magnitude(&self) -> f64 {
        self.magnitudes().into_iter().fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.vectors.iter().all(|v| v[0] == 0.0 && v[1] == 0.0)
    }

    pub fn scaled(&self, s: f32) -> Self {
        let mut out = self.clone();
        for v in &mut out.vectors {
            v[0] *= s;
            v[1] *= s;
        }
        out
    }

    /// Rotates every vector by `angle` radians in the `(dx, dy)` plane.
    pub fn rotated(&self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let mut out = self.clone();
        for v in &mut out.vectors {
            let (dy, dx) = (v[0] as f64, v[1] as f64);
            v[1] = (dx * c - dy * s) as f32;
            v[0] = (dx * s + dy * c) as f32;
        }
        out
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let data: Vec<f32> = self.vectors.iter().flat_map(|v| [v[0], v[1]]).collect();
        write_raster(path, FLOW_MAGIC, self.height, self.width, &data)
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let (h, w, data) = read_raster(path, FLOW_MAGIC, 2)?;
        let vectors = data.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        FlowMap::new(h, w, vectors)
    }
}

pub(crate) fn vector_magnitude(v: [f32; 2]) -> f64 {
    let (dy, dx) = (v[0] as f64, v[1] as f64);
    (dy * dy + dx * dx).sqrt()
}

/// Little-endian float raster: 8-byte magic, `H: u32`, `W: u32`, then
/// `H*W*channels` row-major `f32` values.
pub fn write_raster(path: &Path, magic: &[u8; 8], height: usize, width: usize, data: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + data.len() * 4);
    buf.write_all(magic).expect("vec write");
    buf.write_u32::<LittleEndian>(height as u32).expect("vec write");
    buf.write_u32::<LittleEndian>(width as u32).expect("vec write");
    for &v in data {
        buf.write_f32::<LittleEndian>(v).expect("vec write");
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_raster(path: &Path, magic: &[u8; 8], channels: usize) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut rd = bytes.as_slice();
    let mut head = [0u8; 8];
    rd.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
    if &head != magic {
        return Err(Error::validation(format!(
            "{}: bad magic {:?}, expected {:?}",
            path.display(),
            String::from_utf8_lossy(&head),
            String::from_utf8_lossy(magic)
        )));
    }
    let h = rd.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize;
    let w = rd.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize;
    let n = h * w * channels;
    if rd.len() != n * 4 {
        return Err(Error::validation(format!(
            "{}: payload holds {} bytes, expected {}",
            path.display(),
            rd.len(),
            n * 4
        )));
    }
    let mut data = vec![0f32; n];
    rd.read_f32_into::<LittleEndian>(&mut data)
        .map_err(|e| Error::io(path, e))?;
    Ok((h, w, data))
}

/// Everything a provider may use to produce the flow from `source` to `target`.
#[derive(Clone, Copy, Debug)]
pub struct FlowQuery<'a> {
    pub source: &'a Image,
    pub target: &'a Image,
    pub clip_id: Option<&'a str>,
    /// Frame indices in the original (un-downsampled) clip.
    pub source_index: usize,
    pub target_index: usize,
}

impl<'a> FlowQuery<'a> {
    pub fn images(source: &'a Image, target: &'a Image) -> Self {
        Self {
            source,
            target,
            clip_id: None,
            source_index: 0,
            target_index: 1,
        }
    }
}

pub trait FlowProvider: Send + Sync {
    fn name(&self) -> &str;
    fn estimate(&self, query: &FlowQuery<'_>) -> Result<FlowMap>;
}

/// Validated entry point for all providers.
pub fn estimate_flow(query: &FlowQuery<'_>, provider: &dyn FlowProvider) -> Result<FlowMap> {
    query.source.check_same_shape(query.target)?;
    let flow = provider.estimate(query)?;
    if flow.shape() != query.source.shape() {
        return Err(Error::Flow {
            provider: provider.name().to_string(),
            reason: format!(
                "returned a {:?} map for {:?} frames",
                flow.shape(),
                query.source.shape()
            ),
        });
    }
    if flow.vectors.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
        return Err(Error::Flow {
            provider: provider.name().to_string(),
            reason: "returned non-finite vectors".into(),
        });
    }
    Ok(flow.with_indices(query.source_index, query.target_index))
}

/// Exact motion of a rendered scene between any two of its frames.
pub trait GroundTruthMotion: Send + Sync {
    fn flow_between(&self, source_index: usize, target_index: usize) -> FlowMap;
}

/// Ground-truth flow for synthetic content.
///
/// Lookups resolve in order: identical frames give zero flow, a registered
/// scene for the query's clip id answers analytically, and finally an
/// explicitly registered `(source, target)` frame pair is looked up by
/// content hash.
#[derive(Default)]
pub struct SyntheticFlowProvider {
    scenes: HashMap<String, Box<dyn GroundTruthMotion>>,
    pairs: RwLock<HashMap<(u64, u64), FlowMap>>,
}

impl SyntheticFlowProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_scene(&mut self, clip_id: impl Into<String>, motion: Box<dyn GroundTruthMotion>) {
        self.scenes.insert(clip_id.into(), motion);
    }

    pub fn has_scene(&self, clip_id: &str) -> bool {
        self.scenes.contains_key(clip_id)
    }

    pub fn register_pair(&self, source: &Image, target: &Image, flow: FlowMap) {
        self.pairs
            .write()
            .expect("flow registry poisoned")
            .insert((source.content_hash(), target.content_hash()), flow);
    }
}

impl FlowProvider for SyntheticFlowProvider {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn estimate(&self, q: &FlowQuery<'_>) -> Result<FlowMap> {
        let (h, w) = q.source.shape();
        if let Some(scene) = q.clip_id.and_then(|id| self.scenes.get(id)) {
            return Ok(scene.flow_between(q.source_index, q.target_index));
        }
        if q.source == q.target {
            return Ok(FlowMap::zeros(h, w));
        }
        let key = (q.source.content_hash(), q.target.content_hash());
        if let Some(flow) = self.pairs.read().expect("flow registry poisoned").get(&key) {
            return Ok(flow.clone());
        }
        Err(Error::Flow {
            provider: self.name().into(),
            reason: format!(
                "no ground truth for clip {:?} frames {}->{}",
                q.clip_id, q.source_index, q.target_index
            ),
        })
    }
}

/// Reads `<root>/<clip_id>/<source:05>_<target:05>.flo` raster files.
pub struct PrecomputedFlowProvider {
    root: PathBuf,
}

impl PrecomputedFlowProvider {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path_for(root: &Path, clip_id: &str, source_index: usize, target_index: usize) -> PathBuf {
        root.join(clip_id)
            .join(format!("{source_index:05}_{target_index:05}.flo"))
    }
}

impl FlowProvider for PrecomputedFlowProvider {
    fn name(&self) -> &str {
        "precomputed"
    }

    fn estimate(&self, q: &FlowQuery<'_>) -> Result<FlowMap> {
        let clip_id = q.clip_id.ok_or_else(|| Error::Flow {
            provider: self.name().into(),
            reason: "query carries no clip id".into(),
        })?;
        let path = Self::path_for(&self.root, clip_id, q.source_index, q.target_index);
        FlowMap::read_file(&path).map_err(|e| Error::Flow {
            provider: self.name().into(),
            reason: e.to_string(),
        })
    }
}

/// Adapter for an external estimator invoked as
/// `<program> [args..] <source.png> <target.png> <out.flo>`.
/// The program must write a `POKEFLW1` raster.
pub struct ExternalFlowProvider {
    program: PathBuf,
    args: Vec<String>,
    name: String,
}

static EXTERNAL_CALLS: AtomicU64 = AtomicU64::new(0);

impl ExternalFlowProvider {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        let program = program.into();
        let name = format!("external:{}", program.display());
        Self {
            program,
            args,
            name,
        }
    }
}

impl FlowProvider for ExternalFlowProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn estimate(&self, q: &FlowQuery<'_>) -> Result<FlowMap> {
        let fail = |reason: String| Error::Flow {
            provider: self.name.clone(),
            reason,
        };
        let call = EXTERNAL_CALLS.fetch_add(1, Ordering::Relaxed);
        let dir = std::env::temp_dir().join(format!("poke2vid-flow-{}-{call}", std::process::id()));
        fs::create_dir_all(&dir).map_err(|e| fail(e.to_string()))?;
        let (src, tgt, out) = (dir.join("source.png"), dir.join("target.png"), dir.join("flow.flo"));
        let result = (|| {
            q.source.save_png(&src).map_err(|e| fail(e.to_string()))?;
            q.target.save_png(&tgt).map_err(|e| fail(e.to_string()))?;
            let status = Command::new(&self.program)
                .args(&self.args)
                .arg(&src)
                .arg(&tgt)
                .arg(&out)
                .status()
                .map_err(|e| fail(format!("cannot spawn: {e}")))?;
            if !status.success() {
                return Err(fail(format!("exited with {status}")));
            }
            FlowMap::read_file(&out).map_err(|e| fail(e.to_string()))
        })();
        let _ = fs::remove_dir_all(&dir);
        result
    }
}

/// Classical dense block matching on luminance.
///
/// Every pixel searches a `(2*search_radius+1)^2` window for the patch with
/// the smallest sum of squared differences; ties prefer the shortest
/// displacement. A parabolic fit around the best integer offset adds a
/// sub-pixel correction.
pub struct BlockMatchingFlowProvider {
    pub block_radius: usize,
    pub search_radius: usize,
}

impl Default for BlockMatchingFlowProvider {
    fn default() -> Self {
        Self {
            block_radius: 2,
            search_radius: 4,
        }
    }
}

impl BlockMatchingFlowProvider {
    fn luminance(img: &Image) -> Vec<f32> {
        img.data()
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }
}

impl FlowProvider for BlockMatchingFlowProvider {
    fn name(&self) -> &str {
        "block-matching"
    }

    fn estimate(&self, q: &FlowQuery<'_>) -> Result<FlowMap> {
        let (h, w) = q.source.shape();
        let a = Self::luminance(q.source);
        let b = Self::luminance(q.target);
        let (hi, wi) = (h as isize, w as isize);
        let at = |buf: &[f32], r: isize, c: isize| buf[(r.clamp(0, hi - 1) * wi + c.clamp(0, wi - 1)) as usize];
        let br = self.block_radius as isize;
        let sr = self.search_radius as isize;
        let cost = |r: isize, c: isize, dy: isize, dx: isize| -> f32 {
            let mut s = 0.0;
            for y in -br..=br {
                for x in -br..=br {
                    let d = at(&a, r + y, c + x) - at(&b, r + y + dy, c + x + dx);
                    s += d * d;
                }
            }
            s
        };
        Ok(FlowMap::from_fn(h, w, |r, c| {
            let (r, c) = (r as isize, c as isize);
            let mut best = (f32::INFINITY, 0isize, 0isize);
            for dy in -sr..=sr {
                for dx in -sr..=sr {
                    let e = cost(r, c, dy, dx);
                    let shorter = dy * dy + dx * dx < best.1 * best.1 + best.2 * best.2;
                    if e < best.0 - 1e-9 || ((e - best.0).abs() <= 1e-9 && shorter) {
                        best = (e, dy, dx);
                    }
                }
            }
            let (e0, dy, dx) = best;
            let refine = |em: f32, ep: f32| {
                let denom = em - 2.0 * e0 + ep;
                // An exact match needs no correction.
                if e0 > 1e-9 && denom > 1e-9 {
                    (0.5 * (em - ep) / denom).clamp(-0.5, 0.5)
                } else {
                    0.0
                }
            };
            let sub_y = if dy.abs() < sr {
                refine(cost(r, c, dy - 1, dx), cost(r, c, dy + 1, dx))
            } else {
                0.0
            };
            let sub_x = if dx.abs() < sr {
                refine(cost(r, c, dy, dx - 1), cost(r, c, dy, dx + 1))
            } else {
                0.0
            };
            [dy as f32 + sub_y, dx as f32 + sub_x]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(h: usize, w: usize, shift: (isize, isize)) -> Image {
        // Smooth texture so block matching has an unambiguous optimum.
        Image::from_fn(h, w, |r, c| {
            let y = r as f32 - shift.0 as f32;
            let x = c as f32 - shift.1 as f32;
            let v = 0.5 + 0.25 * (0.7 * x).sin() + 0.25 * (0.45 * y + 0.3 * x).cos();
            [v, v, v]
        })
    }

    #[test]
    fn raster_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let flow = FlowMap::from_fn(4, 5, |r, c| [r as f32 * 0.25 - 1.0, c as f32 / 3.0]);
        let path = dir.path().join("f.flo");
        flow.write_file(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"POKEFLW1");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 5);
        assert_eq!(bytes.len(), 16 + 4 * 5 * 2 * 4);
        // first vector is (dy, dx) = (-1, 0)
        assert_eq!(f32::from_le_bytes(bytes[16..20].try_into().unwrap()), -1.0);
        assert_eq!(FlowMap::read_file(&path).unwrap(), flow);
    }

    #[test]
    fn raster_with_wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.flo");
        write_raster(&path, b"POKECOR1", 2, 2, &[0.0; 4]).unwrap();
        assert!(FlowMap::read_file(&path).is_err());
    }

    #[test]
    fn identical_frames_give_zero_synthetic_flow() {
        let img = textured(16, 16, (0, 0));
        let provider = SyntheticFlowProvider::new();
        let flow = estimate_flow(&FlowQuery::images(&img, &img), &provider).unwrap();
        assert!(flow.is_zero());
    }

    #[test]
    fn unknown_pairs_fail_with_provider_identity() {
        let a = textured(16, 16, (0, 0));
        let b = textured(16, 16, (1, 0));
        let err = estimate_flow(&FlowQuery::images(&a, &b), &SyntheticFlowProvider::new()).unwrap_err();
        match err {
            Error::Flow { provider, .. } => assert_eq!(provider, "synthetic"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn shape_mismatch_is_a_validation_error() {
        let a = textured(16, 16, (0, 0));
        let b = textured(32, 32, (0, 0));
        let err = estimate_flow(&FlowQuery::images(&a, &b), &BlockMatchingFlowProvider::default()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn precomputed_provider_loads_stored_maps_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let flow = FlowMap::from_fn(16, 16, |r, c| [(r * c) as f32 * 0.1, -0.3]);
        flow.write_file(&PrecomputedFlowProvider::path_for(dir.path(), "clip", 2, 7))
            .unwrap();
        let img = Image::filled(16, 16, [0.0; 3]);
        let provider = PrecomputedFlowProvider::new(dir.path());
        let q = FlowQuery {
            source: &img,
            target: &img,
            clip_id: Some("clip"),
            source_index: 2,
            target_index: 7,
        };
        let loaded = estimate_flow(&q, &provider).unwrap();
        assert_eq!(loaded.vectors(), flow.vectors());
        assert_eq!((loaded.source_index, loaded.target_index), (2, 7));
    }

    #[test]
    fn block_matching_recovers_integer_translation() {
        let a = textured(24, 24, (0, 0));
        let b = textured(24, 24, (3, -2));
        let flow = BlockMatchingFlowProvider::default()
            .estimate(&FlowQuery::images(&a, &b))
            .unwrap();
        // Interior pixels, away from clamped borders.
        for r in 8..16 {
            for c in 8..16 {
                let v = flow.at(r, c);
                assert!((v[0] - 3.0).abs() < 0.1 && (v[1] + 2.0).abs() < 0.1, "{r},{c}: {v:?}");
            }
        }
    }

    #[test]
    fn rotation_preserves_magnitudes() {
        let flow = FlowMap::from_fn(3, 3, |r, c| [r as f32, c as f32 - 1.0]);
        let rot = flow.rotated(0.7);
        for (a, b) in flow.magnitudes().iter().zip(rot.magnitudes()) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
