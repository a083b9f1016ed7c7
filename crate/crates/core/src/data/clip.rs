//! Video clips, JSON-lines manifests and the processed dataset index.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// An ordered frame sequence. All frames share one power-of-two shape.
#[derive(Clone, Debug)]
pub struct VideoClip {
    pub clip_id: String,
    pub split: Split,
    pub fps: f32,
    frames: Vec<Image>,
    /// Index of every kept frame in the original, un-downsampled source.
    source_indices: Vec<usize>,
}

impl VideoClip {
    pub fn new(clip_id: impl Into<String>, split: Split, fps: f32, frames: Vec<Image>) -> Result<Self> {
        let n = frames.len();
        Self::with_source_indices(clip_id, split, fps, frames, (0..n).collect())
    }

    pub fn with_source_indices(
        clip_id: impl Into<String>,
        split: Split,
        fps: f32,
        frames: Vec<Image>,
        source_indices: Vec<usize>,
    ) -> Result<Self> {
        let clip_id = clip_id.into();
        if frames.len() < 2 {
            return Err(Error::validation(format!(
                "clip `{clip_id}` has {} frames, at least 2 are required",
                frames.len()
            )));
        }
        if source_indices.len() != frames.len() {
            return Err(Error::validation("one source index per frame is required"));
        }
        let (h, w) = frames[0].shape();
        if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.shape() != (h, w)) {
            return Err(Error::validation(format!(
                "clip `{clip_id}`: frame {i} is {}x{}, frame 0 is {h}x{w}",
                f.height(),
                f.width()
            )));
        }
        if !is_valid_side(h) || !is_valid_side(w) {
            return Err(Error::validation(format!(
                "clip `{clip_id}`: frame size {h}x{w} is not a power of two >= 16"
            )));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::validation(format!("clip `{clip_id}`: invalid fps {fps}")));
        }
        Ok(Self {
            clip_id,
            split,
            fps,
            frames,
            source_indices,
        })
    }

    pub fn frames(&self) -> &[Image] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &Image {
        &self.frames[i]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.frames[0].shape()
    }

    pub fn source_index(&self, i: usize) -> usize {
        self.source_indices[i]
    }

    pub fn source_indices(&self) -> &[usize] {
        &self.source_indices
    }
}

fn is_valid_side(n: usize) -> bool {
    n >= 16 && n.is_power_of_two()
}

/// One line of a manifest file.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub path: String,
    pub split: Split,
    pub fps: f32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    /// Keep every k-th frame.
    pub downsample: usize,
    pub center_crop: bool,
    /// Resize every frame to this square size after cropping.
    pub image_size: Option<usize>,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            downsample: 1,
            center_crop: false,
            image_size: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct DatasetIndex {
    pub clips: Vec<VideoClip>,
}

impl DatasetIndex {
    pub fn new(clips: Vec<VideoClip>) -> Self {
        Self { clips }
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &VideoClip> {
        self.clips.iter().filter(move |c| c.split == split)
    }

    pub fn subset(&self, split: Split) -> DatasetIndex {
        DatasetIndex::new(self.split(split).cloned().collect())
    }

    pub fn get(&self, clip_id: &str) -> Option<&VideoClip> {
        self.clips.iter().find(|c| c.clip_id == clip_id)
    }

    /// Writes every frame as PNG below `frames_dir` and returns a manifest
    /// pointing at those directories.
    pub fn write_frames(&self, frames_dir: &Path) -> Result<Vec<ManifestEntry>> {
        let mut entries = Vec::with_capacity(self.clips.len());
        for clip in &self.clips {
            let dir = frames_dir.join(&clip.clip_id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (frame, src) in clip.frames.iter().zip(&clip.source_indices) {
                frame.save_png(&dir.join(format!("{src:05}.png")))?;
            }
            entries.push(ManifestEntry {
                clip_id: clip.clip_id.clone(),
                path: dir.to_string_lossy().into_owned(),
                split: clip.split,
                fps: clip.fps,
            });
        }
        Ok(entries)
    }

    /// Persists the processed dataset: frames go to `<index-stem>_frames/`
    /// and the index itself is a manifest over those directories.
    pub fn save_index(&self, index_path: &Path) -> Result<()> {
        let stem = index_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "index".into());
        let parent = index_path.parent().unwrap_or_else(|| Path::new("."));
        let frames_dir = parent.join(format!("{stem}_frames"));
        let mut entries = self.write_frames(&frames_dir)?;
        // Relative paths keep the index relocatable.
        for e in &mut entries {
            if let Ok(rel) = Path::new(&e.path).strip_prefix(parent) {
                e.path = rel.to_string_lossy().into_owned();
            }
        }
        write_manifest(index_path, &entries)
    }
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = fs::File::open(path).map_err(|e| Error::Ingestion {
        entry: path.display().to_string(),
        reason: format!("cannot open manifest: {e}"),
    })?;
    let mut entries = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Ingestion {
            entry: format!("{}:{}", path.display(), lineno + 1),
            reason: e.to_string(),
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

/// Reads every manifest entry, applying temporal downsampling, optional
/// center-crop and resize. Split assignment is taken from the manifest.
pub fn load_dataset(manifest_path: &Path, config: &IngestConfig) -> Result<DatasetIndex> {
    if config.downsample == 0 {
        return Err(Error::validation("downsample factor must be >= 1"));
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut clips = Vec::new();
    for entry in read_manifest(manifest_path)? {
        let path = resolve(base, &entry.path);
        let raw = read_frames(&entry.clip_id, &path)?;
        clips.push(process_clip(&entry, raw, config)?);
    }
    log::info!("ingested {} clips from {}", clips.len(), manifest_path.display());
    Ok(DatasetIndex::new(clips))
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = PathBuf::from(p);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

fn process_clip(entry: &ManifestEntry, raw: Vec<Image>, config: &IngestConfig) -> Result<VideoClip> {
    if let Some(first) = raw.first() {
        if let Some((i, f)) = raw.iter().enumerate().find(|(_, f)| f.shape() != first.shape()) {
            return Err(Error::validation(format!(
                "clip `{}`: frame {i} is {}x{}, frame 0 is {}x{}",
                entry.clip_id,
                f.height(),
                f.width(),
                first.height(),
                first.width()
            )));
        }
    }
    let mut frames = Vec::new();
    let mut indices = Vec::new();
    for (i, frame) in raw.into_iter().enumerate().step_by(config.downsample) {
        let mut frame = if config.center_crop {
            frame.center_crop_square()
        } else {
            frame
        };
        if let Some(size) = config.image_size {
            frame = frame.resize(size, size);
        }
        frames.push(frame);
        indices.push(i);
    }
    VideoClip::with_source_indices(entry.clip_id.clone(), entry.split, entry.fps, frames, indices)
}

fn read_frames(clip_id: &str, path: &Path) -> Result<Vec<Image>> {
    let ingest_err = |reason: String| Error::Ingestion {
        entry: clip_id.to_string(),
        reason,
    };
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| ingest_err(format!("cannot list {}: {e}", path.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .map(|x| x.eq_ignore_ascii_case("png"))
                    .unwrap_or(false)
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(ingest_err(format!("no PNG frames in {}", path.display())));
        }
        files
            .iter()
            .map(|f| Image::load_png(f).map_err(|e| ingest_err(format!("{}: {e}", f.display()))))
            .collect()
    } else if path.is_file() {
        extract_video_frames(path).map_err(ingest_err)
    } else {
        Err(ingest_err(format!("{} does not exist", path.display())))
    }
}

/// Frame extraction from container files is delegated to `ffmpeg`.
fn extract_video_frames(path: &Path) -> std::result::Result<Vec<Image>, String> {
    let tmp = std::env::temp_dir().join(format!(
        "poke2vid-extract-{}-{}",
        std::process::id(),
        path.file_stem().unwrap_or_default().to_string_lossy()
    ));
    fs::create_dir_all(&tmp).map_err(|e| e.to_string())?;
    let status = Command::new("ffmpeg")
        .arg("-loglevel")
        .arg("error")
        .arg("-i")
        .arg(path)
        .arg(tmp.join("%05d.png"))
        .status()
        .map_err(|e| format!("cannot run ffmpeg to decode {}: {e}", path.display()))?;
    if !status.success() {
        return Err(format!("ffmpeg failed on {} ({status})", path.display()));
    }
    let frames = read_frames("video", &tmp).map_err(|e| e.to_string());
    let _ = fs::remove_dir_all(&tmp);
    frames
}
