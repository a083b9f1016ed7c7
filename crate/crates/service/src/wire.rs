//! JSON bodies of the HTTP API. The schemas under `schemas/` describe the
//! same shapes.

use poke2vid::data::PokeMode;
use serde::{Deserialize, Serialize};

pub const DEFAULT_NUM_FRAMES: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Loading,
    Ready,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: Status,
    /// Empty while loading.
    pub model_id: String,
    pub max_frames: usize,
    /// Native square resolution of the loaded model.
    pub image_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalleryItem {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub thumb: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PokeRequest {
    #[serde(default)]
    pub image_id: Option<String>,
    /// Base64 PNG.
    #[serde(default)]
    pub image: Option<String>,
    /// `[row, col]` in the pixel grid of the submitted or gallery image.
    pub location: [usize; 2],
    /// `[dy, dx]` in the same pixel units for `shift`. For `impulse` a
    /// normalized vector of magnitude at most 1.
    pub displacement: [f32; 2],
    #[serde(default)]
    pub mode: PokeMode,
    #[serde(default = "default_num_frames")]
    pub num_frames: usize,
}

fn default_num_frames() -> usize {
    DEFAULT_NUM_FRAMES
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PokeResponse {
    /// Base64 PNG frames at the model resolution.
    pub frames: Vec<String>,
    pub fps: f32,
    pub model_id: String,
    pub elapsed_ms: f64,
    pub width: usize,
    pub height: usize,
    /// `model = source * scale + offset`.
    pub scale: f32,
    pub offset: [usize; 2],
    /// The poke as interpreted, in source-image coordinates.
    pub location: [usize; 2],
    pub displacement: [f32; 2],
    pub mode: PokeMode,
    /// The same poke in model coordinates.
    pub model_location: [usize; 2],
    pub model_displacement: [f32; 2],
    /// Base64 animated PNG, present for `?format=apng`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub animation: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    /// `invalid_request`, `not_found`, `loading`, `over_capacity` or
    /// `synthesis_failed`.
    pub code: String,
    pub reason: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub incident: Option<String>,
}
