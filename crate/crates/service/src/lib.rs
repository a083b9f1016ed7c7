//! HTTP inference service for poke-conditioned video synthesis.
//!
//! Routes:
//! - `GET /api/health`
//! - `GET /api/gallery`
//! - `POST /api/poke` (add `?format=apng` for an animated PNG alongside the frames)

pub mod apng;
pub mod error;
pub mod state;
pub mod wire;

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{RawQuery, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use poke2vid::data::{PokeMode, PokeSpec};
use poke2vid::Image;
use tower_http::services::ServeDir;

pub use error::ServiceError;
pub use state::{AppState, Gallery, ServiceConfig, Snapshot};
use wire::{GalleryItem, Health, PokeRequest, PokeResponse, Status};

const THUMB_SIDE: usize = 64;
const MAX_SOURCE_SIDE: usize = 4096;

pub fn router(state: Arc<AppState>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/gallery", get(gallery))
        .route("/api/poke", post(poke))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    let snap = state.snapshot();
    Json(Health {
        status: if snap.is_some() { Status::Ready } else { Status::Loading },
        model_id: snap.as_ref().map(|s| s.model_id.clone()).unwrap_or_default(),
        max_frames: state.config.max_frames,
        image_size: snap.and_then(|s| s.model.image_size()),
    })
}

async fn gallery(State(state): State<Arc<AppState>>) -> Result<Json<Vec<GalleryItem>>, ServiceError> {
    state
        .gallery
        .images
        .iter()
        .map(|(id, img)| {
            let (h, w) = img.shape();
            let s = THUMB_SIDE as f32 / h.max(w) as f32;
            let thumb = if s < 1.0 {
                img.resize(((h as f32 * s).round() as usize).max(1), ((w as f32 * s).round() as usize).max(1))
            } else {
                img.clone()
            };
            Ok(GalleryItem {
                image_id: id.clone(),
                width: w,
                height: h,
                thumb: B64.encode(thumb.encode_png().map_err(ServiceError::internal)?),
            })
        })
        .collect::<Result<_, _>>()
        .map(Json)
}

fn wants_apng(query: Option<&str>) -> Result<bool, ServiceError> {
    let Some(q) = query else {
        return Ok(false);
    };
    let mut apng = false;
    for pair in q.split('&').filter(|p| !p.is_empty()) {
        match pair.split_once('=') {
            Some(("format", "apng")) => apng = true,
            Some(("format", "frames")) => apng = false,
            Some(("format", other)) => return Err(ServiceError::invalid(format!("unknown format `{other}`"))),
            _ => return Err(ServiceError::invalid(format!("unknown query parameter `{pair}`"))),
        }
    }
    Ok(apng)
}

/// Where a source pixel lands after letterboxing, by pixel centers.
pub fn source_to_model(loc: [usize; 2], scale: f32, offset: [usize; 2], extent: [usize; 2]) -> [usize; 2] {
    std::array::from_fn(|i| {
        let v = ((loc[i] as f32 + 0.5) * scale - 0.5).round().max(0.0) as usize;
        offset[i] + v.min(extent[i].saturating_sub(1))
    })
}

fn resolve_image(state: &AppState, req: &PokeRequest) -> Result<Image, ServiceError> {
    match (&req.image_id, &req.image) {
        (Some(id), None) => state
            .gallery
            .images
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(id.clone())),
        (None, Some(b64)) => {
            let bytes = B64
                .decode(b64.trim())
                .map_err(|e| ServiceError::invalid(format!("image is not base64: {e}")))?;
            let img = Image::decode_png(&bytes).map_err(|e| ServiceError::invalid(format!("image is not a PNG: {e}")))?;
            if img.height().max(img.width()) > MAX_SOURCE_SIDE {
                return Err(ServiceError::invalid(format!("image exceeds {MAX_SOURCE_SIDE} pixels per side")));
            }
            Ok(img)
        }
        _ => Err(ServiceError::invalid("exactly one of image_id and image is required")),
    }
}

async fn poke(
    State(state): State<Arc<AppState>>,
    RawQuery(query): RawQuery,
    body: Bytes,
) -> Result<Json<PokeResponse>, ServiceError> {
    let started = Instant::now();
    let snap = state.snapshot().ok_or(ServiceError::Loading)?;
    let apng = wants_apng(query.as_deref())?;
    let req: PokeRequest = serde_json::from_slice(&body).map_err(|e| ServiceError::invalid(e.to_string()))?;
    let max = state.config.max_frames;
    if !(1..=max).contains(&req.num_frames) {
        return Err(ServiceError::invalid(format!("num_frames must be in 1..={max}, got {}", req.num_frames)));
    }
    if !req.displacement.iter().all(|v| v.is_finite()) {
        return Err(ServiceError::invalid("displacement must be finite"));
    }
    let source = resolve_image(&state, &req)?;
    let [row, col] = req.location;
    if row >= source.height() || col >= source.width() {
        return Err(ServiceError::invalid(format!(
            "location {:?} is outside the {}x{} image",
            req.location,
            source.height(),
            source.width()
        )));
    }

    let _admitted = state.admit()?;
    let _worker = state.worker().await;

    let model = snap.model.clone();
    let fps = model.fps();
    let num_frames = req.num_frames;
    let mode = req.mode;
    let location = req.location;
    let displacement = req.displacement;
    let work = tokio::task::spawn_blocking(move || {
        let (x0, scale, offset, extent) = match model.image_size() {
            Some(size) => {
                let lb = source.letterbox(size);
                let extent = [
                    ((source.height() as f32 * lb.scale).round() as usize).clamp(1, size),
                    ((source.width() as f32 * lb.scale).round() as usize).clamp(1, size),
                ];
                (lb.image, lb.scale, [lb.offset.0, lb.offset.1], extent)
            }
            None => {
                let extent = [source.height(), source.width()];
                (source, 1.0, [0, 0], extent)
            }
        };
        let model_location = source_to_model(location, scale, offset, extent);
        // Impulses are unitless, normalized by the largest training motion.
        let model_displacement = match mode {
            PokeMode::Shift => displacement.map(|v| v * scale),
            PokeMode::Impulse => displacement,
        };
        let spec = PokeSpec {
            location: (model_location[0], model_location[1]),
            displacement: model_displacement,
            mode,
        };
        let frames = model.synthesize(&x0, &spec, num_frames).map_err(|e| match e {
            poke2vid::Error::Validation(msg) => ServiceError::Invalid(msg),
            other => ServiceError::internal(other),
        })?;
        if frames.len() != num_frames {
            return Err(ServiceError::internal(format!(
                "synthesizer returned {} frames, expected {num_frames}",
                frames.len()
            )));
        }
        let encoded = frames
            .iter()
            .map(|f| f.encode_png().map(|b| B64.encode(b)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(ServiceError::internal)?;
        let animation = if apng {
            Some(B64.encode(apng::encode_apng(&frames, fps).map_err(ServiceError::internal)?))
        } else {
            None
        };
        let (height, width) = frames[0].shape();
        Ok((encoded, animation, scale, offset, model_location, model_displacement, height, width))
    });
    let (frames, animation, scale, offset, model_location, model_displacement, height, width) =
        work.await.map_err(ServiceError::internal)??;

    let elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
    log::info!("poke {mode:?} at {location:?}: {num_frames} frames in {elapsed_ms:.1} ms");
    Ok(Json(PokeResponse {
        frames,
        fps,
        model_id: snap.model_id.clone(),
        elapsed_ms,
        width,
        height,
        scale,
        offset,
        location,
        displacement,
        mode,
        model_location,
        model_displacement,
        animation,
    }))
}

/// Binds `addr` and serves until the task is cancelled.
pub async fn serve(state: Arc<AppState>, addr: std::net::SocketAddr, static_dir: Option<&Path>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state, static_dir)).await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_centers_map_through_the_letterbox() {
        // 32x64 into 16: scale 0.25, band of 8 rows starting at row 4.
        assert_eq!(source_to_model([0, 0], 0.25, [4, 0], [8, 16]), [4, 0]);
        assert_eq!(source_to_model([31, 63], 0.25, [4, 0], [8, 16]), [11, 15]);
        assert_eq!(source_to_model([5, 7], 1.0, [0, 0], [16, 16]), [5, 7]);
    }

    #[test]
    fn format_query_is_parsed_strictly() {
        assert!(!wants_apng(None).unwrap());
        assert!(wants_apng(Some("format=apng")).unwrap());
        assert!(wants_apng(Some("format=gif")).is_err());
        assert!(wants_apng(Some("x=1")).is_err());
    }
}
