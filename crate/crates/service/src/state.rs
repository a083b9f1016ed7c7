use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, RwLock};

use poke2vid::model::VideoSynthesizer;
use poke2vid::Image;
use tokio::sync::{OwnedSemaphorePermit, Semaphore};

use crate::error::ServiceError;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Requests synthesized concurrently.
    pub workers: usize,
    /// Admitted requests allowed to wait for a worker.
    pub queue: usize,
    pub max_frames: usize,
    /// Seconds advertised in `Retry-After` on 503.
    pub retry_after: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            workers: 1,
            queue: 4,
            max_frames: 25,
            retry_after: 1,
        }
    }
}

/// A loaded model. Requests hold the snapshot they started with, so a reload
/// never changes a model under an in-flight request.
pub struct Snapshot {
    pub model: Arc<dyn VideoSynthesizer>,
    pub model_id: String,
}

pub struct Gallery {
    pub images: BTreeMap<String, Image>,
}

impl Gallery {
    pub fn empty() -> Self {
        Self { images: BTreeMap::new() }
    }

    /// Every `*.png` in `dir`, keyed by file stem.
    pub fn load_dir(dir: &Path) -> poke2vid::Result<Self> {
        let mut images = BTreeMap::new();
        let entries = std::fs::read_dir(dir).map_err(|e| poke2vid::Error::io(dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| poke2vid::Error::io(dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            images.insert(stem.to_string(), Image::load_png(&path)?);
        }
        Ok(Self { images })
    }

    pub fn insert(&mut self, id: impl Into<String>, image: Image) {
        self.images.insert(id.into(), image);
    }
}

pub struct AppState {
    pub config: ServiceConfig,
    pub gallery: Gallery,
    snapshot: RwLock<Option<Arc<Snapshot>>>,
    admission: Arc<Semaphore>,
    workers: Arc<Semaphore>,
}

impl AppState {
    pub fn new(config: ServiceConfig, gallery: Gallery) -> Arc<Self> {
        let workers = config.workers.max(1);
        Arc::new(Self {
            admission: Arc::new(Semaphore::new(workers + config.queue)),
            workers: Arc::new(Semaphore::new(workers)),
            config,
            gallery,
            snapshot: RwLock::new(None),
        })
    }

    /// Installs or replaces the model.
    pub fn install(&self, model: Arc<dyn VideoSynthesizer>) {
        let snap = Arc::new(Snapshot {
            model_id: model.model_id(),
            model,
        });
        *self.snapshot.write().unwrap_or_else(|e| e.into_inner()) = Some(snap);
        log::info!("model installed");
    }

    pub fn snapshot(&self) -> Option<Arc<Snapshot>> {
        self.snapshot.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Admits a request without waiting, or fails when workers and queue are full.
    pub fn admit(&self) -> Result<OwnedSemaphorePermit, ServiceError> {
        self.admission
            .clone()
            .try_acquire_owned()
            .map_err(|_| ServiceError::OverCapacity {
                retry_after: self.config.retry_after,
            })
    }

    pub async fn worker(&self) -> OwnedSemaphorePermit {
        self.workers
            .clone()
            .acquire_owned()
            .await
            .expect("worker semaphore is never closed")
    }
}
