use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context};
use candle_core::Device;
use clap::{Parser, Subcommand};
use poke2vid::data::{BlockMatchingFlowProvider, IngestConfig, PokeMode};
use poke2vid::eval::synthetic::{SyntheticKind, SyntheticSpec};
use poke2vid::eval::{CorrelationConfig, SuiteConfig};
use poke2vid::model::{Poke2Vid, VideoSynthesizer};
use poke2vid::train::TrainConfig;
use poke2vid::Image;
use poke2vid_cli as pipeline;
use poke2vid_service::{AppState, Gallery, ServiceConfig};

#[derive(Parser)]
#[command(name = "poke2vid", version, about = "Poke-conditioned image-to-video synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset to PNG frames and a manifest.
    SynthData {
        #[arg(long, default_value = "spring_dot")]
        kind: SyntheticKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 32)]
        train_clips: usize,
        #[arg(long, default_value_t = 8)]
        test_clips: usize,
        #[arg(long, default_value_t = 11)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Downsample, crop and resize the clips listed in a manifest.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        /// Where to write the processed manifest; frames go next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        downsample: usize,
        #[arg(long)]
        center_crop: bool,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train the state encoder and decoder on frame reconstruction.
    PretrainCodec {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the dynamics model, pretraining the codec first if needed.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, conflicts_with = "resume")]
        codec: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run of this config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Simulated-poke evaluation on the test split.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 200)]
        sequences: usize,
        #[arg(long, default_value_t = 100)]
        fvd_samples: usize,
        #[arg(long, default_value = "shift")]
        mode: PokeMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Motion-correlation map for pokes at one location of an image.
    Correlate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// `row,col` in model pixels.
        #[arg(long, value_parser = parse_pair)]
        location: (usize, usize),
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Binary raster of per-pixel variances.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        heatmap: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of PNG images offered by `/api/gallery`.
        #[arg(long)]
        gallery: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value_t = 4)]
        queue: usize,
        #[arg(long, default_value_t = 25)]
        max_frames: usize,
        /// Static files served next to the API, e.g. a built frontend.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
        /// Reload the checkpoint when the file changes.
        #[arg(long)]
        watch: bool,
    },
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected `row,col`")?;
    Ok((
        a.trim().parse().map_err(|e| format!("{e}"))?,
        b.trim().parse().map_err(|e| format!("{e}"))?,
    ))
}

fn main() -> anyhow::Result<()> {
    pipeline::init_logging()?;
    match Cli::parse().command {
        Command::SynthData {
            kind,
            out,
            size,
            train_clips,
            test_clips,
            frames,
            seed,
        } => {
            let spec = SyntheticSpec {
                kind,
                image_size: size,
                train_clips,
                test_clips,
                frames,
                seed,
                ..Default::default()
            };
            let manifest = pipeline::write_synthetic(&spec, &out)?;
            println!("{}", manifest.display());
        }
        Command::Ingest {
            manifest,
            out,
            downsample,
            center_crop,
            size,
        } => {
            let cfg = IngestConfig {
                downsample,
                center_crop,
                image_size: size,
            };
            let index = pipeline::ingest(&manifest, &cfg, &out)?;
            println!("{} clips -> {}", index.len(), out.display());
        }
        Command::PretrainCodec { config } => {
            let cfg = TrainConfig::load(&config)?;
            println!("{}", pipeline::pretrain_codec(&cfg)?.display());
        }
        Command::Train { config, codec, resume } => {
            let cfg = TrainConfig::load(&config)?;
            if let Some(ckpt) = resume {
                println!("{}", pipeline::resume(&cfg, &ckpt)?.display());
                return Ok(());
            }
            let outcome = pipeline::train(&cfg, codec.as_deref())?;
            if let Some(l1) = outcome.validation_l1 {
                println!("validation L1 {l1:.4}");
            }
            println!("{}", outcome.checkpoint.display());
        }
        Command::Evaluate {
            config,
            ckpt,
            sequences,
            fvd_samples,
            mode,
            seed,
            out,
        } => {
            let cfg = TrainConfig::load(&config)?;
            let suite = SuiteConfig {
                sequences,
                fvd_samples,
                sequence_length: cfg.sequence_length,
                poke_mode: mode,
                ..Default::default()
            };
            let report = pipeline::evaluate(&cfg, &ckpt, &suite, seed)?;
            println!(
                "PSNR {:.3}  SSIM {}  perceptual {:.4}  FVD {:.4}  ({} sequences)",
                report.psnr.mean,
                report.ssim.as_ref().map_or("n/a".into(), |s| format!("{:.4}", s.mean)),
                report.perceptual.mean,
                report.fvd,
                report.psnr.count
            );
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_vec_pretty(&report)?).with_context(|| path.display().to_string())?;
            }
        }
        Command::Correlate {
            ckpt,
            image,
            location,
            n,
            frames,
            seed,
            out,
            heatmap,
        } => {
            let img = Image::load_png(&image)?;
            let cfg = CorrelationConfig {
                n_interactions: n,
                num_frames: frames,
                ..Default::default()
            };
            let flow = BlockMatchingFlowProvider {
                block_radius: 2,
                search_radius: 4,
            };
            let map = pipeline::correlate(&ckpt, &img, location, &cfg, &flow, seed)?;
            map.write_raster(&out)?;
            if let Some(path) = heatmap {
                map.overlay(&img, 0.6)?.save_png(&path)?;
            }
        }
        Command::Serve {
            ckpt,
            gallery,
            host,
            port,
            workers,
            queue,
            max_frames,
            static_dir,
            watch,
        } => {
            if workers == 0 {
                bail!("--workers must be at least 1");
            }
            let gallery = match gallery {
                Some(dir) => Gallery::load_dir(&dir)?,
                None => Gallery::empty(),
            };
            let config = ServiceConfig {
                workers,
                queue,
                max_frames,
                ..Default::default()
            };
            let state = AppState::new(config, gallery);
            serve(state, ckpt, SocketAddr::new(host, port), static_dir, watch)?;
        }
    }
    Ok(())
}

#[tokio::main]
async fn serve(
    state: Arc<AppState>,
    ckpt: PathBuf,
    addr: SocketAddr,
    static_dir: Option<PathBuf>,
    watch: bool,
) -> anyhow::Result<()> {
    // Health reports `loading` until the first model is installed.
    tokio::spawn({
        let state = state.clone();
        async move {
            let mut loaded = None;
            loop {
                let stamp = pipeline::modified(&ckpt);
                if loaded.is_none() || (watch && stamp != loaded) {
                    let path = ckpt.clone();
                    match tokio::task::spawn_blocking(move || Poke2Vid::load(&path, Device::Cpu)).await {
                        Ok(Ok(model)) => {
                            log::info!("loaded {} as {}", ckpt.display(), model.model_id());
                            state.install(Arc::new(model));
                            loaded = stamp;
                        }
                        Ok(Err(e)) => log::error!("cannot load {}: {e}", ckpt.display()),
                        Err(e) => log::error!("loader panicked: {e}"),
                    }
                }
                if !watch && loaded.is_some() {
                    break;
                }
                tokio::time::sleep(pipeline::RELOAD_POLL).await;
            }
        }
    });
    tokio::select! {
        res = poke2vid_service::serve(state, addr, static_dir.as_deref()) => res?,
        _ = tokio::signal::ctrl_c() => log::info!("shutting down"),
    }
    Ok(())
}
