//! Trains the dynamics model on the synthetic spring-dot clips and reports
//! the validation rollout error.
//!
//! `cargo run --release -p poke2vid-core --example spring_dot -- [steps] [out_dir]`

use std::time::Instant;

use poke2vid::codec::CodecConfig;
use poke2vid::eval::{SyntheticKind, SyntheticSpec};
use poke2vid::model::ModelConfig;
use poke2vid::train::{moving_average, DataConfig, LossWeights, Stage, TrainConfig, Trainer, TrainingData};

fn main() -> poke2vid::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map(|s| s.parse().expect("steps")).unwrap_or(5000);
    let out = args.next().unwrap_or_else(|| "runs/spring_dot".into());
    let mut cfg = TrainConfig {
        seed: 1,
        model: ModelConfig {
            codec: CodecConfig::new(16, 8, 4),
            ..Default::default()
        },
        data: DataConfig {
            synthetic: Some(SyntheticSpec {
                kind: SyntheticKind::SpringDot,
                train_clips: 64,
                test_clips: 16,
                frames: 11,
                ..Default::default()
            }),
            ..Default::default()
        },
        loss: LossWeights {
            spatial: 0.0,
            temporal: 0.0,
            feature_matching: 0.0,
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.optim.lr = 1e-3;
    cfg.dynamics.steps = steps;
    cfg.dynamics.single_stage = true;
    cfg.output.dir = out.into();
    cfg.output.checkpoint_every = 0;
    let data = TrainingData::from_config(&cfg)?;
    let mut trainer = Trainer::new(cfg, data, Stage::Dynamics, None)?;
    let t = Instant::now();
    let path = trainer.run()?;
    let rec: Vec<f64> = trainer.history().iter().map(|r| r.loss_rec).collect();
    let ma = moving_average(&rec, 500.min(rec.len()));
    println!(
        "{steps} steps in {:.1}s; L_rec moving average {:.4} -> {:.4}; validation L1 {:.4}; {}",
        t.elapsed().as_secs_f64(),
        ma.first().copied().unwrap_or(f64::NAN),
        ma.last().copied().unwrap_or(f64::NAN),
        trainer.validation_l1(64, 0)?,
        path.display()
    );
    Ok(())
}
