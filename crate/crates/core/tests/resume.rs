use std::path::Path;

use poke2vid::codec::CodecConfig;
use poke2vid::eval::synthetic::{SyntheticKind, SyntheticSpec};
use poke2vid::model::{Checkpoint, ModelConfig};
use poke2vid::train::{DataConfig, Stage, TrainConfig, Trainer, TrainingData};

fn config(dir: &Path) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed: 21,
        model: ModelConfig {
            codec: CodecConfig::new(16, 4, 4),
            ..Default::default()
        },
        data: DataConfig {
            synthetic: Some(SyntheticSpec {
                kind: SyntheticKind::RigidPatch,
                train_clips: 4,
                test_clips: 1,
                frames: 6,
                ..Default::default()
            }),
            ..Default::default()
        },
        batch_size: 2,
        sequence_length: 4,
        ..Default::default()
    };
    cfg.dynamics.single_stage = true;
    cfg.discriminator.channels = 4;
    cfg.discriminator.spatial_frames = 2;
    cfg.output.dir = dir.to_path_buf();
    cfg.output.checkpoint_every = 0;
    cfg
}

fn bits(trainer: &Trainer) -> Vec<(String, Vec<u32>)> {
    trainer
        .model()
        .tensors()
        .unwrap()
        .into_iter()
        .map(|(k, t)| (k, t.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn resumed_training_is_bit_identical_to_uninterrupted_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    assert!(cfg.loss.adversarial());

    let mut straight = Trainer::new(cfg.clone(), TrainingData::from_config(&cfg).unwrap(), Stage::Dynamics, None).unwrap();
    for _ in 0..4 {
        straight.step().unwrap();
    }

    let mut first = Trainer::new(cfg.clone(), TrainingData::from_config(&cfg).unwrap(), Stage::Dynamics, None).unwrap();
    first.step().unwrap();
    first.step().unwrap();
    let bytes = first.checkpoint().unwrap().to_bytes().unwrap();
    drop(first);
    let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
    let mut resumed = Trainer::resume(cfg.clone(), TrainingData::from_config(&cfg).unwrap(), &ckpt).unwrap();
    assert_eq!(resumed.steps_done(), 2);
    resumed.step().unwrap();
    resumed.step().unwrap();

    assert_eq!(resumed.steps_done(), straight.steps_done());
    assert_eq!(bits(&resumed), bits(&straight));
    let tail = |t: &Trainer| t.history().last().map(|r| r.loss_rec.to_bits());
    assert_eq!(tail(&resumed), tail(&straight));
}
