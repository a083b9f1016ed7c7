use candle_core::{DType, Device, Tensor};
use poke2vid::codec::CodecConfig;
use poke2vid::data::{PokeMode, PokeSpec};
use poke2vid::dynamics::{Cell, Predictor};
use poke2vid::model::{ModelConfig, Poke2Vid};

struct Row {
    image: usize,
    levels: usize,
}

const TABLE: [Row; 3] = [
    Row { image: 16, levels: 1 },
    Row { image: 64, levels: 3 },
    Row { image: 128, levels: 4 },
];

#[test]
fn shapes_follow_the_level_table() {
    let dev = Device::Cpu;
    for row in TABLE {
        let codec = CodecConfig::new(row.image, 32, 8);
        assert_eq!(codec.depth(), row.levels, "image {}", row.image);
        let model = Poke2Vid::new(
            ModelConfig {
                codec: codec.clone(),
                ..Default::default()
            },
            DType::F32,
            dev.clone(),
            0,
        )
        .unwrap();
        let x = Tensor::zeros((1, 3, row.image, row.image), DType::F32, &dev).unwrap();
        let states = model.encode_states(&x).unwrap();
        assert_eq!(states.depth(), row.levels);
        for n in 1..=row.levels {
            let want = [1, 32 << (row.levels - n), 8 << (n - 1), 8 << (n - 1)];
            assert_eq!(states.level(n).dims(), want, "image {} level {n}", row.image);
        }
        assert_eq!(states.level(1).dims()[2..], [8, 8]);

        let Predictor::Hierarchy { cells, .. } = model.predictor() else {
            panic!("hierarchy predictor expected");
        };
        assert_eq!(cells.len(), row.levels);
        for (k, cell) in cells.iter().enumerate() {
            let Cell::Gated(g) = cell else { panic!("gated cell expected") };
            assert_eq!(g.hidden(), states.level(k + 1).dims()[1]);
        }

        let phi = model.encode_pokes(&[PokeSpec::shift((0, 0), [1.0, 0.0])]).unwrap();
        assert_eq!(phi.dims(), states.level(1).dims());
        assert_eq!(model.decode(&states).unwrap().dims(), [1, 3, row.image, row.image]);
        let roll = model
            .forward(&x, &[PokeSpec::shift((1, 1), [0.5, 0.5])], PokeMode::Shift, 2)
            .unwrap();
        assert_eq!(roll.frames.len(), 2);
        assert_eq!(roll.frames[1].dims(), [1, 3, row.image, row.image]);
    }
}
