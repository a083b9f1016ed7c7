//! The hierarchical state encoder, the poke encoder and the frame decoder.
//!
//! Level 1 is always the coarsest (bottleneck) grid. With `S` stride-2
//! stages between the image and the bottleneck, level `n` has spatial size
//! `bottleneck * 2^(n-1)` and `base * 2^(S-n)` channels.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::PokeSpec;
use crate::error::{Error, Result};
use crate::nn::{elu, instance_norm, sigmoid, Conv2d, ConvTranspose2d, ResBlock, Scope};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub bottleneck_size: usize,
    /// Hierarchy depth. Defaults to the number of downsampling stages; a
    /// smaller value drops the finest skip levels.
    pub levels: Option<usize>,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            base_channels: 32,
            bottleneck_size: 8,
            levels: None,
        }
    }
}

impl CodecConfig {
    pub fn new(image_size: usize, base_channels: usize, bottleneck_size: usize) -> Self {
        Self {
            image_size,
            base_channels,
            bottleneck_size,
            levels: None,
        }
    }

    pub fn with_levels(mut self, levels: usize) -> Self {
        self.levels = Some(levels);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let pow2 = |v: usize| v.is_power_of_two();
        if !pow2(self.image_size) || self.image_size < 4 {
            return Err(Error::Config(format!(
                "image_size {} must be a power of two >= 4",
                self.image_size
            )));
        }
        if !pow2(self.bottleneck_size) || self.bottleneck_size >= self.image_size {
            return Err(Error::Config(format!(
                "bottleneck_size {} must be a power of two below image_size {}",
                self.bottleneck_size, self.image_size
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if let Some(n) = self.levels {
            if n == 0 || n > self.stages() {
                return Err(Error::Config(format!(
                    "levels {n} outside 1..={}",
                    self.stages()
                )));
            }
        }
        Ok(())
    }

    /// Stride-2 stages between image and bottleneck.
    pub fn stages(&self) -> usize {
        (self.image_size / self.bottleneck_size).trailing_zeros() as usize
    }

    pub fn depth(&self) -> usize {
        self.levels.unwrap_or_else(|| self.stages())
    }

    /// Spatial side of level `n` (1-based).
    pub fn level_size(&self, n: usize) -> usize {
        self.bottleneck_size << (n - 1)
    }

    pub fn level_channels(&self, n: usize) -> usize {
        self.base_channels << (self.stages() - n)
    }

    /// `(channels, height, width)` of level `n`.
    pub fn level_shape(&self, n: usize) -> (usize, usize, usize) {
        let s = self.level_size(n);
        (self.level_channels(n), s, s)
    }

    /// Output channels of encoder stage `k` (1-based, finest first).
    fn stage_channels(&self, k: usize) -> usize {
        self.base_channels << (k - 1)
    }
}

/// Per-level latent grids for one time step, each `(B, C, h, w)`.
#[derive(Clone, Debug)]
pub struct Hierarchy {
    levels: Vec<Tensor>,
}

impl Hierarchy {
    pub fn new(levels: Vec<Tensor>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::validation("hierarchy needs at least one level"));
        }
        Ok(Self { levels })
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Level `n`, 1-based.
    pub fn level(&self, n: usize) -> &Tensor {
        &self.levels[n - 1]
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    pub fn into_levels(self) -> Vec<Tensor> {
        self.levels
    }

    pub fn batch_size(&self) -> usize {
        self.levels[0].dims()[0]
    }

    pub fn check(&self, config: &CodecConfig) -> Result<()> {
        if self.depth() != config.depth() {
            return Err(Error::validation(format!(
                "hierarchy has {} levels, config expects {}",
                self.depth(),
                config.depth()
            )));
        }
        for (i, t) in self.levels.iter().enumerate() {
            let (c, h, w) = config.level_shape(i + 1);
            let dims = t.dims();
            if dims.len() != 4 || dims[1..] != [c, h, w] {
                return Err(Error::validation(format!(
                    "level {} has shape {dims:?}, expected (B, {c}, {h}, {w})",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    pub fn detach(&self) -> Self {
        Self {
            levels: self.levels.iter().map(|t| t.detach()).collect(),
        }
    }

    pub fn zeros(config: &CodecConfig, batch: usize, dtype: DType, device: &Device) -> Result<Self> {
        let levels = (1..=config.depth())
            .map(|n| {
                let (c, h, w) = config.level_shape(n);
                Ok(Tensor::zeros((batch, c, h, w), dtype, device)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { levels })
    }

    pub fn all_finite(&self) -> Result<bool> {
        for t in &self.levels {
            let s = t.abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !s.is_finite() {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

fn check_image_batch(x: &Tensor, channels: usize, size: usize) -> Result<()> {
    let dims = x.dims();
    if dims.len() != 4 || dims[1] != channels || dims[2] != size || dims[3] != size {
        return Err(Error::validation(format!(
            "expected a (B, {channels}, {size}, {size}) batch, got {dims:?}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct StateEncoder {
    config: CodecConfig,
    stages: Vec<Conv2d>,
    bottleneck: ResBlock,
}

impl StateEncoder {
    pub fn new(s: &mut Scope, config: &CodecConfig) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::new();
        let mut cin = 3;
        for k in 1..=config.stages() {
            let cout = config.stage_channels(k);
            stages.push(Conv2d::new(&mut s.pp(&format!("stage{k}")), cin, cout, 3, 2, 1)?);
            cin = cout;
        }
        let bottleneck = ResBlock::new(&mut s.pp("res"), cin)?;
        Ok(Self {
            config: config.clone(),
            stages,
            bottleneck,
        })
    }

    /// Encodes a `(B, 3, H, W)` batch into its state hierarchy.
    pub fn forward(&self, x: &Tensor) -> Result<Hierarchy> {
        check_image_batch(x, 3, self.config.image_size)?;
        let s = self.config.stages();
        let depth = self.config.depth();
        let mut levels = vec![None; depth];
        let mut h = x.clone();
        for (i, conv) in self.stages.iter().enumerate() {
            h = elu(&instance_norm(&conv.forward(&h)?)?)?;
            let k = i + 1;
            let n = s - k + 1;
            if n == 1 {
                h = self.bottleneck.forward(&h)?;
            }
            if n <= depth {
                levels[n - 1] = Some(h.clone());
            }
        }
        Hierarchy::new(levels.into_iter().map(|t| t.expect("every level filled")).collect())
    }
}

/// Builds the 2-channel sparse map holding `(dy, dx)` at each poke location.
pub fn poke_map(pokes: &[PokeSpec], size: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = vec![0f32; pokes.len() * 2 * size * size];
    for (b, p) in pokes.iter().enumerate() {
        p.validate(size, size)?;
        let (r, c) = p.location;
        for ch in 0..2 {
            data[((b * 2 + ch) * size + r) * size + c] = p.displacement[ch];
        }
    }
    Ok(Tensor::from_vec(data, (pokes.len(), 2, size, size), device)?.to_dtype(dtype)?)
}

#[derive(Clone, Debug)]
pub struct PokeEncoder {
    config: CodecConfig,
    stages: Vec<Conv2d>,
}

impl PokeEncoder {
    pub fn new(s: &mut Scope, config: &CodecConfig) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::new();
        let mut cin = 2;
        for k in 1..=config.stages() {
            let cout = config.stage_channels(k);
            stages.push(Conv2d::new(&mut s.pp(&format!("stage{k}")), cin, cout, 3, 2, 1)?);
            cin = cout;
        }
        Ok(Self {
            config: config.clone(),
            stages,
        })
    }

    /// Encodes a `(B, 2, H, W)` sparse poke map into a bottleneck latent.
    pub fn forward_map(&self, map: &Tensor) -> Result<Tensor> {
        check_image_batch(map, 2, self.config.image_size)?;
        let mut h = map.clone();
        let last = self.stages.len() - 1;
        for (i, conv) in self.stages.iter().enumerate() {
            h = conv.forward(&h)?;
            if i != last {
                h = elu(&h)?;
            }
        }
        Ok(h)
    }

    pub fn forward(&self, pokes: &[PokeSpec], dtype: DType, device: &Device) -> Result<Tensor> {
        self.forward_map(&poke_map(pokes, self.config.image_size, dtype, device)?)
    }
}

#[derive(Clone, Debug)]
struct UpStage {
    up: ConvTranspose2d,
    res: Option<ResBlock>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    config: CodecConfig,
    input: ResBlock,
    ups: Vec<UpStage>,
    out: Conv2d,
}

impl Decoder {
    pub fn new(s: &mut Scope, config: &CodecConfig) -> Result<Self> {
        config.validate()?;
        let stages = config.stages();
        let input = ResBlock::new(&mut s.pp("res_in"), config.level_channels(1))?;
        let mut ups = Vec::new();
        let mut cin = config.level_channels(1);
        for u in 1..=stages {
            let mut st = s.pp(&format!("up{u}"));
            let (cout, res) = if u < stages {
                let c = config.level_channels(u + 1);
                (c, Some(ResBlock::new(&mut st.pp("res"), c)?))
            } else {
                (config.base_channels, None)
            };
            let up = ConvTranspose2d::new(&mut st.pp("deconv"), cin, cout)?;
            ups.push(UpStage { up, res });
            cin = cout;
        }
        let out = Conv2d::new(&mut s.pp("out"), cin, 3, 3, 1, 1)?;
        Ok(Self {
            config: config.clone(),
            input,
            ups,
            out,
        })
    }

    /// Renders a hierarchy into a `(B, 3, H, W)` batch with values in `[0, 1]`.
    pub fn forward(&self, states: &Hierarchy) -> Result<Tensor> {
        states.check(&self.config)?;
        let depth = self.config.depth();
        let mut h = self.input.forward(states.level(1))?;
        for (i, stage) in self.ups.iter().enumerate() {
            let u = i + 1;
            h = elu(&instance_norm(&stage.up.forward(&h)?)?)?;
            if u < depth {
                h = (h + states.level(u + 1))?;
            }
            if let Some(res) = &stage.res {
                h = res.forward(&h)?;
            }
        }
        sigmoid(&self.out.forward(&h)?)
    }
}
