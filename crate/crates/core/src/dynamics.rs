//! Recurrent prediction of latent state trajectories.
//!
//! Level 1 advances under the latent interaction; every finer level `n`
//! advances under the upsampled *fresh* output of level `n - 1` from the
//! same step:
//!
//! ```text
//! s1[i+1] = F1(s1[i], phi[i])
//! sn[i+1] = Fn(sn[i], U(s{n-1}[i+1]))
//! ```
//!
//! With linear cells this is exactly a semi-implicit Euler integrator, which
//! the tests use as a wiring oracle.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::codec::{CodecConfig, Hierarchy};
use crate::data::PokeMode;
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Conv2d, ConvTranspose2d, Scope};

/// Convolutional gated recurrent cell whose hidden state is the level state.
#[derive(Clone, Debug)]
pub struct ConvGruCell {
    gates: Conv2d,
    candidate: Conv2d,
    hidden: usize,
}

impl ConvGruCell {
    pub fn new(s: &mut Scope, input: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            gates: Conv2d::new(&mut s.pp("gates"), input + hidden, 2 * hidden, 3, 1, 1)?,
            candidate: Conv2d::new(&mut s.pp("candidate"), input + hidden, hidden, 3, 1, 1)?,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn gates_conv(&self) -> &Conv2d {
        &self.gates
    }

    pub fn candidate_conv(&self) -> &Conv2d {
        &self.candidate
    }

    /// Update gate `z` and candidate `c` for one step.
    pub fn gate_and_candidate(&self, state: &Tensor, input: &Tensor) -> Result<(Tensor, Tensor)> {
        let g = sigmoid(&self.gates.forward(&Tensor::cat(&[input, state], 1)?)?)?;
        let z = g.narrow(1, 0, self.hidden)?;
        let r = g.narrow(1, self.hidden, self.hidden)?;
        let gated = (r * state)?;
        let c = self.candidate.forward(&Tensor::cat(&[input, &gated], 1)?)?.tanh()?;
        Ok((z, c))
    }

    /// The two residual terms `G1 = -z * s` and `G2 = z * c`; a step is
    /// `s + G1 + G2`.
    pub fn residual_parts(&self, state: &Tensor, input: &Tensor) -> Result<(Tensor, Tensor)> {
        let (z, c) = self.gate_and_candidate(state, input)?;
        Ok(((&z * state)?.neg()?, (z * c)?))
    }

    pub fn step(&self, state: &Tensor, input: &Tensor) -> Result<Tensor> {
        let (z, c) = self.gate_and_candidate(state, input)?;
        Ok((state + (z * (c - state)?)?)?)
    }
}

/// `s + h * (a * s + b * u)`, elementwise, with scalar coefficients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearResidualCell {
    pub a: f64,
    pub b: f64,
    pub h: f64,
}

impl LinearResidualCell {
    pub fn step(&self, state: &Tensor, input: &Tensor) -> Result<Tensor> {
        let f = ((state * self.a)? + (input * self.b)?)?;
        Ok((state + (f * self.h)?)?)
    }
}

#[derive(Clone, Debug)]
pub enum Cell {
    Gated(ConvGruCell),
    Linear(LinearResidualCell),
}

impl Cell {
    pub fn step(&self, state: &Tensor, input: &Tensor) -> Result<Tensor> {
        if state.dims() != input.dims() {
            return Err(Error::validation(format!(
                "cell state {:?} and input {:?} differ in shape",
                state.dims(),
                input.dims()
            )));
        }
        match self {
            Cell::Gated(c) => {
                if state.dims()[1] != c.hidden() {
                    return Err(Error::validation(format!(
                        "cell expects {} channels, got {}",
                        c.hidden(),
                        state.dims()[1]
                    )));
                }
                c.step(state, input)
            }
            Cell::Linear(c) => c.step(state, input),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Upsampler {
    TransposedConv(ConvTranspose2d),
    Identity,
}

impl Upsampler {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Upsampler::TransposedConv(c) => {
                if x.dims().len() != 4 || x.dims()[1] != c.in_channels() {
                    return Err(Error::validation(format!(
                        "upsampler expects {} input channels, got {:?}",
                        c.in_channels(),
                        x.dims()
                    )));
                }
                c.forward(x)
            }
            Upsampler::Identity => Ok(x.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    /// One cell per hierarchy level.
    #[default]
    Hierarchy,
    /// A stacked recurrent network at the bottleneck only.
    BottleneckRnn,
}

#[derive(Clone, Debug)]
pub enum Predictor {
    Hierarchy {
        cells: Vec<Cell>,
        /// `upsamplers[k]` maps level `k + 1` to level `k + 2`.
        upsamplers: Vec<Upsampler>,
    },
    /// Layer `k` reads layer `k - 1`'s fresh output; the decoder sees the
    /// last layer.
    BottleneckStack { cells: Vec<Cell> },
}

impl Predictor {
    /// Gated cells sized to the codec levels, linked by transposed
    /// convolutions.
    pub fn hierarchy(s: &mut Scope, config: &CodecConfig) -> Result<Self> {
        let depth = config.depth();
        let mut cells = Vec::with_capacity(depth);
        let mut upsamplers = Vec::with_capacity(depth.saturating_sub(1));
        for n in 1..=depth {
            let c = config.level_channels(n);
            cells.push(Cell::Gated(ConvGruCell::new(&mut s.pp(&format!("cell{n}")), c, c)?));
            if n < depth {
                let up = ConvTranspose2d::new(&mut s.pp(&format!("up{n}")), c, config.level_channels(n + 1))?;
                upsamplers.push(Upsampler::TransposedConv(up));
            }
        }
        Ok(Predictor::Hierarchy { cells, upsamplers })
    }

    pub fn bottleneck_stack(s: &mut Scope, config: &CodecConfig, layers: usize) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("bottleneck stack needs at least one layer".into()));
        }
        if config.depth() != 1 {
            return Err(Error::Config(format!(
                "a bottleneck stack needs a single-level codec, got depth {}",
                config.depth()
            )));
        }
        let c = config.level_channels(1);
        let cells = (1..=layers)
            .map(|k| Ok(Cell::Gated(ConvGruCell::new(&mut s.pp(&format!("layer{k}")), c, c)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Predictor::BottleneckStack { cells })
    }

    /// Number of hierarchy levels the predictor advances.
    pub fn depth(&self) -> usize {
        match self {
            Predictor::Hierarchy { cells, .. } => cells.len(),
            Predictor::BottleneckStack { .. } => 1,
        }
    }

    fn initial_carry(&self, s0: &Hierarchy) -> Result<Vec<Tensor>> {
        if s0.depth() != self.depth() {
            return Err(Error::validation(format!(
                "hierarchy has {} levels, predictor expects {}",
                s0.depth(),
                self.depth()
            )));
        }
        Ok(match self {
            Predictor::Hierarchy { .. } => s0.levels().to_vec(),
            Predictor::BottleneckStack { cells } => vec![s0.level(1).clone(); cells.len()],
        })
    }

    fn advance(&self, carry: &[Tensor], phi: &Tensor) -> Result<Vec<Tensor>> {
        let cells = match self {
            Predictor::Hierarchy { cells, .. } | Predictor::BottleneckStack { cells } => cells,
        };
        let mut next: Vec<Tensor> = Vec::with_capacity(cells.len());
        for (k, cell) in cells.iter().enumerate() {
            let input = match (self, k) {
                (_, 0) => phi.clone(),
                (Predictor::Hierarchy { upsamplers, .. }, _) => upsamplers[k - 1].forward(&next[k - 1])?,
                (Predictor::BottleneckStack { .. }, _) => next[k - 1].clone(),
            };
            next.push(cell.step(&carry[k], &input)?);
        }
        Ok(next)
    }

    fn output(&self, carry: &[Tensor]) -> Result<Hierarchy> {
        match self {
            Predictor::Hierarchy { .. } => Hierarchy::new(carry.to_vec()),
            Predictor::BottleneckStack { .. } => Hierarchy::new(vec![carry[carry.len() - 1].clone()]),
        }
    }

    /// One step of the hierarchy. For a bottleneck stack every layer starts
    /// from the given state.
    pub fn step(&self, states: &Hierarchy, phi: &Tensor) -> Result<Hierarchy> {
        let carry = self.initial_carry(states)?;
        self.output(&self.advance(&carry, phi)?)
    }

    /// Applies the predictor once per schedule entry and returns the states
    /// for steps `1..=T`.
    pub fn rollout(&self, s0: &Hierarchy, schedule: &InteractionSchedule) -> Result<Vec<Hierarchy>> {
        let mut carry = self.initial_carry(s0)?;
        let mut out = Vec::with_capacity(schedule.len());
        for (i, phi) in schedule.iter().enumerate() {
            carry = self.advance(&carry, phi)?;
            let h = self.output(&carry)?;
            if !h.all_finite()? {
                return Err(Error::NonFiniteState { step: i + 1 });
            }
            out.push(h);
        }
        Ok(out)
    }
}

/// Per-step latent interactions.
#[derive(Clone, Debug)]
pub struct InteractionSchedule {
    steps: Vec<Tensor>,
}

impl InteractionSchedule {
    pub fn from_steps(steps: Vec<Tensor>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::validation("interaction schedule must have length >= 1"));
        }
        Ok(Self { steps })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.steps[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.steps.iter()
    }
}

/// Shift mode repeats `phi` for every step; impulse mode applies it once and
/// then zeros.
pub fn interaction_schedule(phi: &Tensor, mode: PokeMode, len: usize) -> Result<InteractionSchedule> {
    if len < 1 {
        return Err(Error::validation("schedule length must be >= 1"));
    }
    let steps = match mode {
        PokeMode::Shift => vec![phi.clone(); len],
        PokeMode::Impulse => {
            let zero = phi.zeros_like()?;
            std::iter::once(phi.clone())
                .chain(std::iter::repeat_n(zero, len - 1))
                .collect()
        }
    };
    InteractionSchedule::from_steps(steps)
}

/// Linear test system `v' = -gamma v + phi`, `x' = v` as a two-level
/// predictor with explicit step size `h`.
pub fn damped_linear_system(gamma: f64, h: f64) -> Predictor {
    Predictor::Hierarchy {
        cells: vec![
            Cell::Linear(LinearResidualCell { a: -gamma, b: 1.0, h }),
            Cell::Linear(LinearResidualCell { a: 0.0, b: 1.0, h }),
        ],
        upsamplers: vec![Upsampler::Identity],
    }
}

/// Scalar state hierarchy helper for the linear test systems.
pub fn scalar_hierarchy(values: &[f64], device: &candle_core::Device) -> Result<Hierarchy> {
    let levels = values
        .iter()
        .map(|&v| Ok(Tensor::full(v, (1, 1, 1, 1), device)?.to_dtype(DType::F64)?))
        .collect::<Result<Vec<_>>>()?;
    Hierarchy::new(levels)
}
