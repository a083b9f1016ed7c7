//! Parameter storage and the small set of layers the networks are built from.
//!
//! Every trainable tensor lives in a [`ParamStore`] under a dotted name such
//! as `enc_state.stage0.weight`. Layers hold clones of their [`Var`]s, which
//! share storage with the store, so optimizer updates through the store are
//! visible to the layers.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

mod unfold;

use unfold::{Col2Im, Geometry, Im2Col};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

pub struct ParamStore {
    device: Device,
    dtype: DType,
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device, seed: u64) -> Self {
        Self {
            device,
            dtype,
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Reseeds the initializer, so parameter groups created afterwards do not
    /// depend on how many parameters were created before.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn scope(&mut self, prefix: &str) -> Scope<'_> {
        Scope {
            store: self,
            prefix: prefix.to_string(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Variables whose names start with any of `prefixes`.
    pub fn select(&self, prefixes: &[&str]) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Detached copies of every parameter.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect()
    }

    /// Overwrites parameters by name. Every tensor must match an existing
    /// parameter's shape; parameters absent from `tensors` are left untouched
    /// unless `require_all` is set.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>, require_all: bool) -> Result<()> {
        for (name, t) in tensors {
            let var = self
                .vars
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{name}`")))?;
            if var.dims() != t.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, checkpoint holds {:?}",
                    var.dims(),
                    t.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        if require_all {
            if let Some(missing) = self.vars.keys().find(|k| !tensors.contains_key(*k)) {
                return Err(Error::Checkpoint(format!("missing parameter `{missing}`")));
            }
        }
        Ok(())
    }

    fn create(&mut self, name: String, shape: &[usize], init: Init) -> Result<Var> {
        if self.vars.contains_key(&name) {
            return Err(Error::validation(format!("duplicate parameter `{name}`")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform(b) => (0..n).map(|_| self.rng.random_range(-b..b)).collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.insert(name, var.clone());
        Ok(var)
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    Uniform(f64),
}

/// Fan-in scaled uniform initialization bound.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Scope<'_> {
    pub fn pp(&mut self, name: &str) -> Scope<'_> {
        Scope {
            prefix: self.join(name),
            store: self.store,
        }
    }

    fn join(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let full = self.join(name);
        self.store.create(full, shape, init)
    }
}

/// Cross-correlation of `(B, C, H, W)` with `(Co, C, k, k)` as one matrix
/// product over unfolded patches. Matches `Tensor::conv2d`, whose CPU
/// backward pass is much slower.
pub fn conv2d(x: &Tensor, weight: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (co, ci, k, k2) = weight.dims4()?;
    if ci != c || k != k2 || stride == 0 || h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::validation(format!(
            "conv2d: input {:?} does not fit kernel {:?}",
            x.dims(),
            weight.dims()
        )));
    }
    let g = Geometry {
        batch: b,
        channels: c,
        height: h,
        width: w,
        kernel: k,
        stride,
        padding,
    };
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    let y = weight.reshape((co, c * k * k))?.matmul(&cols)?;
    Ok(y.reshape((co, b, g.out_h(), g.out_w()))?.transpose(0, 1)?.contiguous()?)
}

/// Transposed convolution with a `(Ci, Co, 4, 4)` kernel, stride 2 and
/// padding 1; the adjoint of the matching strided [`conv2d`].
pub fn conv_transpose2d_k4s2(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (ci, co, k, k2) = weight.dims4()?;
    if ci != c || k != 4 || k2 != 4 {
        return Err(Error::validation(format!(
            "conv_transpose2d: input {:?} does not fit kernel {:?}",
            x.dims(),
            weight.dims()
        )));
    }
    let g = Geometry {
        batch: b,
        channels: co,
        height: 2 * h,
        width: 2 * w,
        kernel: 4,
        stride: 2,
        padding: 1,
    };
    let xm = x.transpose(0, 1)?.contiguous()?.reshape((ci, b * h * w))?;
    let cols = weight.reshape((ci, co * 16))?.t()?.matmul(&xm)?;
    Ok(cols.apply_op1(Col2Im(g))?)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(s: &mut Scope, cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        let bound = fan_in_bound(cin * kernel * kernel);
        Ok(Self {
            weight: s.var("weight", &[cout, cin, kernel, kernel], Init::Uniform(bound))?,
            bias: s.var("bias", &[cout], Init::Zeros)?,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, self.weight.as_tensor(), self.padding, self.stride)?;
        let b = self.bias.as_tensor().reshape((1, self.out_channels(), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

/// Transposed convolution with kernel 4, stride 2, padding 1: exactly doubles
/// the spatial size.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: Var,
    pub bias: Var,
}

impl ConvTranspose2d {
    pub const KERNEL: usize = 4;

    pub fn new(s: &mut Scope, cin: usize, cout: usize) -> Result<Self> {
        let k = Self::KERNEL;
        let bound = fan_in_bound(cout * k * k);
        Ok(Self {
            weight: s.var("weight", &[cin, cout, k, k], Init::Uniform(bound))?,
            bias: s.var("bias", &[cout], Init::Zeros)?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv_transpose2d_k4s2(x, self.weight.as_tensor())?;
        let b = self.bias.as_tensor().reshape((1, self.out_channels(), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(s: &mut Scope, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            weight: s.var("weight", &[cout, cin], Init::Uniform(fan_in_bound(cin)))?,
            bias: s.var("bias", &[cout], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x
            .matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?)
    }
}

/// Per-sample, per-channel normalization over the spatial dims, without
/// affine parameters. Single-pixel maps pass through unchanged.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h * w == 1 {
        return Ok(x.clone());
    }
    let flat = x.reshape((n, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + INSTANCE_NORM_EPS)?.sqrt()?)?;
    Ok(normed.reshape((n, c, h, w))?)
}

pub fn elu(x: &Tensor) -> Result<Tensor> {
    Ok(x.elu(1.0)?)
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&(x * 0.2)?)?)
}

/// `1 / (1 + exp(-x))`; saturates to exactly 0 and 1 for large `|x|`.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// `conv-IN-ELU-conv-IN`, added to the input, then ELU.
#[derive(Clone, Debug)]
pub struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    pub fn new(s: &mut Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&mut s.pp("conv1"), channels, channels, 3, 1, 1)?,
            conv2: Conv2d::new(&mut s.pp("conv2"), channels, channels, 3, 1, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = elu(&instance_norm(&self.conv1.forward(x)?)?)?;
        let h = instance_norm(&self.conv2.forward(&h)?)?;
        elu(&(x + h)?)
    }
}

/// Spatio-temporal convolution over `(B, T, C, H, W)` clips with a temporal
/// kernel of 3 (zero padded) and a square spatial kernel.
#[derive(Clone, Debug)]
pub struct Conv3d {
    taps: Vec<Conv2d>,
}

impl Conv3d {
    pub fn new(s: &mut Scope, cin: usize, cout: usize, kernel: usize, stride: usize) -> Result<Self> {
        let mut taps = Vec::with_capacity(3);
        for t in 0..3 {
            let mut conv = Conv2d::new(&mut s.pp(&format!("tap{t}")), cin, cout, kernel, stride, kernel / 2)?;
            // One shared bias, carried by the center tap.
            if t != 1 {
                conv.bias = Var::from_tensor(&conv.bias.as_tensor().zeros_like()?)?;
            }
            taps.push(conv);
        }
        Ok(Self { taps })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, c, h, w) = x.dims5()?;
        let frames = x.reshape((b * t, c, h, w))?;
        let mut out: Option<Tensor> = None;
        for (j, tap) in self.taps.iter().enumerate() {
            let y = tap.forward(&frames)?;
            let (_, co, ho, wo) = y.dims4()?;
            let y = y.reshape((b, t, co, ho, wo))?;
            // Output step i reads input step i + j - 1.
            let shifted = match j {
                0 => y.narrow(1, 0, t - 1)?.pad_with_zeros(1, 1, 0)?,
                1 => y,
                _ => y.narrow(1, 1, t - 1)?.pad_with_zeros(1, 0, 1)?,
            };
            out = Some(match out {
                None => shifted,
                Some(acc) => (acc + shifted)?,
            });
        }
        Ok(out.expect("three taps"))
    }
}

/// Instance norm applied frame-wise to `(B, T, C, H, W)` clips.
pub fn instance_norm_video(x: &Tensor) -> Result<Tensor> {
    let (b, t, c, h, w) = x.dims5()?;
    Ok(instance_norm(&x.reshape((b * t, c, h, w))?)?.reshape((b, t, c, h, w))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        ParamStore::new(DType::F64, Device::Cpu, 7)
    }

    #[test]
    fn scoped_names_are_dotted() {
        let mut st = store();
        Conv2d::new(&mut st.scope("enc").pp("stage0"), 3, 4, 3, 2, 1).unwrap();
        let names: Vec<_> = st.names().cloned().collect();
        assert_eq!(names, vec!["enc.stage0.bias", "enc.stage0.weight"]);
    }

    #[test]
    fn identical_seeds_give_identical_parameters() {
        let mut a = store();
        let mut b = store();
        let ca = Conv2d::new(&mut a.scope("c"), 2, 2, 3, 1, 1).unwrap();
        let cb = Conv2d::new(&mut b.scope("c"), 2, 2, 3, 1, 1).unwrap();
        let va = ca.weight.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let vb = cb.weight.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(va, vb);
    }

    #[test]
    fn stride_two_conv_halves_and_transpose_doubles() {
        let mut st = store();
        let down = Conv2d::new(&mut st.scope("d"), 3, 8, 3, 2, 1).unwrap();
        let up = ConvTranspose2d::new(&mut st.scope("u"), 8, 4).unwrap();
        let x = Tensor::zeros((2, 3, 16, 16), DType::F64, &Device::Cpu).unwrap();
        let y = down.forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 8, 8, 8]);
        assert_eq!(up.forward(&y).unwrap().dims(), &[2, 4, 16, 16]);
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn lowered_convolutions_match_candle() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (3, 5, 8, 6), &dev).unwrap();
        for (k, pad, stride) in [(3, 1, 1), (3, 1, 2), (1, 0, 1), (4, 1, 2), (3, 0, 1), (5, 2, 2)] {
            let w = Tensor::randn(0f64, 1.0, (4, 5, k, k), &dev).unwrap();
            let want = x.conv2d(&w, pad, stride, 1, 1).unwrap();
            let got = conv2d(&x, &w, pad, stride).unwrap();
            assert_eq!(got.dims(), want.dims(), "k{k} p{pad} s{stride}");
            assert!(max_abs_diff(&got, &want) < 1e-12, "k{k} p{pad} s{stride}");
        }
        let wt = Tensor::randn(0f64, 1.0, (5, 2, 4, 4), &dev).unwrap();
        let want = x.conv_transpose2d(&wt, 1, 0, 2, 1).unwrap();
        let got = conv_transpose2d_k4s2(&x, &wt).unwrap();
        assert_eq!(got.dims(), &[3, 2, 16, 12]);
        assert!(max_abs_diff(&got, &want) < 1e-12);
    }

    #[test]
    fn lowered_convolution_gradients_match_candle() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 3, 6, 6), &dev).unwrap()).unwrap();
        let w = Var::from_tensor(&Tensor::randn(0f64, 1.0, (4, 3, 3, 3), &dev).unwrap()).unwrap();
        let wt = Var::from_tensor(&Tensor::randn(0f64, 1.0, (4, 2, 4, 4), &dev).unwrap()).unwrap();
        let probe = Tensor::randn(0f64, 1.0, (2, 2, 6, 6), &dev).unwrap();
        let loss = |ours: bool| {
            let h = if ours {
                conv2d(x.as_tensor(), w.as_tensor(), 1, 2).unwrap()
            } else {
                x.as_tensor().conv2d(w.as_tensor(), 1, 2, 1, 1).unwrap()
            };
            let y = if ours {
                conv_transpose2d_k4s2(&h, wt.as_tensor()).unwrap()
            } else {
                h.conv_transpose2d(wt.as_tensor(), 1, 0, 2, 1).unwrap()
            };
            (y * &probe).unwrap().sum_all().unwrap().backward().unwrap()
        };
        let (a, b) = (loss(true), loss(false));
        for v in [&x, &w, &wt] {
            let d = max_abs_diff(a.get(v).unwrap(), b.get(v).unwrap());
            assert!(d < 1e-10, "{d}");
        }
    }

    #[test]
    fn instance_norm_standardizes_each_map() {
        let x = Tensor::arange(0f64, 32.0, &Device::Cpu).unwrap().reshape((1, 2, 4, 4)).unwrap();
        let y = instance_norm(&x).unwrap();
        let m = y.mean_keepdim(D::Minus1).unwrap().mean_keepdim(D::Minus2).unwrap();
        let m = m.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(m.iter().all(|v| v.abs() < 1e-12));
        let var = y.sqr().unwrap().mean_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn sigmoid_saturates_exactly() {
        let x = Tensor::new(&[-1000f64, 0.0, 1000.0], &Device::Cpu).unwrap();
        let y = sigmoid(&x).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(y, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn conv3d_preserves_time_and_mixes_neighbours() {
        let mut st = store();
        let conv = Conv3d::new(&mut st.scope("v"), 2, 3, 3, 2).unwrap();
        let x = Tensor::randn(0f64, 1.0, (1, 5, 2, 8, 8), &Device::Cpu).unwrap();
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.dims(), &[1, 5, 3, 4, 4]);
        // Perturbing frame 4 must not change output 2 (temporal kernel 3).
        let mut frames: Vec<Tensor> = (0..5).map(|t| x.get(0).unwrap().get(t).unwrap()).collect();
        frames[4] = (frames[4].clone() + 1.0).unwrap();
        let x2 = Tensor::stack(&frames, 0).unwrap().unsqueeze(0).unwrap();
        let y2 = conv.forward(&x2).unwrap();
        let d2 = (y.get(0).unwrap().get(2).unwrap() - y2.get(0).unwrap().get(2).unwrap())
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        let d3 = (y.get(0).unwrap().get(3).unwrap() - y2.get(0).unwrap().get(3).unwrap())
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert_eq!(d2, 0.0);
        assert!(d3 > 0.0);
    }
}
