//! Parameter store and the layer vocabulary shared by every network.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Named trainable tensors with deterministic, seeded initialization.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self { vars: BTreeMap::new(), dtype, device, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self) -> Builder<'_> {
        Builder { store: self, prefix: String::new() }
    }

    fn create(&mut self, name: String, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::Contract(format!("parameter {name} registered twice")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(out)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Variables whose name starts with any of `prefixes`.
    pub fn vars_with_prefix(&self, prefixes: &[&str]) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn all_vars(&self) -> Vec<(String, Var)> {
        self.vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn total_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites every parameter from `tensors`; names and shapes must match exactly.
    pub fn load_from(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?} in checkpoint, model expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        if let Some(extra) = tensors.keys().find(|k| !self.vars.contains_key(*k)) {
            return Err(Error::Config(format!("checkpoint carries unknown parameter {extra}")));
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars.iter().map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?))).collect()
    }
}

/// Hierarchical name scope used while constructing networks.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Builder<'_> {
    pub fn sub(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Builder { store: self.store, prefix }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| self.store.rng.random_range(-bound..=bound)).collect();
        let full = self.full(name);
        self.store.create(full, shape, values)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let full = self.full(name);
        self.store.create(full, shape, vec![value; n])
    }

    pub fn from_values(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        let full = self.full(name);
        self.store.create(full, shape, values)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&(x * 0.1)?)?)
}

/// `log(1 + exp(x))` evaluated without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// `[N, 4C, H, W] -> [N, C, 2H, 2W]`.
pub fn pixel_shuffle2(x: &Tensor) -> Result<Tensor> {
    let (n, c4, h, w) = x.dims4()?;
    let c = c4 / 4;
    let y = x.reshape((n, c, 2, 2, h, w))?.permute((0, 1, 4, 2, 5, 3))?;
    Ok(y.reshape((n, c, 2 * h, 2 * w))?)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        let mut b = b.sub(name);
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        let weight = b.uniform("weight", &[cout, cin, k, k], bound)?;
        let bias = b.uniform("bias", &[cout], bound)?;
        Ok(Self { weight, bias, stride, padding: k / 2 })
    }

    /// Like [`Conv2d::new`] with the init bound multiplied by `scale`.
    pub fn scaled(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize, stride: usize, scale: f64) -> Result<Self> {
        let mut b = b.sub(name);
        let bound = scale / ((cin * k * k) as f64).sqrt();
        let weight = b.uniform("weight", &[cout, cin, k, k], bound)?;
        let bias = b.constant("bias", &[cout], 0.0)?;
        Ok(Self { weight, bias, stride, padding: k / 2 })
    }

    /// Conv layer whose weights and bias start at zero.
    pub fn zeros(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        let mut b = b.sub(name);
        let weight = b.constant("weight", &[cout, cin, k, k], 0.0)?;
        let bias = b.constant("bias", &[cout], 0.0)?;
        Ok(Self { weight, bias, stride, padding: k / 2 })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0).unwrap_or(0)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim(1).unwrap_or(0)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv_bias(x, &self.weight, &self.bias, self.padding, self.stride)
    }
}

pub(crate) fn conv_bias(x: &Tensor, w: &Tensor, bias: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let y = x.conv2d(w, padding, stride, 1, 1)?;
    let c = bias.dim(0)?;
    Ok(y.broadcast_add(&bias.reshape((1, c, 1, 1))?)?)
}

/// `y_i = x_i / sqrt(beta_i + sum_j gamma_ij * x_j^2)` (or `*` for the inverse).
///
/// Inputs are `[N, C, H, W]`, `beta` is `[C]`, `gamma` is `[C, C]`. Bounds are
/// not checked here; see [`crate::contextual_codec::gdn`].
pub fn gdn_raw(x: &Tensor, beta: &Tensor, gamma: &Tensor, inverse: bool) -> Result<Tensor> {
    let c = beta.dim(0)?;
    let norm = x.sqr()?.conv2d(&gamma.reshape((c, c, 1, 1))?, 0, 1, 1, 1)?;
    let norm = norm.broadcast_add(&beta.reshape((1, c, 1, 1))?)?.sqrt()?;
    Ok(if inverse { (x * norm)? } else { (x / norm)? })
}

pub const GDN_BETA_MIN: f64 = 1e-6;

/// GDN / IGDN with `beta = b^2 + beta_min`, `gamma = g^2`.
#[derive(Clone, Debug)]
pub struct Gdn {
    beta_param: Tensor,
    gamma_param: Tensor,
    inverse: bool,
}

impl Gdn {
    pub fn new(b: &mut Builder, name: &str, channels: usize, inverse: bool) -> Result<Self> {
        let mut b = b.sub(name);
        let beta_param = b.constant("beta", &[channels], (1.0 - GDN_BETA_MIN).sqrt())?;
        let gamma: Vec<f64> = (0..channels * channels)
            .map(|i| if i / channels == i % channels { 0.1f64.sqrt() } else { 0.01 })
            .collect();
        let gamma_param = b.from_values("gamma", &[channels, channels], gamma)?;
        Ok(Self { beta_param, gamma_param, inverse })
    }

    pub fn beta(&self) -> Result<Tensor> {
        Ok((self.beta_param.sqr()? + GDN_BETA_MIN)?)
    }

    pub fn gamma(&self) -> Result<Tensor> {
        Ok(self.gamma_param.sqr()?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        gdn_raw(x, &self.beta()?, &self.gamma()?, self.inverse)
    }
}

/// Pre-activation residual block: `x + conv2(lrelu(conv1(lrelu(x))))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Result<Self> {
        let mut b = b.sub(name);
        Ok(Self {
            conv1: Conv2d::new(&mut b, "conv1", channels, channels, 3, 1)?,
            conv2: Conv2d::new(&mut b, "conv2", channels, channels, 3, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&leaky_relu(x)?)?;
        let h = self.conv2.forward(&leaky_relu(&h)?)?;
        Ok((x + h)?)
    }
}

/// 3x3 convolution followed by a 2x pixel shuffle.
#[derive(Clone, Debug)]
pub struct SubpelConv {
    conv: Conv2d,
}

impl SubpelConv {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self { conv: Conv2d::new(b, name, cin, cout * 4, 3, 1)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        pixel_shuffle2(&self.conv.forward(x)?)
    }
}

/// Causal ("type A") masked convolution: the output at raster position `i`
/// only sees inputs at positions strictly before `i`.
#[derive(Clone, Debug)]
pub struct MaskedConv2d {
    weight: Tensor,
    pub bias: Tensor,
    mask: Tensor,
    kernel: usize,
}

impl MaskedConv2d {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Argument(format!("masked conv kernel must be odd, got {kernel}")));
        }
        let mut b = b.sub(name);
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        let weight = b.uniform("weight", &[cout, cin, kernel, kernel], bound)?;
        let bias = b.uniform("bias", &[cout], bound)?;
        let mask = causal_mask(kernel);
        let mask = Tensor::from_vec(mask, (1, 1, kernel, kernel), &b.device())?.to_dtype(b.dtype())?;
        Ok(Self { weight, bias, mask, kernel })
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn masked_weight(&self) -> Result<Tensor> {
        Ok(self.weight.broadcast_mul(&self.mask)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv_bias(x, &self.masked_weight()?, &self.bias, self.kernel / 2, 1)
    }

    /// Output at a single position `(row, col)` of a `[1, C, H, W]` input,
    /// reading only the causal window. Returns `[1, Cout, 1, 1]`.
    pub fn forward_at(&self, x: &Tensor, row: usize, col: usize) -> Result<Tensor> {
        let window = causal_window(x, row, col, self.kernel)?;
        conv_bias(&window, &self.masked_weight()?, &self.bias, 0, 1)
    }
}

/// 1 where the kernel tap precedes the centre in raster order.
pub fn causal_mask(kernel: usize) -> Vec<f64> {
    let centre = kernel / 2;
    (0..kernel * kernel)
        .map(|i| {
            let (r, c) = (i / kernel, i % kernel);
            if r < centre || (r == centre && c < centre) {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// `kernel x kernel` window centred on `(row, col)` with zero padding; taps at
/// or after the centre in raster order are zeroed.
fn causal_window(x: &Tensor, row: usize, col: usize, kernel: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let half = kernel / 2;
    let data: Vec<f64> = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let mut out = vec![0f64; n * c * kernel * kernel];
    for b in 0..n {
        for ch in 0..c {
            for kr in 0..kernel {
                for kc in 0..kernel {
                    if kr > half || (kr == half && kc >= half) {
                        continue;
                    }
                    let (yr, xc) = (row as isize + kr as isize - half as isize, col as isize + kc as isize - half as isize);
                    if yr < 0 || xc < 0 || yr >= h as isize || xc >= w as isize {
                        continue;
                    }
                    out[((b * c + ch) * kernel + kr) * kernel + kc] =
                        data[((b * c + ch) * h + yr as usize) * w + xc as usize];
                }
            }
        }
    }
    Ok(Tensor::from_vec(out, (n, c, kernel, kernel), x.device())?.to_dtype(x.dtype())?)
}

/// Uniform noise in `[-0.5, 0.5)` with the shape/dtype of `like`.
pub fn uniform_noise(like: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    let n = like.elem_count();
    let values: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
    Ok(Tensor::from_vec(values, like.dims(), like.device())?.to_dtype(like.dtype())?)
}

/// Mean over all elements, as a scalar tensor.
pub fn mean_all(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_all()?)
}

/// Per-channel slice `[N, C, H, W] -> [N, 1, H, W]`.
pub fn channel(x: &Tensor, c: usize) -> Result<Tensor> {
    Ok(x.narrow(1, c, 1)?)
}

/// Splits `[N, 2C, H, W]` into two `[N, C, H, W]` halves.
pub fn split_channels(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let c = x.dim(1)? / 2;
    Ok((x.narrow(1, 0, c)?, x.narrow(1, c, c)?))
}

pub fn sum_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.sum_keepdim(D::Minus1)?)
}
