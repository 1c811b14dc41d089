//! Entropy modeling of quantized latents.
//!
//! Each latent element is modeled as a Laplace distribution convolved with a
//! unit uniform, so the probability of integer `k` is
//! `F(k + 1/2) - F(k - 1/2)`, where `F` is the Laplace CDF with location `mu` and
//! **scale** `sigma`. The parameters come from a fusion network that consumes
//! up to three priors:
//!
//! * the hyper prior, decoded from side-channel latents `z`,
//! * a spatial prior, a causal masked convolution over already-decoded latents,
//! * a temporal prior, a strided encoder over the conditioning context.
//!
//! Hyper latents use a per-channel learned factorized (non-parametric,
//! monotone CDF) model.
//!
//! When the spatial prior is active, `(mu, sigma)` for coding are computed
//! position by position with [`LatentEntropyModel::params_at`] on both encoder
//! and decoder, so both sides evaluate bit-identical arithmetic. Without it
//! all parameters come from one parallel pass.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bitstream::cdf::{build_cdf, CdfTable};
use crate::bitstream::range_coder::{RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};
use crate::contextual_codec::QuantizeMode;
use crate::nn::{leaky_relu, sigmoid, softplus, split_channels, uniform_noise, Builder, Conv2d, Gdn, MaskedConv2d, SubpelConv};
use crate::quant::{round_canonical, round_half_away, ste_round};

/// Lower bound on the Laplace scale.
pub const SIGMA_MIN: f64 = 0.01;
/// Minimum half-width of a coding table.
pub const MIN_SYMBOL_RANGE: i64 = 32;
/// Largest half-width accepted in a bitstream.
pub const MAX_SYMBOL_RANGE: i64 = 16_000;
/// Floor applied to training-time likelihoods.
pub const LIKELIHOOD_BOUND: f64 = 1e-9;

/// Which priors feed the fusion network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyMode {
    HyperSpatialTemporal,
    HyperTemporal,
    HyperSpatial,
    HyperOnly,
}

impl EntropyMode {
    pub const ALL: [EntropyMode; 4] =
        [EntropyMode::HyperSpatialTemporal, EntropyMode::HyperTemporal, EntropyMode::HyperSpatial, EntropyMode::HyperOnly];

    pub fn uses_spatial(self) -> bool {
        matches!(self, EntropyMode::HyperSpatialTemporal | EntropyMode::HyperSpatial)
    }

    pub fn uses_temporal(self) -> bool {
        matches!(self, EntropyMode::HyperSpatialTemporal | EntropyMode::HyperTemporal)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EntropyMode::HyperSpatialTemporal => "hyper_spatial_temporal",
            EntropyMode::HyperTemporal => "hyper_temporal",
            EntropyMode::HyperSpatial => "hyper_spatial",
            EntropyMode::HyperOnly => "hyper_only",
        }
    }

    pub fn to_byte(self) -> u8 {
        match self {
            EntropyMode::HyperSpatialTemporal => 0,
            EntropyMode::HyperTemporal => 1,
            EntropyMode::HyperSpatial => 2,
            EntropyMode::HyperOnly => 3,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        Self::ALL.get(b as usize).copied()
    }
}

impl fmt::Display for EntropyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntropyMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown entropy mode {s}")))
    }
}

// ---------------------------------------------------------------------------
// Closed-form Laplace evaluation (host side, f64)

/// Laplace CDF with location `mu` and scale `b`.
pub fn laplace_cdf(x: f64, mu: f64, b: f64) -> f64 {
    let t = (x - mu) / b;
    if t < 0.0 {
        0.5 * t.exp()
    } else {
        1.0 - 0.5 * (-t).exp()
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma >= SIGMA_MIN) {
        return Err(Error::Parameter(format!("Laplace scale {sigma} below the bound {SIGMA_MIN}")));
    }
    Ok(())
}

/// Probability of integer `k` under the discretized Laplace(mu, sigma), no folding.
pub fn laplace_mass(k: i64, mu: f64, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    Ok(interval_mass(k as f64 - 0.5, k as f64 + 0.5, mu, sigma))
}

/// `F(hi) - F(lo)`, evaluated on the side of `mu` that avoids cancellation.
fn interval_mass(lo: f64, hi: f64, mu: f64, b: f64) -> f64 {
    if lo >= mu {
        0.5 * ((-(lo - mu) / b).exp() - (-(hi - mu) / b).exp())
    } else if hi <= mu {
        0.5 * (((hi - mu) / b).exp() - ((lo - mu) / b).exp())
    } else {
        laplace_cdf(hi, mu, b) - laplace_cdf(lo, mu, b)
    }
}

/// Masses over `[center - r, center + r]`, tails folded into the edge symbols.
pub fn laplace_folded(mu: f64, sigma: f64, center: i64, r: i64) -> Result<Vec<f64>> {
    check_sigma(sigma)?;
    let n = (2 * r + 1) as usize;
    let mut out = Vec::with_capacity(n);
    for i in 0..n as i64 {
        let k = (center - r + i) as f64;
        let lo = if i == 0 { f64::NEG_INFINITY } else { k - 0.5 };
        let hi = if i == 2 * r { f64::INFINITY } else { k + 0.5 };
        let m = match (lo.is_finite(), hi.is_finite()) {
            (false, true) => laplace_cdf(hi, mu, sigma),
            (true, false) => 1.0 - laplace_cdf(lo, mu, sigma),
            (false, false) => 1.0,
            (true, true) => interval_mass(lo, hi, mu, sigma),
        };
        out.push(m);
    }
    Ok(out)
}

/// Per-element Laplace parameters on a `[C, H, W]` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub shape: [usize; 3],
}

impl EntropyParams {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>, shape: [usize; 3]) -> Result<Self> {
        let n = shape.iter().product::<usize>();
        if mu.len() != n || sigma.len() != n {
            return Err(Error::Argument("entropy parameter shape mismatch".into()));
        }
        if let Some(s) = sigma.iter().find(|s| !(**s >= SIGMA_MIN)) {
            return Err(Error::Parameter(format!("sigma {s} below {SIGMA_MIN}")));
        }
        Ok(Self { mu, sigma, shape })
    }

    /// From `[1, C, H, W]` tensors.
    pub fn from_tensors(mu: &Tensor, sigma: &Tensor) -> Result<Self> {
        let (_, c, h, w) = mu.dims4()?;
        let mu: Vec<f64> = mu.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let sigma: Vec<f64> = sigma.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        Self::new(mu, sigma, [c, h, w])
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn centers(&self) -> Vec<i64> {
        self.mu.iter().map(|&m| round_half_away(m) as i64).collect()
    }
}

/// Per-element folded probability tables.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityTable {
    /// Smallest symbol of each element's table.
    pub offsets: Vec<i64>,
    pub masses: Vec<Vec<f64>>,
}

impl ProbabilityTable {
    /// Laplace tables centred on `round(mu)` with half-width `r`.
    pub fn laplace(params: &EntropyParams, r: i64) -> Result<Self> {
        let mut offsets = Vec::with_capacity(params.len());
        let mut masses = Vec::with_capacity(params.len());
        for (&mu, &sigma) in params.mu.iter().zip(&params.sigma) {
            let c = round_half_away(mu) as i64;
            offsets.push(c - r);
            masses.push(laplace_folded(mu, sigma, c, r)?);
        }
        Ok(Self { offsets, masses })
    }

    pub fn mass(&self, element: usize, symbol: i64) -> Option<f64> {
        let i = symbol - self.offsets[element];
        (i >= 0).then(|| self.masses[element].get(i as usize).copied()).flatten()
    }

    pub fn cdfs(&self) -> Result<Vec<CdfTable>> {
        self.masses.iter().map(|m| build_cdf(m)).collect()
    }
}

/// Ideal code length `sum -log2 p(symbol)` under the folded Laplace model.
pub fn estimate_rate(symbols: &[i64], params: &EntropyParams) -> Result<f64> {
    if symbols.len() != params.len() {
        return Err(Error::Argument("symbol count does not match parameters".into()));
    }
    let r = symbol_range(symbols, &params.centers());
    let table = ProbabilityTable::laplace(params, r)?;
    let mut bits = 0.0;
    for (i, &s) in symbols.iter().enumerate() {
        let m = table.mass(i, s).expect("range covers every symbol");
        bits -= m.log2();
    }
    Ok(bits)
}

/// Half-width covering every `|symbol - center|`, never below [`MIN_SYMBOL_RANGE`].
pub fn symbol_range(symbols: &[i64], centers: &[i64]) -> i64 {
    symbols.iter().zip(centers).map(|(s, c)| (s - c).abs()).max().unwrap_or(0).max(MIN_SYMBOL_RANGE)
}

// ---------------------------------------------------------------------------
// Differentiable rate terms

/// Discretized Laplace likelihood of `y` (any shape), floored at [`LIKELIHOOD_BOUND`].
///
/// Uses `F(x) = (exp(min(t, 0)) - exp(-max(t, 0)) + 1) / 2` with `t = (x - mu) / sigma`.
pub fn laplace_likelihood(y: &Tensor, mu: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    let centred = (y - mu)?;
    let upper = ((&centred + 0.5)? / sigma)?;
    let lower = ((&centred - 0.5)? / sigma)?;
    let half_cdf = |t: &Tensor| -> Result<Tensor> {
        let neg = t.relu()?.neg()?.exp()?;
        let pos = t.neg()?.relu()?.neg()?.exp()?;
        Ok((pos - neg)?)
    };
    let lik = ((half_cdf(&upper)? - half_cdf(&lower)?)? * 0.5)?;
    Ok(lik.maximum(LIKELIHOOD_BOUND)?)
}

/// `-sum log2(likelihood)` as a scalar tensor.
pub fn bits_of(likelihood: &Tensor) -> Result<Tensor> {
    Ok((likelihood.log()?.sum_all()? * (-1.0 / std::f64::consts::LN_2))?)
}

// ---------------------------------------------------------------------------
// Networks

/// `[N, C, H/16, W/16] -> [N, Cz, H/64, W/64]`.
#[derive(Clone, Debug)]
pub struct HyperEncoder {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
}

impl HyperEncoder {
    pub fn new(b: &mut Builder, latent: usize, hyper: usize) -> Result<Self> {
        let mut b = b.sub("hyper_encoder");
        Ok(Self {
            c1: Conv2d::new(&mut b, "c1", latent, hyper, 3, 1)?,
            c2: Conv2d::new(&mut b, "c2", hyper, hyper, 5, 2)?,
            c3: Conv2d::new(&mut b, "c3", hyper, hyper, 5, 2)?,
        })
    }

    pub fn forward(&self, y: &Tensor) -> Result<Tensor> {
        let h = leaky_relu(&self.c1.forward(y)?)?;
        let h = leaky_relu(&self.c2.forward(&h)?)?;
        self.c3.forward(&h)
    }
}

/// `[N, Cz, H/64, W/64] -> [N, 2C, H/16, W/16]`.
#[derive(Clone, Debug)]
pub struct HyperDecoder {
    d1: SubpelConv,
    d2: SubpelConv,
    c3: Conv2d,
}

impl HyperDecoder {
    pub fn new(b: &mut Builder, latent: usize, hyper: usize) -> Result<Self> {
        let mut b = b.sub("hyper_decoder");
        let mid = latent * 3 / 2;
        Ok(Self {
            d1: SubpelConv::new(&mut b, "d1", hyper, hyper)?,
            d2: SubpelConv::new(&mut b, "d2", hyper, mid)?,
            c3: Conv2d::new(&mut b, "c3", mid, 2 * latent, 3, 1)?,
        })
    }

    pub fn forward(&self, z_hat: &Tensor) -> Result<Tensor> {
        let h = leaky_relu(&self.d1.forward(z_hat)?)?;
        let h = leaky_relu(&self.d2.forward(&h)?)?;
        self.c3.forward(&h)
    }
}

/// Four stride-2 5x5 convolutions with GDN, bringing the context to the latent grid.
#[derive(Clone, Debug)]
pub struct TemporalPriorEncoder {
    convs: Vec<Conv2d>,
    gdns: Vec<Gdn>,
}

impl TemporalPriorEncoder {
    pub fn new(b: &mut Builder, context: usize, hidden: usize, out: usize) -> Result<Self> {
        let mut b = b.sub("temporal_prior");
        let widths = [context, hidden, hidden, hidden, out];
        let mut convs = Vec::new();
        let mut gdns = Vec::new();
        for i in 0..4 {
            convs.push(Conv2d::new(&mut b, &format!("conv{i}"), widths[i], widths[i + 1], 5, 2)?);
            if i < 3 {
                gdns.push(Gdn::new(&mut b, &format!("gdn{i}"), widths[i + 1], false)?);
            }
        }
        Ok(Self { convs, gdns })
    }

    pub fn in_channels(&self) -> usize {
        self.convs[0].in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.convs[3].out_channels()
    }

    pub fn forward(&self, ctx: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = ctx.dims4()?;
        if c != self.in_channels() || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Argument(format!(
                "temporal prior expects [{}, 16k, 16k] input, got [{c}, {h}, {w}]",
                self.in_channels()
            )));
        }
        let mut x = ctx.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x)?;
            if let Some(g) = self.gdns.get(i) {
                x = g.forward(&x)?;
            }
        }
        Ok(x)
    }

    /// Zeroes all biases (used to check that a zero context maps to a zero prior).
    pub fn zero_biases(&mut self) -> Result<()> {
        for c in &mut self.convs {
            c.bias = c.bias.zeros_like()?;
        }
        Ok(())
    }
}

/// 1x1 convolution stack mapping concatenated priors to `(mu, sigma)`.
///
/// 1x1 kernels keep the spatial prior causal: the parameters at position `i`
/// read only the priors at `i`.
#[derive(Clone, Debug)]
pub struct PriorFusion {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    mode: EntropyMode,
}

impl PriorFusion {
    pub fn new(b: &mut Builder, mode: EntropyMode, input: usize, hidden: usize, latent: usize) -> Result<Self> {
        let mut b = b.sub(mode.as_str());
        Ok(Self {
            c1: Conv2d::new(&mut b, "c1", input, hidden, 1, 1)?,
            c2: Conv2d::new(&mut b, "c2", hidden, hidden, 1, 1)?,
            c3: Conv2d::new(&mut b, "c3", hidden, 2 * latent, 1, 1)?,
            mode,
        })
    }

    pub fn mode(&self) -> EntropyMode {
        self.mode
    }

    /// Returns `(mu, sigma)` with `sigma = SIGMA_MIN + softplus(.)`.
    pub fn forward(&self, fused: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = leaky_relu(&self.c1.forward(fused)?)?;
        let h = leaky_relu(&self.c2.forward(&h)?)?;
        let (mu, raw) = split_channels(&self.c3.forward(&h)?)?;
        let sigma = (softplus(&raw)? + SIGMA_MIN)?;
        Ok((mu, sigma))
    }
}

/// Per-channel learned monotone CDF for hyper latents.
#[derive(Clone, Debug)]
pub struct FactorizedPrior {
    matrices: Vec<Tensor>,
    biases: Vec<Tensor>,
    factors: Vec<Tensor>,
    channels: usize,
}

const FACTORIZED_FILTERS: [usize; 4] = [3, 3, 3, 3];
const FACTORIZED_INIT_SCALE: f64 = 10.0;

impl FactorizedPrior {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Result<Self> {
        let mut b = b.sub(name);
        let mut dims = vec![1];
        dims.extend(FACTORIZED_FILTERS);
        dims.push(1);
        let layers = dims.len() - 1;
        let scale = FACTORIZED_INIT_SCALE.powf(1.0 / layers as f64);
        let mut matrices = Vec::new();
        let mut biases = Vec::new();
        let mut factors = Vec::new();
        for i in 0..layers {
            let (fin, fout) = (dims[i], dims[i + 1]);
            let init = (1.0 / scale / fout as f64).exp_m1().ln();
            matrices.push(b.constant(&format!("matrix{i}"), &[channels, fout, fin], init)?);
            biases.push(b.uniform(&format!("bias{i}"), &[channels, fout, 1], 0.5)?);
            if i + 1 < layers {
                factors.push(b.constant(&format!("factor{i}"), &[channels, fout, 1], 0.0)?);
            }
        }
        Ok(Self { matrices, biases, factors, channels })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Cumulative logits for `x` of shape `[C, 1, M]`.
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, m) in self.matrices.iter().enumerate() {
            h = softplus(m)?.matmul(&h)?.broadcast_add(&self.biases[i])?;
            if let Some(f) = self.factors.get(i) {
                h = (&h + f.tanh()?.broadcast_mul(&h.tanh()?)?)?;
            }
        }
        Ok(h)
    }

    /// Likelihood of `[N, C, H, W]` values, floored at [`LIKELIHOOD_BOUND`].
    pub fn likelihood(&self, z: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = z.dims4()?;
        if c != self.channels {
            return Err(Error::Argument(format!("factorized prior has {} channels, got {c}", self.channels)));
        }
        let flat = z.permute((1, 0, 2, 3))?.reshape((c, 1, n * h * w))?;
        let lower = self.logits(&(&flat - 0.5)?)?;
        let upper = self.logits(&(&flat + 0.5)?)?;
        let sign = (&lower + &upper)?.sign()?.neg()?.detach();
        let lik = (sigmoid(&(&sign * &upper)?)? - sigmoid(&(&sign * &lower)?)?)?.abs()?;
        let lik = lik.maximum(LIKELIHOOD_BOUND)?;
        Ok(lik.reshape((c, n, h, w))?.permute((1, 0, 2, 3))?)
    }

    /// CDF evaluated at `k + 1/2` for `k` in `[-r, r)`; returns `[C][2r]`.
    pub fn cdf_points(&self, r: i64) -> Result<Vec<Vec<f64>>> {
        let points: Vec<f64> = (-r..r).map(|k| k as f64 + 0.5).collect();
        let m = points.len();
        let dev = self.matrices[0].device();
        let x = Tensor::from_vec(points, (1, 1, m), dev)?
            .to_dtype(self.matrices[0].dtype())?
            .broadcast_as((self.channels, 1, m))?
            .contiguous()?;
        let cdf = sigmoid(&self.logits(&x)?)?.to_dtype(DType::F64)?.reshape((self.channels, m))?;
        Ok(cdf.to_vec2()?)
    }

    /// Folded per-channel tables over `[-r, r]`.
    pub fn tables(&self, r: i64) -> Result<Vec<Vec<f64>>> {
        let cdf = self.cdf_points(r)?;
        Ok(cdf
            .into_iter()
            .map(|f| {
                let mut masses = Vec::with_capacity(f.len() + 1);
                masses.push(f[0]);
                for w in f.windows(2) {
                    masses.push((w[1] - w[0]).max(0.0));
                }
                masses.push((1.0 - f[f.len() - 1]).max(0.0));
                masses
            })
            .collect())
    }
}

/// Folded per-element probability table of hyper latents `[C, H, W]`.
pub fn factorized_mass(z_hat: &[i64], shape: [usize; 3], prior: &FactorizedPrior) -> Result<ProbabilityTable> {
    let [c, h, w] = shape;
    if c != prior.channels() || z_hat.len() != c * h * w {
        return Err(Error::Argument("hyper latent shape does not match the factorized prior".into()));
    }
    let r = z_hat.iter().map(|v| v.abs()).max().unwrap_or(0).max(MIN_SYMBOL_RANGE);
    let per_channel = prior.tables(r)?;
    let mut offsets = Vec::with_capacity(z_hat.len());
    let mut masses = Vec::with_capacity(z_hat.len());
    for ch in 0..c {
        for _ in 0..h * w {
            offsets.push(-r);
            masses.push(per_channel[ch].clone());
        }
    }
    Ok(ProbabilityTable { offsets, masses })
}

// ---------------------------------------------------------------------------
// Full latent entropy model

/// Training-time outputs of [`LatentEntropyModel::forward_train`].
pub struct LatentTrainOutput {
    /// Straight-through rounded latents (feed the synthesis transform).
    pub y_hat: Tensor,
    pub y_likelihood: Tensor,
    pub z_likelihood: Tensor,
    pub mu: Tensor,
    pub sigma: Tensor,
}

/// Hyper prior + optional spatial/temporal priors for one latent tensor.
#[derive(Clone, Debug)]
pub struct LatentEntropyModel {
    pub hyper_encoder: HyperEncoder,
    pub hyper_decoder: HyperDecoder,
    pub spatial: Option<MaskedConv2d>,
    pub temporal: Option<TemporalPriorEncoder>,
    pub heads: BTreeMap<EntropyMode, PriorFusion>,
    pub factorized: FactorizedPrior,
    latent: usize,
    hyper: usize,
}

pub const SPATIAL_KERNEL: usize = 5;

/// Widths of a [`LatentEntropyModel`].
#[derive(Clone, Copy, Debug)]
pub struct EntropyWidths {
    pub latent: usize,
    pub hyper: usize,
    /// `(context channels, hidden width, output channels)` of the temporal prior.
    pub temporal: Option<(usize, usize, usize)>,
    pub fusion_hidden: usize,
}

impl LatentEntropyModel {
    /// Builds the model with one fusion head per entry of `modes`.
    pub fn new(b: &mut Builder, widths: EntropyWidths, modes: &[EntropyMode]) -> Result<Self> {
        let EntropyWidths { latent, hyper, temporal, fusion_hidden } = widths;
        let needs_spatial = modes.iter().any(|m| m.uses_spatial());
        let needs_temporal = modes.iter().any(|m| m.uses_temporal());
        if needs_temporal && temporal.is_none() {
            return Err(Error::Config("temporal entropy modes require a temporal prior".into()));
        }
        let hyper_encoder = HyperEncoder::new(b, latent, hyper)?;
        let hyper_decoder = HyperDecoder::new(b, latent, hyper)?;
        let spatial = if needs_spatial {
            Some(MaskedConv2d::new(b, "spatial_prior", latent, 2 * latent, SPATIAL_KERNEL)?)
        } else {
            None
        };
        let temporal_enc = match temporal {
            Some((c, h, o)) if needs_temporal => Some(TemporalPriorEncoder::new(b, c, h, o)?),
            _ => None,
        };
        let mut heads = BTreeMap::new();
        {
            let mut fb = b.sub("prior_fusion");
            for &m in modes {
                let mut input = 2 * latent;
                if m.uses_spatial() {
                    input += 2 * latent;
                }
                if m.uses_temporal() {
                    input += temporal.map(|t| t.2).unwrap_or(0);
                }
                heads.insert(m, PriorFusion::new(&mut fb, m, input, fusion_hidden, latent)?);
            }
        }
        let factorized = FactorizedPrior::new(b, "factorized", hyper)?;
        Ok(Self { hyper_encoder, hyper_decoder, spatial, temporal: temporal_enc, heads, factorized, latent, hyper })
    }

    pub fn latent_channels(&self) -> usize {
        self.latent
    }

    pub fn hyper_channels(&self) -> usize {
        self.hyper
    }

    pub fn modes(&self) -> Vec<EntropyMode> {
        self.heads.keys().copied().collect()
    }

    fn head(&self, mode: EntropyMode) -> Result<&PriorFusion> {
        self.heads.get(&mode).ok_or_else(|| Error::Config(format!("model has no fusion head for entropy mode {mode}")))
    }

    pub fn hyper_encode(&self, y: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = y.dims4()?;
        if c != self.latent || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Argument(format!(
                "hyper encoder expects [{}, 4k, 4k] latents, got [{c}, {h}, {w}]",
                self.latent
            )));
        }
        self.hyper_encoder.forward(y)
    }

    pub fn hyper_decode(&self, z_hat: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = z_hat.dims4()?;
        if c != self.hyper {
            return Err(Error::Argument(format!("hyper decoder expects {} channels, got {c}", self.hyper)));
        }
        self.hyper_decoder.forward(z_hat)
    }

    pub fn temporal_prior(&self, ctx: &Tensor) -> Result<Tensor> {
        self.temporal
            .as_ref()
            .ok_or_else(|| Error::Config("model has no temporal prior encoder".into()))?
            .forward(ctx)
    }

    pub fn spatial_prior(&self, y_hat: &Tensor) -> Result<Tensor> {
        self.spatial.as_ref().ok_or_else(|| Error::Config("model has no spatial prior".into()))?.forward(y_hat)
    }

    /// Fuses the priors consumed by `mode`; unused priors are ignored.
    pub fn fuse_priors(
        &self,
        hyper: &Tensor,
        spatial: Option<&Tensor>,
        temporal: Option<&Tensor>,
        mode: EntropyMode,
    ) -> Result<(Tensor, Tensor)> {
        let mut parts = vec![hyper.clone()];
        if mode.uses_spatial() {
            parts.push(spatial.ok_or_else(|| Error::Config(format!("mode {mode} needs the spatial prior")))?.clone());
        }
        if mode.uses_temporal() {
            parts.push(temporal.ok_or_else(|| Error::Config(format!("mode {mode} needs the temporal prior")))?.clone());
        }
        let (_, _, h, w) = hyper.dims4()?;
        for p in &parts {
            let (_, _, ph, pw) = p.dims4()?;
            if (ph, pw) != (h, w) {
                return Err(Error::Argument("prior spatial dimensions disagree".into()));
            }
        }
        self.head(mode)?.forward(&Tensor::cat(&parts, 1)?)
    }

    /// Relaxed forward pass: noise for rates, straight-through rounding for
    /// everything that feeds a synthesis transform or a causal prior.
    pub fn forward_train(
        &self,
        y: &Tensor,
        temporal: Option<&Tensor>,
        mode: EntropyMode,
        rng: &mut impl Rng,
    ) -> Result<LatentTrainOutput> {
        self.forward_relaxed(y, temporal, mode, QuantizeMode::Round, rng)
    }

    /// As [`forward_train`](Self::forward_train); with [`QuantizeMode::Noise`]
    /// the noisy latents also replace the rounded ones, making the whole
    /// pass differentiable.
    pub fn forward_relaxed(
        &self,
        y: &Tensor,
        temporal: Option<&Tensor>,
        mode: EntropyMode,
        quantize: QuantizeMode,
        rng: &mut impl Rng,
    ) -> Result<LatentTrainOutput> {
        let z = self.hyper_encode(y)?;
        let z_noisy = (&z + uniform_noise(&z, rng)?)?;
        let z_likelihood = self.factorized.likelihood(&z_noisy)?;
        let y_noisy = (y + uniform_noise(y, rng)?)?;
        let (z_hat, y_hat) = match quantize {
            QuantizeMode::Round => (ste_round(&z)?, ste_round(y)?),
            QuantizeMode::Noise => (z_noisy, y_noisy.clone()),
        };
        let hyper = self.hyper_decode(&z_hat)?;
        let spatial = if mode.uses_spatial() { Some(self.spatial_prior(&y_hat)?) } else { None };
        let (mu, sigma) = self.fuse_priors(&hyper, spatial.as_ref(), temporal, mode)?;
        let y_likelihood = laplace_likelihood(&y_noisy, &mu, &sigma)?;
        Ok(LatentTrainOutput { y_hat, y_likelihood, z_likelihood, mu, sigma })
    }

    /// `(mu, sigma)` at one latent position, reading only causal entries of `y_hat`.
    pub fn params_at(
        &self,
        y_hat: &Tensor,
        hyper: &Tensor,
        temporal: Option<&Tensor>,
        mode: EntropyMode,
        row: usize,
        col: usize,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let at = |t: &Tensor| -> Result<Tensor> { Ok(t.narrow(2, row, 1)?.narrow(3, col, 1)?) };
        let spatial = match &self.spatial {
            Some(s) if mode.uses_spatial() => Some(s.forward_at(y_hat, row, col)?),
            _ => None,
        };
        let temporal = temporal.map(at).transpose()?;
        let (mu, sigma) = self.fuse_priors(&at(hyper)?, spatial.as_ref(), temporal.as_ref(), mode)?;
        Ok((
            mu.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?,
            sigma.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?,
        ))
    }

    /// Parameters of every element for coding. With a spatial prior this is
    /// the position-by-position routine the decoder mirrors.
    pub fn coding_params(
        &self,
        y_hat: &Tensor,
        hyper: &Tensor,
        temporal: Option<&Tensor>,
        mode: EntropyMode,
    ) -> Result<EntropyParams> {
        let (_, c, h, w) = y_hat.dims4()?;
        if !mode.uses_spatial() {
            let (mu, sigma) = self.fuse_priors(hyper, None, temporal, mode)?;
            return EntropyParams::from_tensors(&mu, &sigma);
        }
        let mut mu = vec![0.0; c * h * w];
        let mut sigma = vec![0.0; c * h * w];
        for row in 0..h {
            for col in 0..w {
                let (m, s) = self.params_at(y_hat, hyper, temporal, mode, row, col)?;
                for ch in 0..c {
                    mu[(ch * h + row) * w + col] = m[ch];
                    sigma[(ch * h + row) * w + col] = s[ch];
                }
            }
        }
        EntropyParams::new(mu, sigma, [c, h, w])
    }

    /// Codes rounded latents `y_hat` (`[1, C, h, w]`) and hyper latents
    /// derived from `y`. Returns `(y substream, z substream)`.
    pub fn compress(
        &self,
        y: &Tensor,
        y_hat: &Tensor,
        temporal: Option<&Tensor>,
        mode: EntropyMode,
    ) -> Result<(Vec<u8>, Vec<u8>)> {
        let z_hat = round_canonical(&self.hyper_encode(y)?)?;
        self.compress_quantized(y_hat, &z_hat, temporal, mode)
    }

    /// Codes already quantized latents and hyper latents.
    pub fn compress_quantized(
        &self,
        y_hat: &Tensor,
        z_hat: &Tensor,
        temporal: Option<&Tensor>,
        mode: EntropyMode,
    ) -> Result<(Vec<u8>, Vec<u8>)> {
        let (_, zc, zh, zw) = z_hat.dims4()?;
        let z_sym = to_i64(z_hat)?;
        let z_table = factorized_mass(&z_sym, [zc, zh, zw], &self.factorized)?;
        let z_stream = encode_with_table(&z_sym, &z_table)?;

        let hyper = self.hyper_decode(z_hat)?;
        let params = self.coding_params(y_hat, &hyper, temporal, mode)?;
        let y_sym = to_i64(y_hat)?;
        let order = coding_order(params.shape, mode);
        let centers = params.centers();
        let r = symbol_range(&y_sym, &centers);
        check_range(r)?;
        let mut enc = RangeEncoder::new();
        for &i in &order {
            let masses = laplace_folded(params.mu[i], params.sigma[i], centers[i], r)?;
            let table = build_cdf(&masses)?;
            enc.encode_symbol((y_sym[i] - centers[i] + r) as usize, &table)?;
        }
        Ok((with_range_prefix(r, enc.finish()), z_stream))
    }

    /// Inverse of [`compress`](Self::compress); returns `(y_hat, z_hat)`.
    /// `latent_hw` is the `/16` grid.
    ///
    /// `table_order` permutes the order in which per-element tables are
    /// prepared in the parallel modes; it must be `None` when the spatial
    /// prior is active.
    pub fn decompress(
        &self,
        y_stream: &[u8],
        z_stream: &[u8],
        latent_hw: (usize, usize),
        temporal: Option<&Tensor>,
        mode: EntropyMode,
        table_order: Option<&[usize]>,
        substream_base: usize,
    ) -> Result<(Tensor, Tensor)> {
        let (h, w) = latent_hw;
        let c = self.latent;
        let dev = self.hyper_decoder.c3.weight.device().clone();
        let dtype = self.hyper_decoder.c3.weight.dtype();
        let (zh, zw) = (h / 4, w / 4);
        let z_sym = decode_factorized(z_stream, [self.hyper, zh, zw], &self.factorized)
            .map_err(|e| reindex(e, substream_base + 1))?;
        let z_hat = from_i64(&z_sym, (1, self.hyper, zh, zw), dtype, &dev)?;
        let hyper = self.hyper_decode(&z_hat)?;

        let (r, body) = split_range_prefix(y_stream).map_err(|e| reindex(e, substream_base))?;
        let n = c * h * w;
        let mut values = vec![0i64; n];
        if mode.uses_spatial() {
            if table_order.is_some() {
                return Err(Error::Contract("spatial-prior decoding is strictly sequential".into()));
            }
            let mut dec = RangeDecoder::new(body).map_err(|e| reindex(e, substream_base))?;
            let mut y_partial = Tensor::zeros((1, c, h, w), dtype, &dev)?;
            for row in 0..h {
                for col in 0..w {
                    let (mu, sigma) = self.params_at(&y_partial, &hyper, temporal, mode, row, col)?;
                    for ch in 0..c {
                        let center = round_half_away(mu[ch]) as i64;
                        let table = build_cdf(&laplace_folded(mu[ch], sigma[ch], center, r)?)?;
                        let s = dec.decode_symbol(&table).map_err(|e| reindex(e, substream_base))?;
                        values[(ch * h + row) * w + col] = s as i64 - r + center;
                    }
                    y_partial = from_i64(&values, (1, c, h, w), dtype, &dev)?;
                }
            }
            dec.finish().map_err(|e| reindex(e, substream_base))?;
            return Ok((y_partial, z_hat));
        }
        let (mu, sigma) = self.fuse_priors(&hyper, None, temporal, mode)?;
        let params = EntropyParams::from_tensors(&mu, &sigma)?;
        let centers = params.centers();
        let identity: Vec<usize> = (0..n).collect();
        let prep = table_order.unwrap_or(&identity);
        if prep.len() != n || !is_permutation(prep) {
            return Err(Error::Argument("table order must be a permutation of the latent elements".into()));
        }
        let mut tables: Vec<Option<CdfTable>> = vec![None; n];
        for &i in prep {
            tables[i] = Some(build_cdf(&laplace_folded(params.mu[i], params.sigma[i], centers[i], r)?)?);
        }
        let mut dec = RangeDecoder::new(body).map_err(|e| reindex(e, substream_base))?;
        for i in coding_order(params.shape, mode) {
            let s = dec.decode_symbol(tables[i].as_ref().unwrap()).map_err(|e| reindex(e, substream_base))?;
            values[i] = s as i64 - r + centers[i];
        }
        dec.finish().map_err(|e| reindex(e, substream_base))?;
        Ok((from_i64(&values, (1, c, h, w), dtype, &dev)?, z_hat))
    }

    /// Ideal bits of `y_hat` under the quantized coding tables, and the
    /// number of coded symbols.
    pub fn quantized_cross_entropy(
        &self,
        y: &Tensor,
        y_hat: &Tensor,
        temporal: Option<&Tensor>,
        mode: EntropyMode,
    ) -> Result<f64> {
        let z_hat = round_canonical(&self.hyper_encode(y)?)?;
        let hyper = self.hyper_decode(&z_hat)?;
        let params = self.coding_params(y_hat, &hyper, temporal, mode)?;
        let y_sym = to_i64(y_hat)?;
        let centers = params.centers();
        let r = symbol_range(&y_sym, &centers);
        let mut bits = 0.0;
        for i in 0..y_sym.len() {
            let table = build_cdf(&laplace_folded(params.mu[i], params.sigma[i], centers[i], r)?)?;
            bits += table.bits((y_sym[i] - centers[i] + r) as usize);
        }
        Ok(bits)
    }
}

/// Raster order (position-major, channels innermost) with a spatial prior,
/// plain `[C, H, W]` order otherwise.
fn coding_order(shape: [usize; 3], mode: EntropyMode) -> Vec<usize> {
    let [c, h, w] = shape;
    if mode.uses_spatial() {
        let mut v = Vec::with_capacity(c * h * w);
        for p in 0..h * w {
            for ch in 0..c {
                v.push(ch * h * w + p);
            }
        }
        v
    } else {
        (0..c * h * w).collect()
    }
}

fn is_permutation(order: &[usize]) -> bool {
    let mut seen = vec![false; order.len()];
    for &i in order {
        if i >= seen.len() || seen[i] {
            return false;
        }
        seen[i] = true;
    }
    true
}

fn check_range(r: i64) -> Result<()> {
    if r > MAX_SYMBOL_RANGE {
        return Err(Error::Range(format!("latent magnitude {r} exceeds the coder range {MAX_SYMBOL_RANGE}")));
    }
    Ok(())
}

fn with_range_prefix(r: i64, body: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 2);
    out.extend_from_slice(&(r as u16).to_be_bytes());
    out.extend(body);
    out
}

fn split_range_prefix(stream: &[u8]) -> Result<(i64, &[u8])> {
    if stream.len() < 2 {
        return Err(Error::corrupt(0, "substream shorter than its range header"));
    }
    let r = u16::from_be_bytes([stream[0], stream[1]]) as i64;
    if !(MIN_SYMBOL_RANGE..=MAX_SYMBOL_RANGE).contains(&r) {
        return Err(Error::corrupt(0, format!("invalid symbol range {r}")));
    }
    Ok((r, &stream[2..]))
}

fn reindex(e: Error, substream: usize) -> Error {
    match e {
        Error::Corruption { reason, .. } => Error::Corruption { substream, reason },
        other => other,
    }
}

/// Codes `symbols` against per-element tables; prefixes the half-width.
pub fn encode_with_table(symbols: &[i64], table: &ProbabilityTable) -> Result<Vec<u8>> {
    let r = ((table.masses.first().map(|m| m.len()).unwrap_or(2 * MIN_SYMBOL_RANGE as usize + 1) - 1) / 2) as i64;
    check_range(r)?;
    let mut enc = RangeEncoder::new();
    for (i, &s) in symbols.iter().enumerate() {
        let idx = s - table.offsets[i];
        let cdf = build_cdf(&table.masses[i])?;
        if idx < 0 || idx as usize >= cdf.symbol_count() {
            return Err(Error::Range(format!("symbol {s} outside the coding table")));
        }
        enc.encode_symbol(idx as usize, &cdf)?;
    }
    Ok(with_range_prefix(r, enc.finish()))
}

fn decode_factorized(stream: &[u8], shape: [usize; 3], prior: &FactorizedPrior) -> Result<Vec<i64>> {
    let (r, body) = split_range_prefix(stream)?;
    let [c, h, w] = shape;
    let tables = prior.tables(r)?.iter().map(|m| build_cdf(m)).collect::<Result<Vec<_>>>()?;
    let mut dec = RangeDecoder::new(body)?;
    let mut out = Vec::with_capacity(c * h * w);
    for table in tables.iter().take(c) {
        for _ in 0..h * w {
            out.push(dec.decode_symbol(table)? as i64 - r);
        }
    }
    dec.finish()?;
    Ok(out)
}

pub(crate) fn to_i64(t: &Tensor) -> Result<Vec<i64>> {
    let v: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    Ok(v.into_iter().map(|x| x as i64).collect())
}

pub(crate) fn from_i64(v: &[i64], shape: (usize, usize, usize, usize), dtype: DType, dev: &Device) -> Result<Tensor> {
    let f: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    Ok(Tensor::from_vec(f, shape, dev)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use rand::SeedableRng;

    #[test]
    fn closed_form_mass() {
        let m = laplace_mass(0, 0.0, 1.0).unwrap();
        assert!((m - (1.0 - (-0.5f64).exp())).abs() < 1e-15);
        assert!((m - 0.393469).abs() < 1e-6);
        assert!(matches!(laplace_mass(0, 0.0, 0.001), Err(Error::Parameter(_))));
    }

    #[test]
    fn mass_symmetry() {
        for (k, mu, s) in [(3, 0.7, 2.0), (-2, -1.3, 0.4), (0, 0.2, 5.0)] {
            let a = laplace_mass(k, mu, s).unwrap();
            let b = laplace_mass(-k, -mu, s).unwrap();
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn unfolded_sum_over_41_symbols() {
        let s: f64 = (-20..=20).map(|k| laplace_mass(k, 0.0, 1.0).unwrap()).sum();
        // tails beyond +-20.5 hold exp(-20.5) ~ 1.25e-9
        assert!((1.0 - s - (-20.5f64).exp()).abs() < 1e-12);
        assert!((1.0 - s).abs() < 1e-8);
    }

    #[test]
    fn folded_tables_normalize() {
        for (mu, s) in [(0.0, 1.0), (3.7, 0.01), (-40.2, 25.0), (0.5, 300.0)] {
            let c = round_half_away(mu) as i64;
            let m = laplace_folded(mu, s, c, 32).unwrap();
            assert_eq!(m.len(), 65);
            assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(m.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn half_mass_symbol_costs_one_bit() {
        let p = EntropyParams::new(vec![0.5], vec![SIGMA_MIN], [1, 1, 1]).unwrap();
        let bits = estimate_rate(&[0], &p).unwrap();
        assert!((bits - 1.0).abs() < 1e-12, "{bits}");
    }

    #[test]
    fn rate_minimized_at_symbol() {
        let s = 3i64;
        let bits_at = |mu: f64| {
            let p = EntropyParams::new(vec![mu], vec![0.8], [1, 1, 1]).unwrap();
            estimate_rate(&[s], &p).unwrap()
        };
        let best = (-40..=40)
            .map(|d| s as f64 + d as f64 * 0.05)
            .min_by(|a, b| bits_at(*a).partial_cmp(&bits_at(*b)).unwrap())
            .unwrap();
        assert_eq!(best, s as f64);
    }

    #[test]
    fn tensor_likelihood_matches_closed_form() {
        let dev = Device::Cpu;
        let y = Tensor::new(&[0.0f64, 1.3, -2.0, 7.0], &dev).unwrap();
        let mu = Tensor::new(&[0.0f64, 0.2, -1.1, 0.0], &dev).unwrap();
        let s = Tensor::new(&[1.0f64, 0.7, 2.5, 1.0], &dev).unwrap();
        let lik: Vec<f64> = laplace_likelihood(&y, &mu, &s).unwrap().to_vec1().unwrap();
        let ys = [0.0, 1.3, -2.0, 7.0];
        let ms = [0.0, 0.2, -1.1, 0.0];
        let ss = [1.0, 0.7, 2.5, 1.0];
        for i in 0..4 {
            let want = laplace_cdf(ys[i] + 0.5, ms[i], ss[i]) - laplace_cdf(ys[i] - 0.5, ms[i], ss[i]);
            assert!((lik[i] - want).abs() < 1e-12);
        }
    }

    fn small_model(modes: &[EntropyMode]) -> (ParamStore, LatentEntropyModel) {
        let mut store = ParamStore::new(5, DType::F64, Device::Cpu);
        let widths = EntropyWidths { latent: 8, hyper: 6, temporal: Some((4, 6, 5)), fusion_hidden: 12 };
        let m = LatentEntropyModel::new(&mut store.root(), widths, modes).unwrap();
        (store, m)
    }

    #[test]
    fn shapes_and_factorized_tables() {
        let (_s, m) = small_model(&EntropyMode::ALL);
        let y = Tensor::randn(0f64, 3.0, (1, 8, 4, 4), &Device::Cpu).unwrap();
        let z = m.hyper_encode(&y).unwrap();
        assert_eq!(z.dims(), &[1, 6, 1, 1]);
        assert_eq!(m.hyper_decode(&z.round().unwrap()).unwrap().dims(), &[1, 16, 4, 4]);
        let ctx = Tensor::randn(0f64, 1.0, (1, 4, 64, 64), &Device::Cpu).unwrap();
        assert_eq!(m.temporal_prior(&ctx).unwrap().dims(), &[1, 5, 4, 4]);

        let tables = m.factorized.tables(32).unwrap();
        for t in &tables {
            assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let cdf = m.factorized.cdf_points(8).unwrap();
        for row in cdf {
            assert!(row.windows(2).all(|w| w[1] > w[0]));
        }
        let zeros = vec![0i64; 6];
        let table = factorized_mass(&zeros, [6, 1, 1], &m.factorized).unwrap();
        let bits: f64 = (0..6).map(|i| -table.mass(i, 0).unwrap().log2()).sum();
        assert!(bits.is_finite() && bits > 0.0);
    }

    #[test]
    fn compress_round_trip_all_modes() {
        let (_s, m) = small_model(&EntropyMode::ALL);
        let dev = Device::Cpu;
        let y = (Tensor::randn(0f64, 4.0, (1, 8, 4, 4), &dev).unwrap()).round().unwrap();
        let ctx = Tensor::randn(0f64, 1.0, (1, 4, 64, 64), &dev).unwrap();
        let tp = m.temporal_prior(&ctx).unwrap();
        for mode in EntropyMode::ALL {
            let t = mode.uses_temporal().then_some(&tp);
            let (ys, zs) = m.compress(&y, &y, t, mode).unwrap();
            let (back, _) = m.decompress(&ys, &zs, (4, 4), t, mode, None, 2).unwrap();
            assert_eq!(to_i64(&back).unwrap(), to_i64(&y).unwrap(), "{mode}");
            let ce = m.quantized_cross_entropy(&y, &y, t, mode).unwrap();
            assert!(((ys.len() - 2) * 8) as f64 <= ce + 64.0);
        }
    }

    #[test]
    fn corrupt_substreams_are_reported_by_index() {
        let (_s, m) = small_model(&[EntropyMode::HyperOnly]);
        let y = Tensor::randn(0f64, 4.0, (1, 8, 4, 4), &Device::Cpu).unwrap().round().unwrap();
        let (ys, zs) = m.compress(&y, &y, None, EntropyMode::HyperOnly).unwrap();
        let err = m.decompress(&ys[..ys.len() - 3], &zs, (4, 4), None, EntropyMode::HyperOnly, None, 2).unwrap_err();
        assert!(matches!(err, Error::Corruption { substream: 2, .. }), "{err}");
        let err = m.decompress(&ys, &zs[..1], (4, 4), None, EntropyMode::HyperOnly, None, 2).unwrap_err();
        assert!(matches!(err, Error::Corruption { substream: 3, .. }), "{err}");
    }

    #[test]
    fn mode_prior_mismatch_is_config_error() {
        let (_s, m) = small_model(&EntropyMode::ALL);
        let h = Tensor::zeros((1, 16, 4, 4), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(m.fuse_priors(&h, None, None, EntropyMode::HyperSpatial), Err(Error::Config(_))));
        assert!(matches!(m.fuse_priors(&h, None, None, EntropyMode::HyperTemporal), Err(Error::Config(_))));
        let (_s, only) = small_model(&[EntropyMode::HyperOnly]);
        assert!(matches!(only.fuse_priors(&h, None, None, EntropyMode::HyperSpatial), Err(Error::Config(_))));
    }

    #[test]
    fn train_forward_shapes() {
        let (_s, m) = small_model(&EntropyMode::ALL);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let y = Tensor::randn(0f64, 2.0, (2, 8, 8, 4), &Device::Cpu).unwrap();
        let tp = Tensor::randn(0f64, 1.0, (2, 5, 8, 4), &Device::Cpu).unwrap();
        let out = m.forward_train(&y, Some(&tp), EntropyMode::HyperSpatialTemporal, &mut rng).unwrap();
        assert_eq!(out.y_likelihood.dims(), &[2, 8, 8, 4]);
        assert_eq!(out.z_likelihood.dims(), &[2, 6, 2, 1]);
        let smin = out.sigma.flatten_all().unwrap().min(0).unwrap().to_scalar::<f64>().unwrap();
        assert!(smin >= SIGMA_MIN);
    }
}
