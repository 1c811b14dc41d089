//! Conditional encoder/decoder of the current frame given a condition tensor.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::context::CONTEXT_DIMS;
use crate::entropy_model::EntropyMode;
use crate::error::{Error, Result};
use crate::nn::{gdn_raw, uniform_noise, Builder, Conv2d, Gdn, ResBlock, SubpelConv, GDN_BETA_MIN};

/// Number of latent channels of the frame codec.
pub const LATENT_CHANNELS: usize = 96;

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }

            pub fn to_byte(self) -> u8 {
                Self::ALL.iter().position(|v| *v == self).unwrap() as u8
            }

            pub fn from_byte(b: u8) -> Option<Self> {
                Self::ALL.get(b as usize).copied()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                Self::ALL
                    .iter()
                    .copied()
                    .find(|v| v.as_str() == s)
                    .ok_or_else(|| Error::Argument(format!("unknown {} {s}", stringify!($name))))
            }
        }
    };
}

string_enum!(ConditionMode {
    ContextFeature => "context_feature",
    RgbPrediction => "rgb_prediction",
    Residue => "residue",
});

string_enum!(MotionMode {
    Memc => "memc",
    None => "none",
});

string_enum!(DistortionMetric {
    Mse => "mse",
    MsSsim => "ms_ssim",
});

string_enum!(QuantizeMode {
    Round => "round",
    Noise => "noise",
});

/// Ablation axes and the rate-distortion trade-off.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub condition_mode: ConditionMode,
    pub motion_mode: MotionMode,
    pub entropy_mode: EntropyMode,
    pub context_dim: usize,
    pub lambda: f64,
    pub distortion_metric: DistortionMetric,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            condition_mode: ConditionMode::ContextFeature,
            motion_mode: MotionMode::Memc,
            entropy_mode: EntropyMode::HyperSpatialTemporal,
            context_dim: 64,
            lambda: 256.0,
            distortion_metric: DistortionMetric::Mse,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if !CONTEXT_DIMS.contains(&self.context_dim) {
            return Err(Error::Config(format!("context_dim {} not in {CONTEXT_DIMS:?}", self.context_dim)));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        Ok(())
    }

    /// Channels of the tensor conditioning the codec and the temporal prior.
    pub fn condition_channels(&self) -> usize {
        match self.condition_mode {
            ConditionMode::ContextFeature => self.context_dim,
            ConditionMode::RgbPrediction | ConditionMode::Residue => 3,
        }
    }
}

/// GDN with checked bounds: `beta >= GDN_BETA_MIN`, `gamma >= 0`.
pub fn gdn(x: &Tensor, beta: &Tensor, gamma: &Tensor, inverse: bool) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    if beta.dims() != [c] || gamma.dims() != [c, c] {
        return Err(Error::Argument(format!(
            "GDN parameters {:?}/{:?} do not match {c} channels",
            beta.dims(),
            gamma.dims()
        )));
    }
    let bmin: f64 = beta.to_dtype(DType::F64)?.min_all()?.to_scalar()?;
    let gmin: f64 = gamma.to_dtype(DType::F64)?.min_all()?.to_scalar()?;
    if !(bmin >= GDN_BETA_MIN) || !(gmin >= 0.0) {
        return Err(Error::Parameter(format!("GDN requires beta >= {GDN_BETA_MIN} and gamma >= 0")));
    }
    gdn_raw(x, beta, gamma, inverse)
}

/// `Round`: nearest integer, ties away from zero, straight-through gradient.
/// `Noise`: `x + U(-1/2, 1/2)`.
pub fn quantize(x: &Tensor, mode: QuantizeMode, rng: &mut impl Rng) -> Result<Tensor> {
    match mode {
        QuantizeMode::Round => crate::quant::ste_round(x),
        QuantizeMode::Noise => Ok((x + uniform_noise(x, rng)?)?),
    }
}

/// Widths of the frame codec.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecWidths {
    pub hidden: usize,
    pub latent: usize,
}

impl Default for CodecWidths {
    fn default() -> Self {
        Self { hidden: 64, latent: LATENT_CHANNELS }
    }
}

/// Builds the encoder input for the condition mode.
///
/// `condition` is the context for `ContextFeature` and the pixel prediction
/// otherwise.
pub fn encoder_input(x: &Tensor, condition: &Tensor, mode: ConditionMode) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let (_, cc, ch, cw) = condition.dims4()?;
    if (ch, cw) != (h, w) {
        return Err(Error::Argument(format!("condition {cw}x{ch} does not match frame {w}x{h}")));
    }
    match mode {
        ConditionMode::ContextFeature => Ok(Tensor::cat(&[x, condition], 1)?),
        ConditionMode::RgbPrediction | ConditionMode::Residue if cc != 3 => {
            Err(Error::Argument(format!("{mode} needs a 3-channel prediction, got {cc}")))
        }
        ConditionMode::RgbPrediction => Ok(Tensor::cat(&[x, condition], 1)?),
        ConditionMode::Residue => Ok((x - condition)?),
    }
}

#[derive(Clone, Debug)]
pub struct ContextualEncoder {
    convs: Vec<Conv2d>,
    gdns: Vec<Gdn>,
    res: Vec<ResBlock>,
    in_channels: usize,
}

impl ContextualEncoder {
    pub fn new(b: &mut Builder, in_channels: usize, widths: CodecWidths) -> Result<Self> {
        let mut b = b.sub("contextual_encoder");
        let h = widths.hidden;
        let w = [in_channels, h, h, h, widths.latent];
        let convs = (0..4).map(|i| Conv2d::new(&mut b, &format!("conv{i}"), w[i], w[i + 1], 5, 2)).collect::<Result<_>>()?;
        let gdns = (0..3).map(|i| Gdn::new(&mut b, &format!("gdn{i}"), h, false)).collect::<Result<_>>()?;
        let res = (0..2).map(|i| ResBlock::new(&mut b, &format!("res{i}"), h)).collect::<Result<_>>()?;
        Ok(Self { convs, gdns, res, in_channels })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// `[N, in, H, W] -> [N, latent, H/16, W/16]`.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = input.dims4()?;
        if c != self.in_channels || h % 64 != 0 || w % 64 != 0 || h == 0 || w == 0 {
            return Err(Error::Argument(format!(
                "encoder expects [{}, 64k, 64k] input, got [{c}, {h}, {w}]",
                self.in_channels
            )));
        }
        let mut x = input.clone();
        for i in 0..4 {
            x = self.convs[i].forward(&x)?;
            if i < 3 {
                x = self.gdns[i].forward(&x)?;
            }
            if let Some(r) = self.res.get(i) {
                x = r.forward(&x)?;
            }
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct ContextualDecoder {
    subpels: Vec<SubpelConv>,
    igdns: Vec<Gdn>,
    res: Vec<ResBlock>,
    fuse_in: Conv2d,
    fuse_res: Vec<ResBlock>,
    fuse_out: Conv2d,
    mode: ConditionMode,
    condition_channels: usize,
    latent: usize,
}

impl ContextualDecoder {
    pub fn new(b: &mut Builder, mode: ConditionMode, condition_channels: usize, widths: CodecWidths) -> Result<Self> {
        let mut b = b.sub("contextual_decoder");
        let h = widths.hidden;
        let w = [widths.latent, h, h, h, h];
        let subpels = (0..4).map(|i| SubpelConv::new(&mut b, &format!("up{i}"), w[i], w[i + 1])).collect::<Result<_>>()?;
        let igdns = (0..3).map(|i| Gdn::new(&mut b, &format!("igdn{i}"), h, true)).collect::<Result<_>>()?;
        let res = (0..2).map(|i| ResBlock::new(&mut b, &format!("res{i}"), h)).collect::<Result<_>>()?;
        let fused = match mode {
            ConditionMode::Residue => h,
            _ => h + condition_channels,
        };
        let fuse_in = Conv2d::new(&mut b, "fuse_in", fused, h, 3, 1)?;
        let fuse_res = (0..2).map(|i| ResBlock::new(&mut b, &format!("fuse_res{i}"), h)).collect::<Result<_>>()?;
        let fuse_out = Conv2d::new(&mut b, "fuse_out", h, 3, 3, 1)?;
        Ok(Self { subpels, igdns, res, fuse_in, fuse_res, fuse_out, mode, condition_channels, latent: widths.latent })
    }

    /// Reconstruction before clamping, `[N, 3, H, W]`.
    pub fn forward_unclamped(&self, y_hat: &Tensor, condition: &Tensor) -> Result<Tensor> {
        let (_, c, lh, lw) = y_hat.dims4()?;
        let (_, cc, h, w) = condition.dims4()?;
        if c != self.latent || cc != self.condition_channels || (h, w) != (16 * lh, 16 * lw) {
            return Err(Error::Argument(format!(
                "decoder latents {:?} and condition {:?} are inconsistent",
                y_hat.dims(),
                condition.dims()
            )));
        }
        let mut x = y_hat.clone();
        for i in 0..4 {
            x = self.subpels[i].forward(&x)?;
            if i < 3 {
                x = self.igdns[i].forward(&x)?;
            }
            if i >= 1 {
                if let Some(r) = self.res.get(i - 1) {
                    x = r.forward(&x)?;
                }
            }
        }
        let fused = match self.mode {
            ConditionMode::Residue => x,
            _ => Tensor::cat(&[&x, condition], 1)?,
        };
        let mut h = self.fuse_in.forward(&fused)?;
        for r in &self.fuse_res {
            h = r.forward(&h)?;
        }
        let out = self.fuse_out.forward(&h)?;
        Ok(match self.mode {
            ConditionMode::Residue => (out + condition)?,
            _ => out,
        })
    }

    /// Clamped reconstruction in `[0, 1]`.
    pub fn forward(&self, y_hat: &Tensor, condition: &Tensor) -> Result<Tensor> {
        Ok(self.forward_unclamped(y_hat, condition)?.clamp(0.0, 1.0)?)
    }

    /// Coding-path decode: latents must be integer-valued.
    pub fn decode_quantized(&self, y_hat: &Tensor, condition: &Tensor) -> Result<Tensor> {
        let v: Vec<f64> = y_hat.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        if v.iter().any(|x| x.fract() != 0.0) {
            return Err(Error::Contract("decoder received unquantized latents".into()));
        }
        self.forward(y_hat, condition)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{Device, Var};
    use rand::SeedableRng;

    fn small() -> CodecWidths {
        CodecWidths { hidden: 8, latent: 12 }
    }

    fn flat(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn gdn_closed_forms() {
        let dev = Device::Cpu;
        let x = Tensor::new(&[[[[2f64]]]], &dev).unwrap();
        let y = gdn(&x, &Tensor::new(&[1f64], &dev).unwrap(), &Tensor::new(&[[3f64]], &dev).unwrap(), false).unwrap();
        assert!((flat(&y)[0] - 2.0 / 13f64.sqrt()).abs() < 1e-15);
        assert!((flat(&y)[0] - 0.5547).abs() < 1e-4);

        let x = Tensor::randn(0f64, 1.0, (1, 3, 4, 4), &dev).unwrap();
        let beta = Tensor::ones(3, DType::F64, &dev).unwrap();
        let gamma = Tensor::zeros((3, 3), DType::F64, &dev).unwrap();
        assert_eq!(flat(&gdn(&x, &beta, &gamma, false).unwrap()), flat(&x));
        assert_eq!(flat(&gdn(&x, &beta, &gamma, true).unwrap()), flat(&x));

        let neg = Tensor::new(&[[0.1f64, -0.1, 0.0], [0.0; 3], [0.0; 3]], &dev).unwrap();
        assert!(matches!(gdn(&x, &beta, &neg, false), Err(Error::Parameter(_))));
        let small_beta = Tensor::new(&[1e-8f64, 1.0, 1.0], &dev).unwrap();
        assert!(matches!(gdn(&x, &small_beta, &gamma, false), Err(Error::Parameter(_))));
    }

    #[test]
    fn gdn_gradient() {
        let dev = Device::Cpu;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<f64> { (0..n).map(|_| rng.random::<f64>()).collect() };
        let x0 = mk(&mut rng, 3 * 9);
        let beta = Tensor::from_vec(mk(&mut rng, 3).iter().map(|v| v + 0.5).collect::<Vec<_>>(), 3, &dev).unwrap();
        let gamma = Tensor::from_vec(mk(&mut rng, 9), (3, 3), &dev).unwrap();
        let wts = Tensor::from_vec(mk(&mut rng, 27), (1, 3, 3, 3), &dev).unwrap();
        for inverse in [false, true] {
            let loss = |v: &[f64]| -> f64 {
                let x = Tensor::from_vec(v.to_vec(), (1, 3, 3, 3), &dev).unwrap();
                (gdn(&x, &beta, &gamma, inverse).unwrap() * &wts).unwrap().sum_all().unwrap().to_scalar().unwrap()
            };
            let var = Var::from_vec(x0.clone(), (1, 3, 3, 3), &dev).unwrap();
            let l = (gdn(var.as_tensor(), &beta, &gamma, inverse).unwrap() * &wts).unwrap().sum_all().unwrap();
            let g = flat(l.backward().unwrap().get(&var).unwrap());
            for i in [0, 5, 11, 19, 26] {
                let (mut p, mut m) = (x0.clone(), x0.clone());
                p[i] += 1e-4;
                m[i] -= 1e-4;
                let fd = (loss(&p) - loss(&m)) / 2e-4;
                assert!((g[i] - fd).abs() / fd.abs().max(1e-6) < 1e-4, "{i}: {} vs {fd}", g[i]);
            }
        }
    }

    #[test]
    fn quantizer_contract() {
        let dev = Device::Cpu;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::new(&[0.49f64, -1.5, 2.5, -0.5, 7.2], &dev).unwrap();
        let r = quantize(&x, QuantizeMode::Round, &mut rng).unwrap();
        assert_eq!(flat(&r), vec![0.0, -2.0, 3.0, -1.0, 7.0]);
        assert_eq!(flat(&quantize(&r, QuantizeMode::Round, &mut rng).unwrap()), flat(&r));
        let n = quantize(&x, QuantizeMode::Noise, &mut rng).unwrap();
        assert!(flat(&n).iter().zip(flat(&x)).all(|(a, b)| (a - b).abs() <= 0.5));
    }

    #[test]
    fn encoder_inputs_and_shapes() {
        let dev = Device::Cpu;
        let x = Tensor::rand(0f64, 1.0, (1, 3, 64, 64), &dev).unwrap();
        let ctx = Tensor::rand(0f64, 1.0, (1, 64, 64, 64), &dev).unwrap();
        assert_eq!(encoder_input(&x, &ctx, ConditionMode::ContextFeature).unwrap().dims(), &[1, 67, 64, 64]);
        assert_eq!(encoder_input(&x, &x, ConditionMode::RgbPrediction).unwrap().dims(), &[1, 6, 64, 64]);
        let r = encoder_input(&x, &x, ConditionMode::Residue).unwrap();
        assert!(flat(&r).iter().all(|&v| v == 0.0));
        assert!(encoder_input(&x, &ctx, ConditionMode::Residue).is_err());

        let mut s = ParamStore::new(1, DType::F64, dev.clone());
        let enc = ContextualEncoder::new(&mut s.root(), 67, CodecWidths { hidden: 8, latent: 96 }).unwrap();
        let y = enc.forward(&encoder_input(&x, &ctx, ConditionMode::ContextFeature).unwrap()).unwrap();
        assert_eq!(y.dims(), &[1, 96, 4, 4]);
        let bad = Tensor::zeros((1, 67, 48, 64), DType::F64, &dev).unwrap();
        assert!(matches!(enc.forward(&bad), Err(Error::Argument(_))));
    }

    #[test]
    fn decoder_shape_clamp_and_determinism() {
        let dev = Device::Cpu;
        let mut s = ParamStore::new(2, DType::F64, dev.clone());
        let dec = ContextualDecoder::new(&mut s.root(), ConditionMode::ContextFeature, 16, small()).unwrap();
        let y = (Tensor::randn(0f64, 20.0, (1, 12, 4, 8), &dev).unwrap()).round().unwrap();
        let ctx = Tensor::randn(0f64, 1.0, (1, 16, 64, 128), &dev).unwrap();
        let a = dec.decode_quantized(&y, &ctx).unwrap();
        let b = dec.decode_quantized(&y, &ctx).unwrap();
        assert_eq!(a.dims(), &[1, 3, 64, 128]);
        assert_eq!(flat(&a), flat(&b));
        assert!(flat(&a).iter().all(|&v| (0.0..=1.0).contains(&v)));
        let frac = (&y + 0.25).unwrap();
        assert!(matches!(dec.decode_quantized(&frac, &ctx), Err(Error::Contract(_))));
    }

    #[test]
    fn residue_with_zeroed_decoder_returns_prediction() {
        let dev = Device::Cpu;
        let mut s = ParamStore::new(3, DType::F64, dev.clone());
        let dec = ContextualDecoder::new(&mut s.root(), ConditionMode::Residue, 3, small()).unwrap();
        for (_, v) in s.vars_with_prefix(&["contextual_decoder"]) {
            v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
        }
        let pred = Tensor::rand(0f64, 1.0, (1, 3, 64, 64), &dev).unwrap();
        let y = Tensor::zeros((1, 12, 4, 4), DType::F64, &dev).unwrap();
        // Zeroed GDN parameters leave beta = beta_min, so the layers stay finite.
        assert_eq!(flat(&dec.forward(&y, &pred).unwrap()), flat(&pred));
    }

    #[test]
    fn residue_isolated_from_context_channels() {
        let dev = Device::Cpu;
        let mut s = ParamStore::new(4, DType::F64, dev.clone());
        let dec = ContextualDecoder::new(&mut s.root(), ConditionMode::Residue, 3, small()).unwrap();
        let y = Tensor::randn(0f64, 3.0, (1, 12, 4, 4), &dev).unwrap().round().unwrap();
        let pred = Tensor::rand(0f64, 1.0, (1, 3, 64, 64), &dev).unwrap();
        // A wide context carrying the prediction in channels 0..3 plus unrelated channels.
        let extra_a = Tensor::rand(0f64, 1.0, (1, 13, 64, 64), &dev).unwrap();
        let extra_b = Tensor::rand(0f64, 1.0, (1, 13, 64, 64), &dev).unwrap();
        let ctx_a = Tensor::cat(&[&pred, &extra_a], 1).unwrap();
        let ctx_b = Tensor::cat(&[&pred, &extra_b], 1).unwrap();
        let from = |ctx: &Tensor| dec.forward(&y, &ctx.narrow(1, 0, 3).unwrap()).unwrap();
        assert_eq!(flat(&from(&ctx_a)), flat(&from(&ctx_b)));
    }

    #[test]
    fn enum_names_and_config() {
        assert_eq!("context_feature".parse::<ConditionMode>().unwrap(), ConditionMode::ContextFeature);
        assert_eq!(MotionMode::from_byte(MotionMode::None.to_byte()), Some(MotionMode::None));
        assert_eq!(serde_json::to_string(&DistortionMetric::MsSsim).unwrap(), "\"ms_ssim\"");
        let mut c = CodecConfig::default();
        c.validate().unwrap();
        c.lambda = 0.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.lambda = 1.0;
        c.context_dim = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
