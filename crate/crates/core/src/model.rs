//! The complete P-frame model: flow, MV codec, context, contextual codec and
//! entropy model, sharing one parameter store.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::context::{ContextConfig, ContextNet};
use crate::contextual_codec::{
    encoder_input, CodecConfig, CodecWidths, ConditionMode, QuantizeMode, ContextualDecoder, ContextualEncoder, MotionMode,
};
use crate::entropy_model::{bits_of, EntropyMode, EntropyWidths, LatentEntropyModel};
use crate::error::{Error, Result};
use crate::motion::{warp_bilinear, FlowNet, MotionConfig, MvCodec};
use crate::nn::ParamStore;
use crate::quant::round_canonical;

/// Every architectural choice of a model; stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub codec: CodecConfig,
    pub motion: MotionConfig,
    pub widths: CodecWidths,
    pub refine_depth: usize,
    /// `C_z`.
    pub hyper_channels: usize,
    pub temporal_hidden: usize,
    /// `C_tp`.
    pub temporal_channels: usize,
    pub fusion_hidden: usize,
    /// Fusion heads to build; always contains `codec.entropy_mode`.
    pub entropy_modes: Vec<EntropyMode>,
    /// Hidden/latent widths of the learned intra codec, if any.
    pub intra: Option<crate::bitstream::intra::ToyIntraConfig>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            codec: CodecConfig::default(),
            motion: MotionConfig::default(),
            widths: CodecWidths::default(),
            refine_depth: 1,
            hyper_channels: 64,
            temporal_hidden: 64,
            temporal_channels: 64,
            fusion_hidden: 128,
            entropy_modes: EntropyMode::ALL.to_vec(),
            intra: None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Reduced hidden widths for CPU smoke tests; pinned shapes (96 latent
    /// channels, /16 and /64 grids) are unchanged.
    pub fn tiny() -> Self {
        Self {
            codec: CodecConfig { context_dim: 16, ..CodecConfig::default() },
            motion: MotionConfig { flow_levels: 4, flow_width: 8, flow_kernel: 3, mv_hidden: 16, mv_latent: 16, mv_refine: 8 },
            widths: CodecWidths { hidden: 16, latent: 96 },
            refine_depth: 1,
            hyper_channels: 16,
            temporal_hidden: 16,
            temporal_channels: 16,
            fusion_hidden: 64,
            entropy_modes: EntropyMode::ALL.to_vec(),
            intra: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        if !self.entropy_modes.contains(&self.codec.entropy_mode) {
            return Err(Error::Config(format!("entropy_modes must include {}", self.codec.entropy_mode)));
        }
        if self.refine_depth > 16 || self.widths.hidden == 0 || self.widths.latent == 0 {
            return Err(Error::Config("invalid network widths".into()));
        }
        Ok(())
    }
}

/// Tensors produced by one training forward pass.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// Pixel-domain warp of the reference by the decoded motion.
    pub x_tilde: Option<Tensor>,
    pub x_hat: Option<Tensor>,
    /// Rates in bits (scalar tensors), summed over the batch.
    pub bits_g: Option<Tensor>,
    pub bits_s: Option<Tensor>,
    pub bits_y: Option<Tensor>,
    pub bits_z: Option<Tensor>,
    pub temporal: Option<Tensor>,
    pub y: Option<Tensor>,
}

/// Parts of the forward pass a training stage needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardPlan {
    pub motion_rate: bool,
    pub frame: bool,
    pub detach_motion: bool,
    /// Relaxation of the frame latents; `Noise` makes the pass fully differentiable.
    pub quantize: QuantizeMode,
}

impl ForwardPlan {
    pub fn for_stage(stage: u8) -> Self {
        match stage {
            1 => Self { motion_rate: true, frame: false, detach_motion: false, quantize: QuantizeMode::Round },
            2 | 3 => Self { motion_rate: false, frame: true, detach_motion: true, quantize: QuantizeMode::Round },
            _ => Self { motion_rate: true, frame: true, detach_motion: false, quantize: QuantizeMode::Round },
        }
    }
}

pub struct CodecModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub flow: FlowNet,
    pub mv: MvCodec,
    pub context: Option<ContextNet>,
    pub encoder: ContextualEncoder,
    pub decoder: ContextualDecoder,
    pub entropy: LatentEntropyModel,
    pub intra: Option<crate::bitstream::intra::ToyIntra>,
}

impl CodecModel {
    pub fn new(config: ModelConfig, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(config.seed, dtype, device.clone());
        let codec = config.codec;
        let mut root = store.root();
        let flow = FlowNet::new(&mut root, &config.motion)?;
        let mv = MvCodec::new(&mut root, &config.motion)?;
        let context = match codec.condition_mode {
            ConditionMode::ContextFeature => Some(ContextNet::new(
                &mut root,
                &ContextConfig { context_dim: codec.context_dim, refine_depth: config.refine_depth },
            )?),
            _ => None,
        };
        let cond = codec.condition_channels();
        let enc_in = match codec.condition_mode {
            ConditionMode::Residue => 3,
            _ => 3 + cond,
        };
        let encoder = ContextualEncoder::new(&mut root, enc_in, config.widths)?;
        let decoder = ContextualDecoder::new(&mut root, codec.condition_mode, cond, config.widths)?;
        let widths = EntropyWidths {
            latent: config.widths.latent,
            hyper: config.hyper_channels,
            temporal: Some((cond, config.temporal_hidden, config.temporal_channels)),
            fusion_hidden: config.fusion_hidden,
        };
        let entropy = LatentEntropyModel::new(&mut root, widths, &config.entropy_modes)?;
        let intra = match &config.intra {
            Some(c) => Some(crate::bitstream::intra::ToyIntra::new(&mut root, c)?),
            None => None,
        };
        Ok(Self { config, store, flow, mv, context, encoder, decoder, entropy, intra })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn codec(&self) -> &CodecConfig {
        &self.config.codec
    }

    /// Condition tensor from the reference and decoded motion: the context in
    /// `ContextFeature` mode, the pixel prediction otherwise.
    pub fn condition(&self, reference: &Tensor, mv_hat: &Tensor) -> Result<Tensor> {
        let codec = self.codec();
        match (&self.context, codec.condition_mode) {
            (Some(ctx), ConditionMode::ContextFeature) => ctx.generate(reference, mv_hat, codec.motion_mode),
            (_, ConditionMode::ContextFeature) => Err(Error::Config("model has no context network".into())),
            _ => match codec.motion_mode {
                MotionMode::Memc => warp_bilinear(reference, mv_hat),
                MotionMode::None => Ok(reference.clone()),
            },
        }
    }

    fn check_frames(&self, x: &Tensor, reference: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if x.dims() != reference.dims() || c != 3 {
            return Err(Error::Argument(format!(
                "current {:?} and reference {:?} frames must share a [N, 3, H, W] shape",
                x.dims(),
                reference.dims()
            )));
        }
        if h % 64 != 0 || w % 64 != 0 || h == 0 || w == 0 {
            return Err(Error::Argument(format!("frame {w}x{h} is not padded to a multiple of 64")));
        }
        Ok(())
    }

    /// Relaxed forward pass over a batch of `(current, reference)` frames.
    pub fn forward_train(
        &self,
        x: &Tensor,
        reference: &Tensor,
        plan: ForwardPlan,
        entropy_mode: EntropyMode,
        rng: &mut impl Rng,
    ) -> Result<TrainOutputs> {
        self.check_frames(x, reference)?;
        let mut out = TrainOutputs::default();
        let mv_hat = if self.codec().motion_mode == MotionMode::None {
            let (n, _, h, w) = x.dims4()?;
            if plan.motion_rate {
                let zero = Tensor::zeros((), x.dtype(), x.device())?;
                out.bits_g = Some(zero.clone());
                out.bits_s = Some(zero);
            }
            Tensor::zeros((n, 2, h, w), x.dtype(), x.device())?
        } else if plan.motion_rate {
            let flow = self.flow.estimate(reference, x)?;
            let m = self.mv.forward_train(&flow, rng)?;
            out.bits_g = Some(bits_of(&m.latent.y_likelihood)?);
            out.bits_s = Some(bits_of(&m.latent.z_likelihood)?);
            m.mv_hat
        } else {
            let flow = self.flow.estimate(reference, x)?;
            let g = self.mv.analysis(&flow.detach())?;
            self.mv.synthesis(&round_canonical(&g)?)?
        };
        let mv_hat = if plan.detach_motion { mv_hat.detach() } else { mv_hat };
        out.x_tilde = Some(warp_bilinear(reference, &mv_hat)?);
        if !plan.frame {
            return Ok(out);
        }
        let cond = self.condition(reference, &mv_hat)?;
        let y = self.encoder.forward(&encoder_input(x, &cond, self.codec().condition_mode)?)?;
        let temporal = if entropy_mode.uses_temporal() { Some(self.entropy.temporal_prior(&cond)?) } else { None };
        let lat = self.entropy.forward_relaxed(&y, temporal.as_ref(), entropy_mode, plan.quantize, rng)?;
        out.x_hat = Some(self.decoder.forward(&lat.y_hat, &cond)?);
        out.bits_y = Some(bits_of(&lat.y_likelihood)?);
        out.bits_z = Some(bits_of(&lat.z_likelihood)?);
        out.temporal = temporal;
        out.y = Some(y);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn tiny_forward_all_stages() {
        let model = CodecModel::new(ModelConfig::tiny(), DType::F32, &Device::Cpu).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::rand(0f32, 1.0, (1, 3, 64, 64), &Device::Cpu).unwrap();
        let r = Tensor::rand(0f32, 1.0, (1, 3, 64, 64), &Device::Cpu).unwrap();
        for stage in 1..=4u8 {
            let out = model.forward_train(&x, &r, ForwardPlan::for_stage(stage), EntropyMode::HyperSpatialTemporal, &mut rng).unwrap();
            assert!(out.x_tilde.is_some());
            assert_eq!(out.x_hat.is_some(), stage > 1);
            assert_eq!(out.bits_g.is_some(), stage == 1 || stage == 4);
            if let Some(xh) = &out.x_hat {
                assert_eq!(xh.dims(), &[1, 3, 64, 64]);
            }
        }
        let bad = Tensor::rand(0f32, 1.0, (1, 3, 48, 64), &Device::Cpu).unwrap();
        assert!(matches!(
            model.forward_train(&bad, &bad, ForwardPlan::for_stage(1), EntropyMode::HyperOnly, &mut rng),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn config_requires_active_head() {
        let mut c = ModelConfig::tiny();
        c.entropy_modes = vec![EntropyMode::HyperOnly];
        assert!(matches!(CodecModel::new(c, DType::F32, &Device::Cpu), Err(Error::Config(_))));
    }

    #[test]
    fn ablation_modes_build() {
        for cond in [ConditionMode::Residue, ConditionMode::RgbPrediction] {
            for motion in [MotionMode::Memc, MotionMode::None] {
                let mut c = ModelConfig::tiny();
                c.codec.condition_mode = cond;
                c.codec.motion_mode = motion;
                let m = CodecModel::new(c, DType::F32, &Device::Cpu).unwrap();
                assert!(m.context.is_none());
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
                let x = Tensor::rand(0f32, 1.0, (1, 3, 64, 64), &Device::Cpu).unwrap();
                let out = m.forward_train(&x, &x, ForwardPlan::for_stage(4), EntropyMode::HyperTemporal, &mut rng).unwrap();
                assert_eq!(out.x_hat.unwrap().dims(), &[1, 3, 64, 64]);
            }
        }
    }
}
