//! Feature-domain context: extract features from the reference, warp them by
//! the decoded motion, refine.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::contextual_codec::MotionMode;
use crate::error::{Error, Result};
use crate::motion::{warp_bilinear, MotionField};
use crate::nn::{Builder, Conv2d, ResBlock};

/// Allowed context widths.
pub const CONTEXT_DIMS: [usize; 4] = [3, 16, 64, 256];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextConfig {
    pub context_dim: usize,
    /// Residual blocks in the refinement network.
    pub refine_depth: usize,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self { context_dim: 64, refine_depth: 1 }
    }
}

impl ContextConfig {
    pub fn validate(&self) -> Result<()> {
        if !CONTEXT_DIMS.contains(&self.context_dim) {
            return Err(Error::Config(format!("context_dim {} not in {CONTEXT_DIMS:?}", self.context_dim)));
        }
        Ok(())
    }
}

/// `f_fe`: conv + residual block at full resolution.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    conv: Conv2d,
    res: ResBlock,
}

impl FeatureExtractor {
    pub fn new(b: &mut Builder, dim: usize) -> Result<Self> {
        let mut b = b.sub("feature_extraction");
        Ok(Self { conv: Conv2d::new(&mut b, "conv", 3, dim, 3, 1)?, res: ResBlock::new(&mut b, "res", dim)? })
    }

    pub fn forward(&self, frame: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = frame.dims4()?;
        if c != 3 {
            return Err(Error::Argument(format!("feature extraction expects 3 channels, got {c}")));
        }
        self.res.forward(&self.conv.forward(frame)?)
    }
}

/// `f_cr`: conv + `depth` residual blocks.
#[derive(Clone, Debug)]
pub struct ContextRefine {
    conv: Conv2d,
    blocks: Vec<ResBlock>,
}

impl ContextRefine {
    pub fn new(b: &mut Builder, dim: usize, depth: usize) -> Result<Self> {
        let mut b = b.sub("context_refine");
        let conv = Conv2d::new(&mut b, "conv", dim, dim, 3, 1)?;
        let blocks = (0..depth).map(|i| ResBlock::new(&mut b, &format!("res{i}"), dim)).collect::<Result<Vec<_>>>()?;
        Ok(Self { conv, blocks })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.conv.forward(x)?;
        for blk in &self.blocks {
            h = blk.forward(&h)?;
        }
        Ok(h)
    }
}

/// Context generator `refine(warp(extract(ref), mv))`.
#[derive(Clone, Debug)]
pub struct ContextNet {
    pub extractor: FeatureExtractor,
    pub refine: ContextRefine,
    dim: usize,
}

impl ContextNet {
    pub fn new(b: &mut Builder, cfg: &ContextConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            extractor: FeatureExtractor::new(b, cfg.context_dim)?,
            refine: ContextRefine::new(b, cfg.context_dim, cfg.refine_depth)?,
            dim: cfg.context_dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn extract_features(&self, reference: &Tensor) -> Result<Tensor> {
        self.extractor.forward(reference)
    }

    /// `[N, 3, H, W]` reference and `[N, 2, H, W]` flow to `[N, C_ctx, H, W]`.
    /// With [`MotionMode::None`] the flow is ignored.
    pub fn generate(&self, reference: &Tensor, mv: &Tensor, mode: MotionMode) -> Result<Tensor> {
        let features = self.extract_features(reference)?;
        let aligned = match mode {
            MotionMode::Memc => {
                let (_, _, h, w) = reference.dims4()?;
                let (_, _, mh, mw) = mv.dims4()?;
                if (mh, mw) != (h, w) {
                    return Err(Error::Argument(format!("motion {mw}x{mh} does not match reference {w}x{h}")));
                }
                warp_bilinear(&features, mv)?
            }
            MotionMode::None => features,
        };
        self.refine.forward(&aligned)
    }
}

/// Typed wrapper taking a decoded [`MotionField`].
pub fn generate_context(net: &ContextNet, reference: &Tensor, mv: &MotionField, mode: MotionMode) -> Result<Tensor> {
    net.generate(reference, mv.tensor(), mode)
}

pub fn extract_features(net: &ContextNet, reference: &Tensor) -> Result<Tensor> {
    net.extract_features(reference)
}
