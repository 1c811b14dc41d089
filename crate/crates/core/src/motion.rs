//! Motion estimation, motion-vector coding and differentiable warping.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::entropy_model::{EntropyMode, EntropyWidths, LatentEntropyModel, LatentTrainOutput};
use crate::error::{Error, Result};
use crate::nn::{leaky_relu, Builder, Conv2d, Gdn, SubpelConv};
use crate::quant::round_canonical;

/// Dense displacement field, `[1, 2, H, W]`; channel 0 is horizontal, 1 vertical, in pixels.
#[derive(Clone, Debug)]
pub struct MotionField {
    tensor: Tensor,
}

impl MotionField {
    /// Accepts `[2, H, W]` or `[1, 2, H, W]`; values must be finite.
    pub fn new(t: Tensor) -> Result<Self> {
        let t = match t.rank() {
            3 => t.unsqueeze(0)?,
            4 => t,
            r => return Err(Error::Argument(format!("motion field must be [2, H, W], got rank {r}"))),
        };
        let (n, c, _, _) = t.dims4()?;
        if n != 1 || c != 2 {
            return Err(Error::Argument(format!("motion field must be [2, H, W], got {:?}", t.dims())));
        }
        let finite = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Argument("motion field contains non-finite values".into()));
        }
        Ok(Self { tensor: t })
    }

    pub fn constant(width: usize, height: usize, dx: f64, dy: f64, dtype: DType, dev: &Device) -> Result<Self> {
        let n = width * height;
        let mut v = vec![dx; n];
        v.extend(std::iter::repeat_n(dy, n));
        let t = Tensor::from_vec(v, (1, 2, height, width), dev)?.to_dtype(dtype)?;
        Ok(Self { tensor: t })
    }

    pub fn zeros(width: usize, height: usize, dtype: DType, dev: &Device) -> Result<Self> {
        Self::constant(width, height, 0.0, 0.0, dtype, dev)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn width(&self) -> usize {
        self.tensor.dims()[3]
    }

    pub fn height(&self) -> usize {
        self.tensor.dims()[2]
    }

    /// Mean displacement `(dx, dy)`.
    pub fn mean(&self) -> Result<(f64, f64)> {
        let m: Vec<f64> = self.tensor.to_dtype(DType::F64)?.mean((0, 2, 3))?.to_vec1()?;
        Ok((m[0], m[1]))
    }

    /// Mean absolute component value.
    pub fn mean_abs(&self) -> Result<f64> {
        Ok(self.tensor.to_dtype(DType::F64)?.abs()?.mean_all()?.to_scalar()?)
    }
}

/// Backward bilinear warp of `[N, C, H, W]` by `[N, 2, H, W]` flow.
///
/// `out(p) = source(p + flow(p))`, sampled bilinearly with coordinates clamped
/// to the frame (border replication). Differentiable in both arguments.
pub fn warp_bilinear(source: &Tensor, flow: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = source.dims4()?;
    let (fn_, fc, fh, fw) = flow.dims4()?;
    if fn_ != n || fc != 2 || (fh, fw) != (h, w) {
        return Err(Error::Argument(format!(
            "flow {:?} does not match source {:?}",
            flow.dims(),
            source.dims()
        )));
    }
    let dev = source.device();
    let dtype = source.dtype();
    let flow = flow.to_dtype(dtype)?;
    let gx = Tensor::arange(0u32, w as u32, dev)?.to_dtype(dtype)?.reshape((1, 1, w))?;
    let gy = Tensor::arange(0u32, h as u32, dev)?.to_dtype(dtype)?.reshape((1, h, 1))?;
    let px = flow.narrow(1, 0, 1)?.squeeze(1)?.broadcast_add(&gx)?.clamp(0.0, (w - 1) as f64)?;
    let py = flow.narrow(1, 1, 1)?.squeeze(1)?.broadcast_add(&gy)?.clamp(0.0, (h - 1) as f64)?;

    // Integer corners from detached coordinates; x0 <= W - 2 so that x = W - 1
    // is reached with weight 1 on the right corner.
    let corner = |p: &Tensor, size: usize| -> Result<(Tensor, Tensor)> {
        let hi = size.saturating_sub(2) as f64;
        let p0 = p.detach().floor()?.clamp(0.0, hi)?;
        let p1 = (&p0 + 1.0)?.clamp(0.0, (size - 1) as f64)?;
        Ok((p0, p1))
    };
    let (x0, x1) = corner(&px, w)?;
    let (y0, y1) = corner(&py, h)?;
    let wx = (&px - &x0)?;
    let wy = (&py - &y0)?;

    let flat = source.reshape((n, c, h * w))?;
    let sample = |yy: &Tensor, xx: &Tensor| -> Result<Tensor> {
        let idx = ((yy.to_dtype(DType::F64)? * w as f64)? + xx.to_dtype(DType::F64)?)?
            .to_dtype(DType::U32)?
            .reshape((n, 1, h * w))?
            .broadcast_as((n, c, h * w))?
            .contiguous()?;
        Ok(flat.gather(&idx, 2)?.reshape((n, c, h, w))?)
    };
    let wx = wx.unsqueeze(1)?;
    let wy = wy.unsqueeze(1)?;
    let one_x = (1.0 - &wx)?;
    let one_y = (1.0 - &wy)?;
    let top = (sample(&y0, &x0)?.broadcast_mul(&one_x)? + sample(&y0, &x1)?.broadcast_mul(&wx)?)?;
    let bottom = (sample(&y1, &x0)?.broadcast_mul(&one_x)? + sample(&y1, &x1)?.broadcast_mul(&wx)?)?;
    Ok((top.broadcast_mul(&one_y)? + bottom.broadcast_mul(&wy)?)?)
}

/// Typed wrapper over [`warp_bilinear`] for a single-batch source.
pub fn warp(source: &Tensor, flow: &MotionField) -> Result<Tensor> {
    warp_bilinear(source, flow.tensor())
}

/// Widths of the motion networks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionConfig {
    pub flow_levels: usize,
    pub flow_width: usize,
    pub flow_kernel: usize,
    pub mv_hidden: usize,
    /// `C_g`, channels of the MV latents.
    pub mv_latent: usize,
    pub mv_refine: usize,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self { flow_levels: 4, flow_width: 32, flow_kernel: 5, mv_hidden: 64, mv_latent: 64, mv_refine: 32 }
    }
}

/// One pyramid level: `[cur, warped ref, upsampled flow] -> residual flow`.
#[derive(Clone, Debug)]
struct FlowLevel {
    convs: Vec<Conv2d>,
}

impl FlowLevel {
    fn new(b: &mut Builder, cfg: &MotionConfig) -> Result<Self> {
        let w = cfg.flow_width;
        let widths = [8, w, 2 * w, w, (w / 2).max(2), 2];
        let k = cfg.flow_kernel;
        let mut convs = Vec::new();
        for i in 0..5 {
            let name = format!("conv{i}");
            convs.push(if i == 4 {
                Conv2d::scaled(b, &name, widths[i], widths[i + 1], k, 1, 0.1)?
            } else {
                Conv2d::new(b, &name, widths[i], widths[i + 1], k, 1)?
            });
        }
        Ok(Self { convs })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(&h)?;
            if i + 1 < self.convs.len() {
                h = leaky_relu(&h)?;
            }
        }
        Ok(h)
    }
}

/// Coarse-to-fine pyramid flow estimator.
#[derive(Clone, Debug)]
pub struct FlowNet {
    levels: Vec<FlowLevel>,
}

impl FlowNet {
    pub fn new(b: &mut Builder, cfg: &MotionConfig) -> Result<Self> {
        if cfg.flow_levels == 0 {
            return Err(Error::Config("flow pyramid needs at least one level".into()));
        }
        let mut b = b.sub("flow");
        let levels = (0..cfg.flow_levels)
            .map(|i| FlowLevel::new(&mut b.sub(&format!("level{i}")), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { levels })
    }

    pub fn levels(&self) -> usize {
        self.levels.len()
    }

    /// Flow that warps `reference` towards `current`; inputs `[N, 3, H, W]`.
    pub fn estimate(&self, reference: &Tensor, current: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = current.dims4()?;
        if reference.dims() != current.dims() || c != 3 {
            return Err(Error::Argument(format!(
                "reference {:?} and current {:?} frames must share a [N, 3, H, W] shape",
                reference.dims(),
                current.dims()
            )));
        }
        let div = 1usize << self.levels.len();
        if h % div != 0 || w % div != 0 {
            return Err(Error::Argument(format!("frame {w}x{h} is not divisible by {div}")));
        }
        let mut refs = vec![reference.clone()];
        let mut curs = vec![current.clone()];
        for _ in 1..self.levels.len() {
            refs.push(refs.last().unwrap().avg_pool2d(2)?);
            curs.push(curs.last().unwrap().avg_pool2d(2)?);
        }
        let top = self.levels.len() - 1;
        let (_, _, th, tw) = curs[top].dims4()?;
        let mut flow = Tensor::zeros((n, 2, th, tw), current.dtype(), current.device())?;
        for lvl in (0..self.levels.len()).rev() {
            if lvl != top {
                let (_, _, lh, lw) = curs[lvl].dims4()?;
                flow = (flow.upsample_nearest2d(lh, lw)? * 2.0)?;
            }
            let warped = warp_bilinear(&refs[lvl], &flow)?;
            let input = Tensor::cat(&[&curs[lvl], &warped, &flow], 1)?;
            flow = (&flow + self.levels[lvl].forward(&input)?)?;
        }
        Ok(flow)
    }
}

/// Single-frame typed entry point.
pub fn estimate_flow(net: &FlowNet, reference: &Tensor, current: &Tensor) -> Result<MotionField> {
    MotionField::new(net.estimate(reference, current)?)
}

/// Integer MV latents `g_hat` `[1, C_g, H/16, W/16]` and hyper latents `s_hat` `[1, C_g, H/64, W/64]`.
#[derive(Clone, Debug)]
pub struct MvLatentBlock {
    pub g_hat: Tensor,
    pub s_hat: Tensor,
}

/// Training outputs of the MV path.
pub struct MvTrainOutput {
    pub mv_hat: Tensor,
    pub latent: LatentTrainOutput,
}

/// Motion-vector autoencoder with refinement and a hyper + spatial entropy model.
#[derive(Clone, Debug)]
pub struct MvCodec {
    enc_convs: Vec<Conv2d>,
    enc_gdns: Vec<Gdn>,
    dec_subpels: Vec<SubpelConv>,
    dec_igdns: Vec<Gdn>,
    refine: Vec<Conv2d>,
    pub entropy: LatentEntropyModel,
}

/// Entropy mode of the MV latents.
pub const MV_ENTROPY_MODE: EntropyMode = EntropyMode::HyperSpatial;

impl MvCodec {
    pub fn new(b: &mut Builder, cfg: &MotionConfig) -> Result<Self> {
        let (hid, lat) = (cfg.mv_hidden, cfg.mv_latent);
        let mut enc_convs = Vec::new();
        let mut enc_gdns = Vec::new();
        let mut dec_subpels = Vec::new();
        let mut dec_igdns = Vec::new();
        let mut refine = Vec::new();
        {
            let mut b = b.sub("mv_codec");
            let enc_w = [2, hid, hid, hid, lat];
            for i in 0..4 {
                enc_convs.push(Conv2d::new(&mut b, &format!("enc{i}"), enc_w[i], enc_w[i + 1], 3, 2)?);
                if i < 3 {
                    enc_gdns.push(Gdn::new(&mut b, &format!("enc_gdn{i}"), enc_w[i + 1], false)?);
                }
            }
            let dec_w = [lat, hid, hid, hid, 2];
            for i in 0..4 {
                dec_subpels.push(SubpelConv::new(&mut b, &format!("dec{i}"), dec_w[i], dec_w[i + 1])?);
                if i < 3 {
                    dec_igdns.push(Gdn::new(&mut b, &format!("dec_igdn{i}"), dec_w[i + 1], true)?);
                }
            }
            let r = cfg.mv_refine;
            refine.push(Conv2d::new(&mut b, "refine0", 2, r, 3, 1)?);
            refine.push(Conv2d::new(&mut b, "refine1", r, r, 3, 1)?);
            refine.push(Conv2d::scaled(&mut b, "refine2", r, 2, 3, 1, 0.1)?);
        }
        let widths = EntropyWidths { latent: lat, hyper: lat, temporal: None, fusion_hidden: 2 * lat };
        let entropy = LatentEntropyModel::new(&mut b.sub("mv_entropy"), widths, &[MV_ENTROPY_MODE])?;
        Ok(Self { enc_convs, enc_gdns, dec_subpels, dec_igdns, refine, entropy })
    }

    fn check_dims(h: usize, w: usize) -> Result<()> {
        if h % 64 != 0 || w % 64 != 0 || h == 0 || w == 0 {
            return Err(Error::Argument(format!("motion field {w}x{h} must have dims that are multiples of 64")));
        }
        Ok(())
    }

    /// Analysis transform `[N, 2, H, W] -> [N, C_g, H/16, W/16]` (unquantized).
    pub fn analysis(&self, mv: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = mv.dims4()?;
        Self::check_dims(h, w)?;
        let mut x = mv.clone();
        for (i, c) in self.enc_convs.iter().enumerate() {
            x = c.forward(&x)?;
            if let Some(g) = self.enc_gdns.get(i) {
                x = g.forward(&x)?;
            }
        }
        Ok(x)
    }

    /// Synthesis transform plus refinement, `m + r(m)`.
    pub fn synthesis(&self, g_hat: &Tensor) -> Result<Tensor> {
        let mut x = g_hat.clone();
        for (i, s) in self.dec_subpels.iter().enumerate() {
            x = s.forward(&x)?;
            if let Some(g) = self.dec_igdns.get(i) {
                x = g.forward(&x)?;
            }
        }
        let mut r = x.clone();
        for (i, c) in self.refine.iter().enumerate() {
            r = c.forward(&r)?;
            if i + 1 < self.refine.len() {
                r = leaky_relu(&r)?;
            }
        }
        Ok((x + r)?)
    }

    pub fn encode(&self, mv: &MotionField) -> Result<MvLatentBlock> {
        let g = self.analysis(mv.tensor())?;
        let g_hat = round_canonical(&g)?;
        let s_hat = round_canonical(&self.entropy.hyper_encode(&g)?)?;
        Ok(MvLatentBlock { g_hat, s_hat })
    }

    pub fn decode(&self, block: &MvLatentBlock) -> Result<MotionField> {
        MotionField::new(self.synthesis(&block.g_hat)?)
    }

    /// `(g substream, s substream)`.
    pub fn compress(&self, block: &MvLatentBlock) -> Result<(Vec<u8>, Vec<u8>)> {
        self.entropy.compress_quantized(&block.g_hat, &block.s_hat, None, MV_ENTROPY_MODE)
    }

    /// Decodes the MV substreams of a `width x height` frame.
    pub fn decompress(&self, g_stream: &[u8], s_stream: &[u8], width: usize, height: usize) -> Result<MvLatentBlock> {
        Self::check_dims(height, width)?;
        let (g_hat, s_hat) =
            self.entropy.decompress(g_stream, s_stream, (height / 16, width / 16), None, MV_ENTROPY_MODE, None, 0)?;
        Ok(MvLatentBlock { g_hat, s_hat })
    }

    /// Relaxed forward: noisy rates and straight-through latents.
    pub fn forward_train(&self, mv: &Tensor, rng: &mut impl Rng) -> Result<MvTrainOutput> {
        let g = self.analysis(mv)?;
        let latent = self.entropy.forward_train(&g, None, MV_ENTROPY_MODE, rng)?;
        let mv_hat = self.synthesis(&latent.y_hat)?;
        Ok(MvTrainOutput { mv_hat, latent })
    }
}

/// Typed free-function forms.
pub fn mv_encode(codec: &MvCodec, mv: &MotionField) -> Result<MvLatentBlock> {
    codec.encode(mv)
}

pub fn mv_decode(codec: &MvCodec, block: &MvLatentBlock) -> Result<MotionField> {
    codec.decode(block)
}
